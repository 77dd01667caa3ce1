//! Optical-flow estimation between adjacent frames and color encoding of the
//! two-channel field into the 3-channel maps the temporal branch consumes.
//!
//! Estimation is pluggable: a zero-flow stub for tests, a classical
//! polynomial-expansion estimator that needs no weights, and an external
//! command bridge for neural estimators (RAFT-style) that exchange
//! Middlebury `.flo` files.

pub mod classical;
mod encode;
mod external;

pub use classical::{FarnebackEstimator, FarnebackParams};
pub use encode::{decode_flo, encode_flo, encode_flow_rgb, Normalization};
pub use external::ExternalEstimator;

use crate::preprocess::FrameSequence;
use crate::util::{atomic_write, sha256_hex};
use image::RgbImage;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("frame dimensions differ: {a:?} vs {b:?}")]
    DimensionMismatch { a: (u32, u32), b: (u32, u32) },
    #[error("flow field is not finite at pixel ({x}, {y})")]
    NonFinite { x: usize, y: usize },
    #[error("need at least 2 frames to compute flow, got {0}")]
    TooFewFrames(usize),
    #[error("estimator backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error("bad .flo file: {0}")]
    BadFlo(String),
}

/// Dense per-pixel displacement between two frames, in pixels per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Array2<f32>,
    pub v: Array2<f32>,
}

impl FlowField {
    pub fn new(u: Array2<f32>, v: Array2<f32>) -> Result<Self, FlowError> {
        assert_eq!(u.dim(), v.dim(), "flow components must share a shape");
        for ((y, x), &val) in u.indexed_iter() {
            if !val.is_finite() || !v[[y, x]].is_finite() {
                return Err(FlowError::NonFinite { x, y });
            }
        }
        Ok(Self { u, v })
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            u: Array2::zeros((height as usize, width as usize)),
            v: Array2::zeros((height as usize, width as usize)),
        }
    }

    pub fn width(&self) -> u32 {
        self.u.dim().1 as u32
    }

    pub fn height(&self) -> u32 {
        self.u.dim().0 as u32
    }

    /// Flips the direction of every displacement vector.
    pub fn negated(&self) -> Self {
        Self { u: self.u.mapv(|x| -x), v: self.v.mapv(|x| -x) }
    }
}

/// Ordered color-encoded flow maps of one video; always one fewer than frames.
#[derive(Debug, Clone)]
pub struct FlowSequence {
    pub maps: Vec<RgbImage>,
    pub source_id: String,
}

/// A dense two-frame flow estimator.
pub trait FlowEstimator: Send + Sync {
    fn name(&self) -> &str;
    fn deterministic(&self) -> bool;
    fn estimate(&self, a: &RgbImage, b: &RgbImage) -> Result<FlowField, FlowError>;
}

/// Estimates flow between two frames after checking their dimensions agree.
pub fn estimate_flow(
    estimator: &dyn FlowEstimator,
    frame_a: &RgbImage,
    frame_b: &RgbImage,
) -> Result<FlowField, FlowError> {
    if frame_a.dimensions() != frame_b.dimensions() {
        return Err(FlowError::DimensionMismatch { a: frame_a.dimensions(), b: frame_b.dimensions() });
    }
    estimator.estimate(frame_a, frame_b)
}

/// Test stub: all-zero flow, exactly.
#[derive(Debug, Default, Clone)]
pub struct ZeroFlowStub;

impl FlowEstimator for ZeroFlowStub {
    fn name(&self) -> &str {
        "zero-stub"
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn estimate(&self, a: &RgbImage, _b: &RgbImage) -> Result<FlowField, FlowError> {
        Ok(FlowField::zeros(a.width(), a.height()))
    }
}

/// Wraps an estimator and counts invocations; used to observe cache hits.
pub struct CountingEstimator<E> {
    inner: E,
    calls: AtomicUsize,
}

impl<E: FlowEstimator> CountingEstimator<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<E: FlowEstimator> FlowEstimator for CountingEstimator<E> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn deterministic(&self) -> bool {
        self.inner.deterministic()
    }

    fn estimate(&self, a: &RgbImage, b: &RgbImage) -> Result<FlowField, FlowError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.estimate(a, b)
    }
}

/// Sidecar metadata stored next to each cached flow map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMeta {
    pub estimator: String,
    pub normalization: Normalization,
    pub checksum: String,
}

/// On-disk cache of encoded flow maps:
/// `<root>/<video_id>/flow_<i>.png` plus `flow_<i>.meta`.
pub struct FlowCache {
    root: PathBuf,
    /// Also keep the raw two-channel field as `flow_<i>.flo`.
    pub store_raw: bool,
}

impl FlowCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), store_raw: false }
    }

    pub fn map_path(&self, video_id: &str, index: usize) -> PathBuf {
        self.root.join(video_id).join(format!("flow_{index}.png"))
    }

    pub fn meta_path(&self, video_id: &str, index: usize) -> PathBuf {
        self.root.join(video_id).join(format!("flow_{index}.meta"))
    }

    pub fn raw_path(&self, video_id: &str, index: usize) -> PathBuf {
        self.root.join(video_id).join(format!("flow_{index}.flo"))
    }

    /// Loads a cached map if present, configured identically, and unbroken.
    pub fn load(&self, video_id: &str, index: usize, estimator: &str, normalization: Normalization) -> Option<RgbImage> {
        let meta_bytes = std::fs::read(self.meta_path(video_id, index)).ok()?;
        let meta: FlowMeta = serde_json::from_slice(&meta_bytes).ok()?;
        if meta.estimator != estimator || meta.normalization != normalization {
            return None;
        }
        let png = std::fs::read(self.map_path(video_id, index)).ok()?;
        if sha256_hex(&png) != meta.checksum {
            return None;
        }
        image::load_from_memory(&png).ok().map(|i| i.to_rgb8())
    }

    pub fn store(
        &self,
        video_id: &str,
        index: usize,
        map: &RgbImage,
        raw: Option<&FlowField>,
        estimator: &str,
        normalization: Normalization,
    ) -> Result<(), FlowError> {
        let mut png = Vec::new();
        map.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)?;
        let meta = FlowMeta {
            estimator: estimator.to_string(),
            normalization,
            checksum: sha256_hex(&png),
        };
        atomic_write(&self.map_path(video_id, index), &png)?;
        let meta_json = serde_json::to_vec(&meta).expect("meta serializes");
        atomic_write(&self.meta_path(video_id, index), &meta_json)?;
        if self.store_raw {
            if let Some(field) = raw {
                atomic_write(&self.raw_path(video_id, index), &encode_flo(field))?;
            }
        }
        Ok(())
    }
}

/// Computes the color-encoded flow maps between adjacent frames.
///
/// `N` frames yield `N-1` maps. Pairs are estimated in parallel and collected
/// in frame order; a warm cache short-circuits estimation entirely.
pub fn compute_flow_sequence(
    frames: &FrameSequence,
    estimator: &dyn FlowEstimator,
    cache: Option<&FlowCache>,
    normalization: Normalization,
) -> Result<FlowSequence, FlowError> {
    if frames.len() < 2 {
        return Err(FlowError::TooFewFrames(frames.len()));
    }
    let maps: Vec<RgbImage> = (0..frames.len() - 1)
        .into_par_iter()
        .map(|i| -> Result<RgbImage, FlowError> {
            if let Some(c) = cache {
                if let Some(hit) = c.load(&frames.source_id, i, estimator.name(), normalization) {
                    return Ok(hit);
                }
            }
            let field = estimate_flow(estimator, &frames.frames[i], &frames.frames[i + 1])?;
            let map = encode_flow_rgb(&field, normalization);
            if let Some(c) = cache {
                c.store(&frames.source_id, i, &map, Some(&field), estimator.name(), normalization)?;
            }
            Ok(map)
        })
        .collect::<Result<_, _>>()?;
    Ok(FlowSequence { maps, source_id: frames.source_id.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_frame(w: u32, h: u32, level: u8) -> RgbImage {
        RgbImage::from_pixel(w, h, image::Rgb([level, level, level]))
    }

    fn frames(n: usize) -> FrameSequence {
        let fs: Vec<RgbImage> = (0..n).map(|i| gray_frame(16, 12, (i * 9 % 200) as u8 + 20)).collect();
        FrameSequence::new(fs, "flows", 10.0).unwrap()
    }

    #[test]
    fn stub_gives_exact_zero_and_neutral_encoding() {
        let a = gray_frame(20, 10, 128);
        let field = estimate_flow(&ZeroFlowStub, &a, &a).unwrap();
        assert!(field.u.iter().all(|&v| v == 0.0));
        let map = encode_flow_rgb(&field, Normalization::PerFrameMax);
        for p in map.pixels() {
            for c in 0..3 {
                assert!(255 - p[c] <= 2, "zero flow must encode to white, got {p:?}");
            }
        }
    }

    #[test]
    fn mismatched_dimensions_error() {
        let a = gray_frame(20, 10, 0);
        let b = gray_frame(10, 20, 0);
        assert!(matches!(
            estimate_flow(&ZeroFlowStub, &a, &b).unwrap_err(),
            FlowError::DimensionMismatch { .. }
        ));
    }

    #[test]
    fn n_frames_yield_n_minus_one_maps() {
        for n in [2usize, 5, 95] {
            let seq = frames(n);
            let flows = compute_flow_sequence(&seq, &ZeroFlowStub, None, Normalization::PerFrameMax).unwrap();
            assert_eq!(flows.maps.len(), n - 1);
        }
        assert!(matches!(
            compute_flow_sequence(&frames(1), &ZeroFlowStub, None, Normalization::PerFrameMax).unwrap_err(),
            FlowError::TooFewFrames(1)
        ));
    }

    #[test]
    fn warm_cache_skips_estimation() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FlowCache::new(dir.path());
        let seq = frames(6);
        let counting = CountingEstimator::new(ZeroFlowStub);
        let first = compute_flow_sequence(&seq, &counting, Some(&cache), Normalization::PerFrameMax).unwrap();
        assert_eq!(counting.calls(), 5);
        let second = compute_flow_sequence(&seq, &counting, Some(&cache), Normalization::PerFrameMax).unwrap();
        assert_eq!(counting.calls(), 5, "second pass must be served from cache");
        for (a, b) in first.maps.iter().zip(&second.maps) {
            assert_eq!(a.as_raw(), b.as_raw(), "re-reads must be byte-identical");
        }
    }

    #[test]
    fn corrupted_cache_is_detected_and_recomputed() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FlowCache::new(dir.path());
        let seq = frames(3);
        let counting = CountingEstimator::new(ZeroFlowStub);
        compute_flow_sequence(&seq, &counting, Some(&cache), Normalization::PerFrameMax).unwrap();
        assert_eq!(counting.calls(), 2);
        // Flip bytes in one cached map; the checksum must catch it.
        let victim = cache.map_path("flows", 1);
        let mut bytes = std::fs::read(&victim).unwrap();
        let last = bytes.len() - 20;
        bytes[last] ^= 0xff;
        std::fs::write(&victim, bytes).unwrap();
        compute_flow_sequence(&seq, &counting, Some(&cache), Normalization::PerFrameMax).unwrap();
        assert_eq!(counting.calls(), 3, "exactly the corrupted entry is recomputed");
    }

    #[test]
    fn changed_estimator_invalidates_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FlowCache::new(dir.path());
        let seq = frames(3);
        compute_flow_sequence(&seq, &ZeroFlowStub, Some(&cache), Normalization::PerFrameMax).unwrap();
        let counting = CountingEstimator::new(FarnebackEstimator::default());
        compute_flow_sequence(&seq, &counting, Some(&cache), Normalization::PerFrameMax).unwrap();
        assert_eq!(counting.calls(), 2, "maps cached under another estimator must not be reused");
    }

    #[test]
    fn non_finite_fields_are_rejected() {
        let mut u = Array2::zeros((4, 4));
        u[[1, 2]] = f32::NAN;
        assert!(matches!(
            FlowField::new(u, Array2::zeros((4, 4))).unwrap_err(),
            FlowError::NonFinite { x: 2, y: 1 }
        ));
    }
}
