//! Frame decoding and the preprocessing applied before either branch sees an
//! image: watermark removal, JPEG equalization of generated training frames,
//! train/test cropping, and the three-way training augmentation.
//!
//! Every randomized transform is a pure function of (input, config, seed);
//! seeds are derived per (video id, frame index) so parallel workers agree.

use crate::dataset::VideoRecord;
use crate::util::{atomic_write, seeded_rng};
use image::imageops::FilterType;
use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("video error: {0}")]
    Video(#[from] crate::video::VideoError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error("jpeg encode error: {0}")]
    JpegEncode(#[from] jpeg_encoder::EncodingError),
    #[error("watermark fraction must lie in [0, 1), got {0}")]
    BadWatermarkFraction(f64),
    #[error("jpeg quality range invalid: [{0}, {1}] (need 1 <= lo <= hi <= 100)")]
    BadQualityRange(u8, u8),
    #[error("frame sequence '{id}' mixes dimensions: {a:?} vs {b:?}")]
    MixedDimensions { id: String, a: (u32, u32), b: (u32, u32) },
    #[error("frame cache miss: {0}")]
    CacheMiss(PathBuf),
}

/// Decoded RGB frames of one video, in sampling order.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub frames: Vec<RgbImage>,
    pub source_id: String,
    pub fps: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<RgbImage>, source_id: &str, fps: f64) -> Result<Self, PreprocessError> {
        if let Some(first) = frames.first() {
            let a = first.dimensions();
            for f in &frames {
                if f.dimensions() != a {
                    return Err(PreprocessError::MixedDimensions {
                        id: source_id.to_string(),
                        a,
                        b: f.dimensions(),
                    });
                }
            }
        }
        Ok(Self { frames, source_id: source_id.to_string(), fps })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Square crop applied right before an image enters a branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropPolicy {
    pub size: u32,
    pub mode: CropMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    Random,
    Center,
}

impl Default for CropPolicy {
    fn default() -> Self {
        Self { size: 448, mode: CropMode::Random }
    }
}

/// Training-time augmentation: a fraction of samples get blurred, JPEG
/// recompressed, or flipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub apply_fraction: f64,
    pub blur_sigma: f32,
    pub jpeg_quality: u8,
    pub allow_flip: bool,
    pub selection: AugmentSelection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentSelection {
    /// One augmentation event per sample; the transform is chosen uniformly.
    PickOne,
    /// Each transform fires independently with `apply_fraction` probability.
    ApplyAll,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            apply_fraction: 0.10,
            blur_sigma: 0.5,
            jpeg_quality: 75,
            allow_flip: true,
            selection: AugmentSelection::PickOne,
        }
    }
}

/// One of the training augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Blur,
    Jpeg,
    Flip,
}

/// Decodes the frames of `record` at the given sampled indices.
///
/// Returns the sequence and whether any indices were clamped because the
/// stream turned out shorter than expected.
pub fn decode_video(record: &VideoRecord, indices: &[usize]) -> Result<(FrameSequence, bool), PreprocessError> {
    let decoded = crate::video::decode_frames(&record.path, indices)?;
    let seq = FrameSequence::new(decoded.frames, &record.id, 0.0)?;
    Ok((seq, decoded.clamped))
}

/// Removes `floor(H * bottom_fraction)` rows from the bottom of every frame.
pub fn crop_watermark(seq: &FrameSequence, bottom_fraction: f64) -> Result<FrameSequence, PreprocessError> {
    if !(0.0..1.0).contains(&bottom_fraction) {
        return Err(PreprocessError::BadWatermarkFraction(bottom_fraction));
    }
    if bottom_fraction == 0.0 {
        return Ok(seq.clone());
    }
    let frames = seq
        .frames
        .iter()
        .map(|f| {
            let h = f.height();
            let cut = (h as f64 * bottom_fraction).floor() as u32;
            let new_h = h - cut;
            image::imageops::crop_imm(f, 0, 0, f.width(), new_h).to_image()
        })
        .collect();
    FrameSequence::new(frames, &seq.source_id, seq.fps)
}

/// JPEG-encodes an image at the given quality with 4:4:4 sampling and decodes
/// it back. Byte-deterministic for fixed inputs.
pub fn jpeg_roundtrip(image: &RgbImage, quality: u8) -> Result<RgbImage, PreprocessError> {
    Ok(image::load_from_memory(&jpeg_bytes(image, quality)?)?.to_rgb8())
}

/// JPEG encoding used for the equalized frame cache.
pub fn jpeg_bytes(image: &RgbImage, quality: u8) -> Result<Vec<u8>, PreprocessError> {
    let mut out = Vec::new();
    let mut enc = jpeg_encoder::Encoder::new(&mut out, quality);
    enc.set_sampling_factor(jpeg_encoder::SamplingFactor::F_1_1);
    enc.encode(image.as_raw(), image.width() as u16, image.height() as u16, jpeg_encoder::ColorType::Rgb)?;
    Ok(out)
}

/// The quality drawn for one frame during JPEG equalization.
pub fn equalize_quality(lo: u8, hi: u8, seed: u64, source_id: &str, frame_index: usize) -> u8 {
    let mut rng = seeded_rng(seed, &["equalize", source_id, &frame_index.to_string()]);
    rng.random_range(lo..=hi)
}

/// Recompresses every frame once at an integer quality drawn uniformly from
/// `[lo, hi]`. Applied to generated-class training frames so both classes
/// share JPEG history.
pub fn equalize_jpeg(seq: &FrameSequence, quality_range: (u8, u8), seed: u64) -> Result<FrameSequence, PreprocessError> {
    let (lo, hi) = quality_range;
    if lo < 1 || lo > hi || hi > 100 {
        return Err(PreprocessError::BadQualityRange(lo, hi));
    }
    let frames = seq
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| jpeg_roundtrip(f, equalize_quality(lo, hi, seed, &seq.source_id, i)))
        .collect::<Result<_, _>>()?;
    FrameSequence::new(frames, &seq.source_id, seq.fps)
}

/// Crops a square window of `policy.size` pixels.
///
/// Undersized inputs are first upscaled so the shorter side equals the crop
/// size (aspect preserved). Random mode draws the top-left corner uniformly;
/// center mode uses the centered window.
pub fn crop(image: &RgbImage, policy: &CropPolicy, seed: u64) -> RgbImage {
    let size = policy.size;
    let mut scaled;
    let src = if image.width() < size || image.height() < size {
        let (w, h) = (image.width(), image.height());
        let (new_w, new_h) = if w <= h {
            (size, ((h as u64 * size as u64 + w as u64 / 2) / w as u64).max(size as u64) as u32)
        } else {
            (((w as u64 * size as u64 + h as u64 / 2) / h as u64).max(size as u64) as u32, size)
        };
        scaled = image::imageops::resize(image, new_w, new_h, FilterType::Triangle);
        &mut scaled as &RgbImage
    } else {
        image
    };
    let max_x = src.width() - size;
    let max_y = src.height() - size;
    let (x, y) = match policy.mode {
        CropMode::Center => (max_x / 2, max_y / 2),
        CropMode::Random => {
            let mut rng = seeded_rng(seed, &["crop"]);
            (rng.random_range(0..=max_x), rng.random_range(0..=max_y))
        }
    };
    image::imageops::crop_imm(src, x, y, size, size).to_image()
}

/// The transforms the augmentation will apply to one sample, if any.
pub fn augment_plan(cfg: &AugmentationConfig, seed: u64) -> Vec<Transform> {
    let mut rng = seeded_rng(seed, &["augment"]);
    let mut available = vec![Transform::Blur, Transform::Jpeg];
    if cfg.allow_flip {
        available.push(Transform::Flip);
    }
    match cfg.selection {
        AugmentSelection::PickOne => {
            if rng.random_range(0.0..1.0) < cfg.apply_fraction {
                let k = rng.random_range(0..available.len());
                vec![available[k]]
            } else {
                Vec::new()
            }
        }
        AugmentSelection::ApplyAll => available
            .into_iter()
            .filter(|_| rng.random_range(0.0..1.0) < cfg.apply_fraction)
            .collect(),
    }
}

/// Applies the training augmentation to one image.
pub fn augment(image: &RgbImage, cfg: &AugmentationConfig, seed: u64) -> Result<RgbImage, PreprocessError> {
    let mut out = image.clone();
    for transform in augment_plan(cfg, seed) {
        out = match transform {
            Transform::Blur => image::imageops::blur(&out, cfg.blur_sigma),
            Transform::Jpeg => jpeg_roundtrip(&out, cfg.jpeg_quality)?,
            Transform::Flip => image::imageops::flip_horizontal(&out),
        };
    }
    Ok(out)
}

/// On-disk frame cache layout: `<root>/<video_id>/frame_<i>.png` (lossless)
/// and, when equalization ran, `frame_<i>.jpg`.
pub struct FrameCache {
    root: PathBuf,
}

/// Per-video cache metadata, used to detect stale entries when the
/// preprocessing configuration changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameCacheMeta {
    pub frame_count: usize,
    pub watermark_fraction: f64,
    pub equalized: bool,
    pub width: u32,
    pub height: u32,
}

impl FrameCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn video_dir(&self, video_id: &str) -> PathBuf {
        self.root.join(video_id)
    }

    pub fn frame_path(&self, video_id: &str, index: usize) -> PathBuf {
        self.video_dir(video_id).join(format!("frame_{index}.png"))
    }

    pub fn equalized_path(&self, video_id: &str, index: usize) -> PathBuf {
        self.video_dir(video_id).join(format!("frame_{index}.jpg"))
    }

    fn meta_path(&self, video_id: &str) -> PathBuf {
        self.video_dir(video_id).join("meta.json")
    }

    pub fn read_meta(&self, video_id: &str) -> Option<FrameCacheMeta> {
        let bytes = std::fs::read(self.meta_path(video_id)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    /// Stores a preprocessed sequence (and optional equalized variant).
    pub fn store(
        &self,
        seq: &FrameSequence,
        equalized: Option<&FrameSequence>,
        watermark_fraction: f64,
    ) -> Result<(), PreprocessError> {
        for (i, frame) in seq.frames.iter().enumerate() {
            let mut png = Vec::new();
            frame.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)?;
            atomic_write(&self.frame_path(&seq.source_id, i), &png)?;
        }
        if let Some(eq) = equalized {
            for (i, frame) in eq.frames.iter().enumerate() {
                atomic_write(&self.equalized_path(&seq.source_id, i), &jpeg_bytes(frame, 95)?)?;
            }
        }
        let (width, height) = seq.frames.first().map(|f| f.dimensions()).unwrap_or((0, 0));
        let meta = FrameCacheMeta {
            frame_count: seq.len(),
            watermark_fraction,
            equalized: equalized.is_some(),
            width,
            height,
        };
        atomic_write(&self.meta_path(&seq.source_id), serde_json::to_string(&meta)?.as_bytes())?;
        Ok(())
    }

    /// Loads one cached frame; `equalized` selects the JPEG variant.
    pub fn load_frame(&self, video_id: &str, index: usize, equalized: bool) -> Result<RgbImage, PreprocessError> {
        let path = if equalized {
            self.equalized_path(video_id, index)
        } else {
            self.frame_path(video_id, index)
        };
        if !path.exists() {
            return Err(PreprocessError::CacheMiss(path));
        }
        Ok(image::open(path)?.to_rgb8())
    }
}

impl From<serde_json::Error> for PreprocessError {
    fn from(e: serde_json::Error) -> Self {
        PreprocessError::Io(std::io::Error::other(e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = ((x * 3 + y * 7) % 256) as u8;
            image::Rgb([v, 255 - v, (x % 256) as u8])
        })
    }

    fn seq(frames: Vec<RgbImage>) -> FrameSequence {
        FrameSequence::new(frames, "test-video", 10.0).unwrap()
    }

    #[test]
    fn watermark_crop_arithmetic() {
        let s = seq(vec![textured(448, 672)]);
        let same = crop_watermark(&s, 0.0).unwrap();
        assert_eq!(same.frames[0].dimensions(), (448, 672));
        // floor(672 * 0.1) = 67 rows removed.
        let cut = crop_watermark(&s, 0.1).unwrap();
        assert_eq!(cut.frames[0].dimensions(), (448, 605));
        assert!(matches!(
            crop_watermark(&s, 1.0).unwrap_err(),
            PreprocessError::BadWatermarkFraction(_)
        ));
    }

    #[test]
    fn watermark_crop_keeps_top_rows() {
        let s = seq(vec![textured(64, 100)]);
        let cut = crop_watermark(&s, 0.25).unwrap();
        assert_eq!(cut.frames[0].dimensions(), (64, 75));
        for y in [0u32, 40, 74] {
            assert_eq!(cut.frames[0].get_pixel(10, y), s.frames[0].get_pixel(10, y));
        }
    }

    #[test]
    fn equalize_is_deterministic_and_validates_range() {
        let s = seq(vec![textured(40, 40), textured(40, 40)]);
        let a = equalize_jpeg(&s, (70, 90), 5).unwrap();
        let b = equalize_jpeg(&s, (70, 90), 5).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.as_raw(), fb.as_raw());
        }
        assert!(equalize_jpeg(&s, (90, 70), 5).is_err());
        assert!(equalize_jpeg(&s, (0, 90), 5).is_err());
    }

    #[test]
    fn degenerate_range_uses_exact_quality() {
        let s = seq(vec![textured(40, 40)]);
        let eq = equalize_jpeg(&s, (90, 90), 9).unwrap();
        let direct = jpeg_roundtrip(&s.frames[0], 90).unwrap();
        assert_eq!(eq.frames[0].as_raw(), direct.as_raw());
    }

    #[test]
    fn quality_draws_are_uniform_by_chi_squared() {
        // 1000 draws over [70, 90]: 21 bins, chi-squared must stay below the
        // 5% critical value for 20 degrees of freedom (31.410).
        let mut counts = [0usize; 21];
        for i in 0..1000 {
            let q = equalize_quality(70, 90, 77, "chi", i);
            assert!((70..=90).contains(&q));
            counts[(q - 70) as usize] += 1;
        }
        let expected = 1000.0 / 21.0;
        let chi2: f64 = counts.iter().map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        }).sum();
        assert!(chi2 < 31.410, "chi^2 = {chi2}, counts = {counts:?}");
    }

    fn max_drift(a: &RgbImage, b: &RgbImage) -> u16 {
        a.as_raw()
            .iter()
            .zip(b.as_raw())
            .map(|(&a, &b)| (a as i16 - b as i16).unsigned_abs())
            .max()
            .unwrap()
    }

    #[test]
    fn jpeg_quality_100_drift_is_tiny() {
        // The double RGB<->YCbCr conversion costs up to +/-4 even in libjpeg
        // at quality 100 with 4:4:4; chroma-free content stays within +/-2.
        let color = RgbImage::from_fn(32, 32, |x, y| {
            let a = (x as f32 * 0.35).sin() * 50.0 + 120.0;
            let b = (y as f32 * 0.27).cos() * 50.0 + 110.0;
            image::Rgb([a as u8, b as u8, ((a + b) * 0.5) as u8])
        });
        let drift = max_drift(&color, &jpeg_roundtrip(&color, 100).unwrap());
        assert!(drift <= 4, "color drift at quality 100: {drift}");

        let gray = RgbImage::from_fn(32, 32, |x, y| {
            let v = ((x as f32 * 0.35).sin() * 50.0 + 120.0) as u8 + (y % 2) as u8;
            image::Rgb([v, v, v])
        });
        let drift = max_drift(&gray, &jpeg_roundtrip(&gray, 100).unwrap());
        assert!(drift <= 2, "gray drift at quality 100: {drift}");
    }

    #[test]
    fn center_crop_of_exact_size_is_identity() {
        let img = textured(448, 448);
        let policy = CropPolicy { size: 448, mode: CropMode::Center };
        assert_eq!(crop(&img, &policy, 0).as_raw(), img.as_raw());
    }

    #[test]
    fn random_crop_window_is_contiguous_and_in_bounds() {
        // Encode (x, y) into pixel channels so the window origin is readable.
        let img = RgbImage::from_fn(1184, 672, |x, y| {
            image::Rgb([(x % 256) as u8, (x / 256) as u8, (y % 256) as u8])
        });
        let policy = CropPolicy { size: 448, mode: CropMode::Random };
        for seed in 0..8u64 {
            let out = crop(&img, &policy, seed);
            assert_eq!(out.dimensions(), (448, 448));
            let p = out.get_pixel(0, 0);
            let x0 = p[0] as u32 + p[1] as u32 * 256;
            assert!(x0 + 448 <= 1184);
            // The bottom-right pixel must continue the same window.
            let q = out.get_pixel(447, 447);
            let x1 = q[0] as u32 + q[1] as u32 * 256;
            assert_eq!(x1, x0 + 447);
        }
    }

    #[test]
    fn undersized_input_is_upscaled_then_cropped() {
        let img = textured(300, 500);
        let policy = CropPolicy { size: 448, mode: CropMode::Random };
        assert_eq!(crop(&img, &policy, 3).dimensions(), (448, 448));
        let tiny = textured(10, 10);
        assert_eq!(crop(&tiny, &policy, 3).dimensions(), (448, 448));
    }

    #[test]
    fn augment_fraction_zero_is_identity() {
        let img = textured(64, 64);
        let cfg = AugmentationConfig { apply_fraction: 0.0, ..Default::default() };
        for seed in 0..20 {
            assert_eq!(augment(&img, &cfg, seed).unwrap().as_raw(), img.as_raw());
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let img = textured(33, 17);
        let once = image::imageops::flip_horizontal(&img);
        let twice = image::imageops::flip_horizontal(&once);
        assert_eq!(twice.as_raw(), img.as_raw());
    }

    #[test]
    fn pick_one_choices_are_uniform_by_chi_squared() {
        // apply_fraction = 1: every draw augments; the chosen transform over
        // 3000 draws must be uniform across the three options (chi-squared
        // below 5.991, the 5% critical value at 2 degrees of freedom).
        let cfg = AugmentationConfig { apply_fraction: 1.0, ..Default::default() };
        let mut counts = [0usize; 3];
        for seed in 0..3000u64 {
            let plan = augment_plan(&cfg, seed);
            assert_eq!(plan.len(), 1);
            match plan[0] {
                Transform::Blur => counts[0] += 1,
                Transform::Jpeg => counts[1] += 1,
                Transform::Flip => counts[2] += 1,
            }
        }
        let expected = 3000.0 / 3.0;
        let chi2: f64 = counts.iter().map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        }).sum();
        assert!(chi2 < 5.991, "chi^2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn frame_cache_layout_matches_contract() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FrameCache::new(dir.path());
        let s = seq(vec![textured(32, 32), textured(32, 32)]);
        let eq = equalize_jpeg(&s, (70, 90), 1).unwrap();
        cache.store(&s, Some(&eq), 0.0).unwrap();
        assert!(dir.path().join("test-video/frame_0.png").exists());
        assert!(dir.path().join("test-video/frame_1.png").exists());
        assert!(dir.path().join("test-video/frame_0.jpg").exists());
        let meta = cache.read_meta("test-video").unwrap();
        assert_eq!(meta.frame_count, 2);
        assert!(meta.equalized);
        let loaded = cache.load_frame("test-video", 0, false).unwrap();
        assert_eq!(loaded.as_raw(), s.frames[0].as_raw());
        assert!(matches!(
            cache.load_frame("missing", 0, false).unwrap_err(),
            PreprocessError::CacheMiss(_)
        ));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn center_crop_is_idempotent(w in 50u32..160, h in 50u32..160, size in 16u32..48) {
                let img = textured(w, h);
                let policy = CropPolicy { size, mode: CropMode::Center };
                let once = crop(&img, &policy, 0);
                let twice = crop(&once, &policy, 0);
                prop_assert_eq!(once.as_raw(), twice.as_raw());
            }

            #[test]
            fn outputs_stay_rgb8_with_correct_size(seed: u64, size in 16u32..64) {
                let img = textured(100, 80);
                let policy = CropPolicy { size, mode: CropMode::Random };
                let out = crop(&img, &policy, seed);
                prop_assert_eq!(out.dimensions(), (size, size));
                let cfg = AugmentationConfig { apply_fraction: 1.0, ..Default::default() };
                let aug = augment(&out, &cfg, seed).unwrap();
                prop_assert_eq!(aug.dimensions(), (size, size));
            }
        }
    }
}
