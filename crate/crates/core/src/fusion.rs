//! Decision-level fusion of the two branch probabilities and video-level
//! aggregation with thresholding.
//!
//! Per frame, the fused probability is the convex combination
//! `p = alpha * p_spatial + (1 - alpha) * p_flow`; the video-level probability
//! is the mean of the fused per-frame values, compared against a threshold.

use crate::dataset::Label;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("alpha must lie strictly inside (0, 1), got {0}")]
    AlphaOutOfRange(f64),
    #[error("probability out of [0, 1]: {0}")]
    BadProbability(f64),
    #[error("cannot aggregate an empty frame list")]
    EmptyFrames,
}

/// Per-frame branch probabilities and their fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    /// Frame index; frame `i` is paired with the flow map from frames `(i, i+1)`.
    pub i: usize,
    pub p_spatial: f64,
    pub p_flow: f64,
    pub p_fused: f64,
}

/// Video-level verdict with the per-frame trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoVerdict {
    pub video_id: String,
    pub p_video: f64,
    pub decision: Label,
    pub alpha: f64,
    pub threshold: f64,
    pub frames: Vec<FramePrediction>,
}

impl VideoVerdict {
    /// Builds a verdict from paired branch probabilities.
    pub fn from_probabilities(
        video_id: &str,
        p_spatial: &[f64],
        p_flow: &[f64],
        alpha: f64,
        threshold: f64,
    ) -> Result<Self, FusionError> {
        assert_eq!(p_spatial.len(), p_flow.len(), "branch probability lists must pair up");
        let frames: Vec<FramePrediction> = p_spatial
            .iter()
            .zip(p_flow)
            .enumerate()
            .map(|(i, (&ps, &pf))| {
                Ok(FramePrediction { i, p_spatial: ps, p_flow: pf, p_fused: fuse_frame(ps, pf, alpha)? })
            })
            .collect::<Result<_, FusionError>>()?;
        let p_video = aggregate_video(&frames)?;
        Ok(Self {
            video_id: video_id.to_string(),
            p_video,
            decision: decide(p_video, threshold),
            alpha,
            threshold,
            frames,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("verdict serializes")
    }
}

/// Fuses one frame's branch probabilities: `alpha * p_spatial + (1 - alpha) * p_flow`.
pub fn fuse_frame(p_spatial: f64, p_flow: f64, alpha: f64) -> Result<f64, FusionError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(FusionError::AlphaOutOfRange(alpha));
    }
    for p in [p_spatial, p_flow] {
        if !(0.0..=1.0).contains(&p) {
            return Err(FusionError::BadProbability(p));
        }
    }
    Ok(alpha * p_spatial + (1.0 - alpha) * p_flow)
}

/// Mean of the fused per-frame probabilities.
pub fn aggregate_video(frames: &[FramePrediction]) -> Result<f64, FusionError> {
    if frames.is_empty() {
        return Err(FusionError::EmptyFrames);
    }
    let sum: f64 = frames.iter().map(|f| f.p_fused).sum();
    Ok(sum / frames.len() as f64)
}

/// Thresholding: generated iff `p_video >= threshold`.
pub fn decide(p_video: f64, threshold: f64) -> Label {
    if p_video >= threshold {
        Label::Generated
    } else {
        Label::Real
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames_from(values: &[f64]) -> Vec<FramePrediction> {
        values
            .iter()
            .enumerate()
            .map(|(i, &p)| FramePrediction { i, p_spatial: p, p_flow: p, p_fused: p })
            .collect()
    }

    #[test]
    fn fuse_matches_arithmetic() {
        assert!((fuse_frame(0.8, 0.4, 0.5).unwrap() - 0.6).abs() < 1e-12);
        assert!((fuse_frame(1.0, 0.0, 0.25).unwrap() - 0.25).abs() < 1e-12);
        let p = 0.371;
        assert!((fuse_frame(p, p, 0.9).unwrap() - p).abs() < 1e-12, "equal inputs are a fixed point");
    }

    #[test]
    fn fuse_rejects_bad_alpha() {
        assert_eq!(fuse_frame(0.5, 0.5, 0.0).unwrap_err(), FusionError::AlphaOutOfRange(0.0));
        assert_eq!(fuse_frame(0.5, 0.5, 1.0).unwrap_err(), FusionError::AlphaOutOfRange(1.0));
        assert!(fuse_frame(1.5, 0.5, 0.5).is_err());
    }

    #[test]
    fn aggregate_is_the_mean() {
        let frames = frames_from(&[0.2, 0.4, 0.6]);
        assert!((aggregate_video(&frames).unwrap() - 0.4).abs() < 1e-15);
        let constant = frames_from(&[0.37; 10]);
        assert!((aggregate_video(&constant).unwrap() - 0.37).abs() < 1e-15);
        assert_eq!(aggregate_video(&[]).unwrap_err(), FusionError::EmptyFrames);
    }

    #[test]
    fn aggregate_matches_naive_sum_oracle() {
        let mut rng = crate::util::seeded_rng(100, &["agg-oracle"]);
        use rand::Rng;
        let values: Vec<f64> = (0..94).map(|_| rng.random_range(0.0..1.0)).collect();
        let frames = frames_from(&values);
        // Naive summation oracle, accumulated one term at a time.
        let mut acc = 0.0f64;
        for v in &values {
            acc += v;
        }
        let oracle = acc / values.len() as f64;
        assert!((aggregate_video(&frames).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn decision_boundary_is_inclusive() {
        assert_eq!(decide(0.09, 0.1), Label::Real);
        assert_eq!(decide(0.1, 0.1), Label::Generated);
        assert_eq!(decide(0.95, 0.1), Label::Generated);
    }

    #[test]
    fn verdict_json_uses_contract_field_names() {
        let verdict =
            VideoVerdict::from_probabilities("vid-1", &[0.8, 0.6], &[0.4, 0.2], 0.5, 0.1).unwrap();
        let json = verdict.to_json();
        for key in ["video_id", "p_video", "decision", "alpha", "threshold", "frames", "p_spatial", "p_flow", "p_fused", "\"i\""] {
            assert!(json.contains(key), "missing key {key} in {json}");
        }
        let back: VideoVerdict = serde_json::from_str(&json).unwrap();
        assert_eq!(back, verdict);
        assert_eq!(back.decision, Label::Generated);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn fusion_stays_within_input_bounds(
                ps in 0.0f64..=1.0,
                pf in 0.0f64..=1.0,
                alpha in 0.0001f64..0.9999,
            ) {
                let fused = fuse_frame(ps, pf, alpha).unwrap();
                prop_assert!(fused >= ps.min(pf) - 1e-15);
                prop_assert!(fused <= ps.max(pf) + 1e-15);
            }

            #[test]
            fn fusion_is_affine_in_alpha(
                ps in 0.0f64..=1.0,
                pf in 0.0f64..=1.0,
                alpha in 0.01f64..0.99,
            ) {
                // Slope via central finite difference equals (ps - pf).
                let h = 1e-6;
                let up = fuse_frame(ps, pf, alpha + h).unwrap();
                let down = fuse_frame(ps, pf, alpha - h).unwrap();
                let slope = (up - down) / (2.0 * h);
                prop_assert!((slope - (ps - pf)).abs() < 1e-7);
            }

            #[test]
            fn aggregation_is_permutation_invariant(values in proptest::collection::vec(0.0f64..=1.0, 1..60)) {
                let frames = frames_from(&values);
                let mut reversed = frames.clone();
                reversed.reverse();
                let a = aggregate_video(&frames).unwrap();
                let b = aggregate_video(&reversed).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
