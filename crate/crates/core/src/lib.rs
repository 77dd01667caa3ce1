//! AIGVDet: detection of AI-generated videos from spatial and temporal anomalies.
//!
//! The detector runs two independent binary classifiers — one over RGB frames,
//! one over color-encoded optical-flow maps between adjacent frames — and fuses
//! their per-frame probabilities into a single video-level verdict.
//!
//! Pipeline, end to end:
//!
//! 1. [`dataset`] — manifest of labeled videos, split assignment, frame sampling.
//! 2. [`preprocess`] — frame decoding, watermark cropping, JPEG equalization,
//!    train/test cropping, augmentation.
//! 3. [`flow`] — optical-flow estimation between adjacent frames and color-wheel
//!    encoding into 3-channel maps.
//! 4. [`model`] — the two branch classifiers (backbone + GAP + FC + sigmoid) and
//!    the feature-fusion ablation variants.
//! 5. [`fusion`] — decision-level fusion of branch probabilities and video-level
//!    aggregation plus thresholding.
//! 6. [`train`] — binary cross-entropy training with Adam and a
//!    reduce-on-plateau learning-rate schedule.
//! 7. [`evaluate`] — video-level ACC/AUC, per-generator reports, and the H.264
//!    CRF recompression robustness sweep.

pub mod chart;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod flow;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod toycorpus;
pub mod train;
pub mod util;
pub mod video;

pub use dataset::{GenType, Label, SamplingPolicy, Split, VideoRecord};
pub use fusion::{FramePrediction, VideoVerdict};
