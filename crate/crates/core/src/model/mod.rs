//! The branch classifiers: backbone encoder, global average pooling, a
//! one-logit fully connected head, and a sigmoid. Also the feature-level
//! fusion variants used in ablations, checkpoint serialization, and export
//! to a portable inference-graph format.

mod backbone;
mod checkpoint;
mod export;

pub use backbone::{Backbone, ResNet50Backbone, TensorMut, TensorVisit, TinyBackbone, RESNET50_WIDTH, TINY_WIDTH};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, LoadedModel};
pub use export::export_inference_graph;

use crate::nn::{global_avg_pool, global_avg_pool_backward, sigmoid, Linear, Param, Parameterized};
use crate::util::seeded_rng;
use image::RgbImage;
use ndarray::{Array1, Array2, Array4, Ix2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown backbone '{0}' (expected 'tiny' or 'resnet50')")]
    UnknownBackbone(String),
    #[error("input is {got:?} but the branch expects {want}x{want}")]
    InputSizeMismatch { got: (u32, u32), want: u32 },
    #[error("feature length {got} does not match head width {want}")]
    FeatureLengthMismatch { got: usize, want: usize },
    #[error("feature source {got:?} does not match branch modality {want:?}")]
    FeatureSourceMismatch { got: FeatureSource, want: FeatureSource },
    #[error("cannot add feature vectors of lengths {0} and {1}")]
    FuseLengthMismatch(usize, usize),
    #[error("pretrained weights requested but not found at {0}; set AIGVDET_PRETRAINED_DIR or use pretrained=false")]
    PretrainedUnavailable(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which modality a branch (or feature vector) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Spatial,
    Flow,
}

/// Configuration of one branch classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    /// Backbone identifier: `resnet50` (default) or `tiny`.
    pub backbone: String,
    /// Expected side length of inputs; enforced unless `enforce_input_size`
    /// is cleared (the no-crop variant feeds native sizes).
    pub input_size: u32,
    pub pretrained: bool,
    pub source: FeatureSource,
    pub enforce_input_size: bool,
}

impl BranchConfig {
    pub fn paper_default(source: FeatureSource) -> Self {
        Self { backbone: "resnet50".into(), input_size: 448, pretrained: true, source, enforce_input_size: true }
    }

    pub fn tiny(source: FeatureSource, input_size: u32) -> Self {
        Self { backbone: "tiny".into(), input_size, pretrained: false, source, enforce_input_size: true }
    }
}

/// Pooled feature vector out of a backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Array1<f32>,
    pub source: FeatureSource,
}

/// The detector variants exercised in ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariantKind {
    /// Spatial branch only.
    SSpatial,
    /// Flow branch only.
    SOptical,
    /// Flow branch fed native-size maps (no cropping).
    SOpticalNoCrop,
    /// Joint model, features concatenated under one shared head.
    FFConcat,
    /// Joint model, features added element-wise under one shared head.
    FFAdd,
    /// Both branches trained independently, fused at decision level.
    Aigvdet,
}

impl VariantKind {
    pub const ALL: [VariantKind; 6] = [
        VariantKind::SSpatial,
        VariantKind::SOptical,
        VariantKind::SOpticalNoCrop,
        VariantKind::FFConcat,
        VariantKind::FFAdd,
        VariantKind::Aigvdet,
    ];

    /// Report label.
    pub fn label(&self) -> &'static str {
        match self {
            VariantKind::SSpatial => "S_spatial",
            VariantKind::SOptical => "S_optical",
            VariantKind::SOpticalNoCrop => "S_optical_no_cp",
            VariantKind::FFConcat => "FF_concat",
            VariantKind::FFAdd => "FF_add",
            VariantKind::Aigvdet => "AIGVDet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.label().eq_ignore_ascii_case(s))
    }

    pub fn is_feature_fusion(&self) -> bool {
        matches!(self, VariantKind::FFConcat | VariantKind::FFAdd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub kind: VariantKind,
}

/// Feature-level fusion mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFusion {
    Concat,
    Add,
}

/// Concatenates or element-wise adds two feature vectors.
pub fn fuse_features(a: &FeatureVector, b: &FeatureVector, kind: FeatureFusion) -> Result<FeatureVector, ModelError> {
    let values = match kind {
        FeatureFusion::Concat => {
            let mut out = Array1::zeros(a.values.len() + b.values.len());
            out.slice_mut(ndarray::s![..a.values.len()]).assign(&a.values);
            out.slice_mut(ndarray::s![a.values.len()..]).assign(&b.values);
            out
        }
        FeatureFusion::Add => {
            if a.values.len() != b.values.len() {
                return Err(ModelError::FuseLengthMismatch(a.values.len(), b.values.len()));
            }
            &a.values + &b.values
        }
    };
    Ok(FeatureVector { values, source: a.source })
}

/// Per-channel input normalization applied when images become tensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputNorm {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl InputNorm {
    /// The standard large-model normalization constants.
    pub fn imagenet() -> Self {
        Self { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] }
    }

    pub fn centered() -> Self {
        Self { mean: [0.5; 3], std: [0.5; 3] }
    }

    pub fn for_backbone(backbone: &str) -> Self {
        if backbone == "resnet50" {
            Self::imagenet()
        } else {
            Self::centered()
        }
    }
}

/// Converts same-size RGB images to a normalized `[N, 3, H, W]` tensor.
pub fn images_to_tensor(images: &[&RgbImage], norm: InputNorm) -> Array4<f32> {
    let (w, h) = images.first().map(|i| i.dimensions()).unwrap_or((0, 0));
    let mut out = Array4::zeros((images.len(), 3, h as usize, w as usize));
    for (n, img) in images.iter().enumerate() {
        assert_eq!(img.dimensions(), (w, h), "batch mixes image sizes");
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out[[n, c, y as usize, x as usize]] =
                    (p[c] as f32 / 255.0 - norm.mean[c]) / norm.std[c];
            }
        }
    }
    out
}

fn build_backbone(name: &str, seed: u64) -> Result<Backbone, ModelError> {
    match name {
        "tiny" => Ok(Backbone::Tiny(TinyBackbone::new(&mut seeded_rng(seed, &["backbone", "tiny"])))),
        "resnet50" => Ok(Backbone::ResNet50(ResNet50Backbone::new(&mut seeded_rng(seed, &["backbone", "resnet50"])))),
        other => Err(ModelError::UnknownBackbone(other.to_string())),
    }
}

fn pretrained_path(backbone: &str) -> String {
    let dir = std::env::var("AIGVDET_PRETRAINED_DIR").unwrap_or_else(|_| "pretrained".into());
    format!("{dir}/{backbone}.ckpt")
}

/// One branch classifier: backbone → GAP → FC(1) → sigmoid.
pub struct BranchModel {
    pub config: BranchConfig,
    pub backbone: Backbone,
    pub head: Linear,
    train_cache: Option<(usize, usize)>,
}

impl BranchModel {
    /// Builds a branch with seeded initialization. `pretrained = true` loads
    /// backbone weights from `$AIGVDET_PRETRAINED_DIR/<backbone>.ckpt`.
    pub fn new(config: BranchConfig, seed: u64) -> Result<Self, ModelError> {
        let mut backbone = build_backbone(&config.backbone, seed)?;
        if config.pretrained {
            let path = pretrained_path(&config.backbone);
            if !std::path::Path::new(&path).exists() {
                return Err(ModelError::PretrainedUnavailable(path));
            }
            checkpoint::load_tensors_into(std::path::Path::new(&path), &mut backbone)
                .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        }
        let width = backbone.feature_width();
        // Freshly initialized head: small uniform weights, zero bias.
        let head = Linear::new_small_uniform(width, 1, 0.01, &mut seeded_rng(seed, &["head"]));
        Ok(Self { config, backbone, head, train_cache: None })
    }

    pub fn feature_width(&self) -> usize {
        self.backbone.feature_width()
    }

    fn check_input(&self, images: &[&RgbImage]) -> Result<(), ModelError> {
        if self.config.enforce_input_size {
            for img in images {
                if img.dimensions() != (self.config.input_size, self.config.input_size) {
                    return Err(ModelError::InputSizeMismatch {
                        got: img.dimensions(),
                        want: self.config.input_size,
                    });
                }
            }
        }
        Ok(())
    }

    /// Encodes images into pooled feature vectors (eval mode).
    pub fn encode(&self, images: &[&RgbImage]) -> Result<Vec<FeatureVector>, ModelError> {
        self.check_input(images)?;
        let x = images_to_tensor(images, InputNorm::for_backbone(&self.config.backbone));
        let maps = self.backbone.forward_eval(&x);
        let pooled = global_avg_pool(&maps);
        Ok(pooled
            .rows()
            .into_iter()
            .map(|row| FeatureVector { values: row.to_owned(), source: self.config.source })
            .collect())
    }

    /// Maps one pooled feature vector to a probability in (0, 1).
    pub fn classify(&self, feature: &FeatureVector) -> Result<f64, ModelError> {
        if feature.source != self.config.source {
            return Err(ModelError::FeatureSourceMismatch { got: feature.source, want: self.config.source });
        }
        if feature.values.len() != self.feature_width() {
            return Err(ModelError::FeatureLengthMismatch {
                got: feature.values.len(),
                want: self.feature_width(),
            });
        }
        let x = feature.values.view().insert_axis(ndarray::Axis(0)).to_owned();
        let logits = self.head.forward_eval(&x);
        Ok(sigmoid(logits[[0, 0]]) as f64)
    }

    /// Full eval path for a batch of images.
    pub fn predict(&self, images: &[&RgbImage]) -> Result<Vec<f64>, ModelError> {
        self.check_input(images)?;
        let x = images_to_tensor(images, InputNorm::for_backbone(&self.config.backbone));
        let maps = self.backbone.forward_eval(&x);
        let pooled = global_avg_pool(&maps);
        let logits = self.head.forward_eval(&pooled);
        Ok(logits.column(0).iter().map(|&z| sigmoid(z) as f64).collect())
    }

    /// Training forward: returns per-sample logits and keeps caches.
    pub fn forward_train(&mut self, x: &Array4<f32>) -> Array1<f32> {
        let maps = self.backbone.forward_train(x);
        let (_, _, h, w) = maps.dim();
        self.train_cache = Some((h, w));
        let pooled = global_avg_pool(&maps);
        let logits = self.head.forward_train(&pooled);
        logits.column(0).to_owned()
    }

    /// Training backward from per-sample logit gradients.
    pub fn backward(&mut self, dlogits: &Array1<f32>) {
        let (h, w) = self.train_cache.take().expect("backward without forward_train");
        let dlog2 = dlogits.view().insert_axis(ndarray::Axis(1)).to_owned();
        let dpooled = self.head.backward(&dlog2);
        let dmaps = global_avg_pool_backward(&dpooled, h, w);
        self.backbone.backward(&dmaps);
    }
}

impl Parameterized for BranchModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone.visit_params(f);
        self.head.visit_params(f);
    }
}

impl TensorVisit for BranchModel {
    fn visit_tensors(&mut self, f: &mut dyn FnMut(&str, TensorMut)) {
        self.backbone.visit_tensors(&mut |name, t| f(&format!("backbone.{name}"), t));
        f("head.weight", TensorMut::Dyn(&mut self.head.weight.value));
        f("head.bias", TensorMut::Dyn(&mut self.head.bias.value));
    }
}

/// Joint two-backbone model with a single shared head over fused features.
pub struct FusedModel {
    pub fusion: FeatureFusion,
    pub spatial_config: BranchConfig,
    pub flow_config: BranchConfig,
    pub spatial_backbone: Backbone,
    pub flow_backbone: Backbone,
    pub head: Linear,
    train_cache: Option<FusedCache>,
}

struct FusedCache {
    spatial_hw: (usize, usize),
    flow_hw: (usize, usize),
    width: usize,
}

impl FusedModel {
    pub fn new(
        fusion: FeatureFusion,
        spatial_config: BranchConfig,
        flow_config: BranchConfig,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let spatial_backbone = build_backbone(&spatial_config.backbone, crate::util::derive_seed(seed, &["spatial"]))?;
        let flow_backbone = build_backbone(&flow_config.backbone, crate::util::derive_seed(seed, &["flow"]))?;
        let width = spatial_backbone.feature_width();
        if flow_backbone.feature_width() != width {
            return Err(ModelError::FuseLengthMismatch(width, flow_backbone.feature_width()));
        }
        let head_in = match fusion {
            FeatureFusion::Concat => 2 * width,
            FeatureFusion::Add => width,
        };
        let head = Linear::new_small_uniform(head_in, 1, 0.01, &mut seeded_rng(seed, &["fused-head"]));
        Ok(Self { fusion, spatial_config, flow_config, spatial_backbone, flow_backbone, head, train_cache: None })
    }

    fn fuse_batch(&self, a: &Array2<f32>, b: &Array2<f32>) -> Array2<f32> {
        match self.fusion {
            FeatureFusion::Concat => {
                let (n, c) = a.dim();
                let mut out = Array2::zeros((n, 2 * c));
                out.slice_mut(ndarray::s![.., ..c]).assign(a);
                out.slice_mut(ndarray::s![.., c..]).assign(b);
                out
            }
            FeatureFusion::Add => a + b,
        }
    }

    /// Eval path over paired (frame, flow map) tensors.
    pub fn predict_pairs(&self, frames: &[&RgbImage], flows: &[&RgbImage]) -> Result<Vec<f64>, ModelError> {
        assert_eq!(frames.len(), flows.len());
        let xs = images_to_tensor(frames, InputNorm::for_backbone(&self.spatial_config.backbone));
        let xf = images_to_tensor(flows, InputNorm::for_backbone(&self.flow_config.backbone));
        let fa = global_avg_pool(&self.spatial_backbone.forward_eval(&xs));
        let fb = global_avg_pool(&self.flow_backbone.forward_eval(&xf));
        let logits = self.head.forward_eval(&self.fuse_batch(&fa, &fb));
        Ok(logits.column(0).iter().map(|&z| sigmoid(z) as f64).collect())
    }

    pub fn forward_train(&mut self, xs: &Array4<f32>, xf: &Array4<f32>) -> Array1<f32> {
        let ms = self.spatial_backbone.forward_train(xs);
        let mf = self.flow_backbone.forward_train(xf);
        let (_, _, sh, sw) = ms.dim();
        let (_, cf, fh, fw) = mf.dim();
        self.train_cache = Some(FusedCache { spatial_hw: (sh, sw), flow_hw: (fh, fw), width: cf });
        let fa = global_avg_pool(&ms);
        let fb = global_avg_pool(&mf);
        let logits = self.head.forward_train(&self.fuse_batch(&fa, &fb));
        logits.column(0).to_owned()
    }

    pub fn backward(&mut self, dlogits: &Array1<f32>) {
        let cache = self.train_cache.take().expect("backward without forward_train");
        let dlog2 = dlogits.view().insert_axis(ndarray::Axis(1)).to_owned();
        let dfused = self.head.backward(&dlog2);
        let (da, db) = match self.fusion {
            FeatureFusion::Concat => {
                let c = cache.width;
                (
                    dfused.slice(ndarray::s![.., ..c]).to_owned(),
                    dfused.slice(ndarray::s![.., c..]).to_owned(),
                )
            }
            FeatureFusion::Add => (dfused.clone(), dfused),
        };
        let dms = global_avg_pool_backward(&da, cache.spatial_hw.0, cache.spatial_hw.1);
        let dmf = global_avg_pool_backward(&db, cache.flow_hw.0, cache.flow_hw.1);
        self.spatial_backbone.backward(&dms);
        self.flow_backbone.backward(&dmf);
    }
}

impl Parameterized for FusedModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.spatial_backbone.visit_params(f);
        self.flow_backbone.visit_params(f);
        self.head.visit_params(f);
    }
}

impl TensorVisit for FusedModel {
    fn visit_tensors(&mut self, f: &mut dyn FnMut(&str, TensorMut)) {
        self.spatial_backbone.visit_tensors(&mut |name, t| f(&format!("spatial.{name}"), t));
        self.flow_backbone.visit_tensors(&mut |name, t| f(&format!("flow.{name}"), t));
        f("head.weight", TensorMut::Dyn(&mut self.head.weight.value));
        f("head.bias", TensorMut::Dyn(&mut self.head.bias.value));
    }
}

/// Direct access to the head weights, used by equivalence tests and export.
pub fn head_weights(head: &Linear) -> (Array2<f32>, Array1<f32>) {
    (
        head.weight.value.view().into_dimensionality::<Ix2>().unwrap().to_owned(),
        head.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned(),
    )
}
