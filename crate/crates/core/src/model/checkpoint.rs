//! Checkpoint files: a small JSON header describing the model followed by
//! raw little-endian f32 tensor data in visit order.
//!
//! Loading rebuilds the model from its serialized configuration and rejects
//! any shape or name disagreement, so a checkpoint can never silently attach
//! to the wrong architecture.

use super::{
    Backbone, BranchConfig, BranchModel, FeatureFusion, FusedModel, ModelError, TensorMut,
    TensorVisit,
};
use crate::nn::Linear;
use crate::util::atomic_write;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

const MAGIC: &[u8; 4] = b"AGVD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// What kind of model a checkpoint holds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelDescriptor {
    Branch { config: BranchConfig },
    Fused { fusion: FeatureFusion, spatial_config: BranchConfig, flow_config: BranchConfig },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelDescriptor,
    /// Hash of the training recipe that produced these weights.
    pub recipe_fingerprint: String,
    pub tensors: Vec<TensorInfo>,
}

/// A deserialized checkpoint.
pub enum LoadedModel {
    Branch(BranchModel),
    Fused(FusedModel),
}

impl LoadedModel {
    pub fn header_of(path: &Path) -> Result<CheckpointHeader, ModelError> {
        let bytes = std::fs::read(path)?;
        parse_header(&bytes).map(|(h, _)| h)
    }
}

fn collect_tensors(model: &mut dyn TensorVisit) -> (Vec<TensorInfo>, Vec<u8>) {
    let mut infos = Vec::new();
    let mut data = Vec::new();
    model.visit_tensors(&mut |name, t| {
        let (shape, values): (Vec<usize>, Vec<f32>) = match t {
            TensorMut::Dyn(a) => (a.shape().to_vec(), a.iter().copied().collect()),
            TensorMut::One(a) => (vec![a.len()], a.to_vec()),
        };
        infos.push(TensorInfo { name: name.to_string(), shape });
        for v in values {
            data.write_f32::<LittleEndian>(v).unwrap();
        }
    });
    (infos, data)
}

/// Serializes a model plus its descriptor and recipe fingerprint.
pub fn save_checkpoint(
    path: &Path,
    descriptor: ModelDescriptor,
    model: &mut dyn TensorVisit,
    recipe_fingerprint: &str,
) -> Result<(), ModelError> {
    let (tensors, data) = collect_tensors(model);
    let header = CheckpointHeader {
        model: descriptor,
        recipe_fingerprint: recipe_fingerprint.to_string(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header_json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(VERSION).unwrap();
    out.write_u32::<LittleEndian>(header_json.len() as u32).unwrap();
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&data);
    atomic_write(path, &out)?;
    Ok(())
}

fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize), ModelError> {
    let bad = |msg: &str| ModelError::Checkpoint(msg.to_string());
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut cursor = std::io::Cursor::new(&bytes[4..12]);
    let version = cursor.read_u32::<LittleEndian>().unwrap();
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let header_len = cursor.read_u32::<LittleEndian>().unwrap() as usize;
    if bytes.len() < 12 + header_len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| ModelError::Checkpoint(format!("bad header: {e}")))?;
    Ok((header, 12 + header_len))
}

fn assign_tensors(
    model: &mut dyn TensorVisit,
    infos: &[TensorInfo],
    mut data: &[u8],
) -> Result<(), ModelError> {
    let mut idx = 0usize;
    let mut failure: Option<ModelError> = None;
    model.visit_tensors(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        if idx >= infos.len() {
            failure = Some(ModelError::Checkpoint(format!("checkpoint is missing tensor '{name}'")));
            return;
        }
        let info = &infos[idx];
        if info.name != name {
            failure = Some(ModelError::Checkpoint(format!(
                "tensor order mismatch: expected '{name}', checkpoint has '{}'",
                info.name
            )));
            return;
        }
        let want_shape: Vec<usize> = match &t {
            TensorMut::Dyn(a) => a.shape().to_vec(),
            TensorMut::One(a) => vec![a.len()],
        };
        if want_shape != info.shape {
            failure = Some(ModelError::Checkpoint(format!(
                "tensor '{name}' shape mismatch: model {want_shape:?}, checkpoint {:?}",
                info.shape
            )));
            return;
        }
        let count: usize = info.shape.iter().product();
        if data.len() < count * 4 {
            failure = Some(ModelError::Checkpoint("truncated tensor data".into()));
            return;
        }
        match t {
            TensorMut::Dyn(a) => {
                for v in a.iter_mut() {
                    *v = (&mut data).read_f32::<LittleEndian>().unwrap();
                }
            }
            TensorMut::One(a) => {
                for v in a.iter_mut() {
                    *v = (&mut data).read_f32::<LittleEndian>().unwrap();
                }
            }
        }
        idx += 1;
    });
    if let Some(err) = failure {
        return Err(err);
    }
    if idx != infos.len() {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint has {} extra tensor(s)",
            infos.len() - idx
        )));
    }
    Ok(())
}

/// Builds a branch without touching pretrained files; weights come from the
/// caller.
fn branch_uninit(config: BranchConfig) -> Result<BranchModel, ModelError> {
    let mut cfg = config;
    let was_pretrained = cfg.pretrained;
    cfg.pretrained = false;
    let mut model = BranchModel::new(cfg, 0)?;
    model.config.pretrained = was_pretrained;
    Ok(model)
}

/// Loads a checkpoint, rebuilding the model it describes.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, LoadedModel), ModelError> {
    let bytes = std::fs::read(path)?;
    let (header, offset) = parse_header(&bytes)?;
    let data = &bytes[offset..];
    let loaded = match &header.model {
        ModelDescriptor::Branch { config } => {
            let mut model = branch_uninit(config.clone())?;
            assign_tensors(&mut model, &header.tensors, data)?;
            LoadedModel::Branch(model)
        }
        ModelDescriptor::Fused { fusion, spatial_config, flow_config } => {
            let mut sc = spatial_config.clone();
            sc.pretrained = false;
            let mut fc = flow_config.clone();
            fc.pretrained = false;
            let mut model = FusedModel::new(*fusion, sc, fc, 0)?;
            assign_tensors(&mut model, &header.tensors, data)?;
            LoadedModel::Fused(model)
        }
    };
    Ok((header, loaded))
}

/// Loads a tensors-only checkpoint (e.g. converted pretrained weights) into
/// an existing backbone.
pub fn load_tensors_into(path: &Path, backbone: &mut Backbone) -> Result<(), ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (header, offset) = parse_header(&bytes)?;
    assign_tensors(backbone, &header.tensors, &bytes[offset..])
}

/// Serializes a bare backbone (the pretrained-weights interchange file).
pub fn save_backbone(path: &Path, backbone: &mut Backbone, config: &BranchConfig) -> Result<(), ModelError> {
    save_checkpoint(
        path,
        ModelDescriptor::Branch { config: config.clone() },
        backbone,
        "backbone-weights",
    )
}

/// Convenience used by tests and the schedule: round-trips a head too.
pub fn head_of(model: &BranchModel) -> &Linear {
    &model.head
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BranchConfig, FeatureSource};
    use image::RgbImage;

    fn sample_image(seed: u8) -> RgbImage {
        RgbImage::from_fn(48, 48, |x, y| {
            image::Rgb([
                ((x + y * 2 + seed as u32) % 256) as u8,
                ((x * 3 + seed as u32) % 256) as u8,
                ((y * 5) % 256) as u8,
            ])
        })
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        let mut model = BranchModel::new(BranchConfig::tiny(FeatureSource::Spatial, 48), 33).unwrap();
        let img = sample_image(5);
        let before = model.predict(&[&img]).unwrap();
        let descriptor = ModelDescriptor::Branch { config: model.config.clone() };
        save_checkpoint(&path, descriptor, &mut model, "fingerprint-1").unwrap();

        let (header, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(header.recipe_fingerprint, "fingerprint-1");
        let LoadedModel::Branch(restored) = loaded else { panic!("expected branch") };
        let after = restored.predict(&[&img]).unwrap();
        assert_eq!(before, after, "round-trip must reproduce identical outputs");
    }

    #[test]
    fn checkpoint_rejects_wrong_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = BranchModel::new(BranchConfig::tiny(FeatureSource::Spatial, 48), 1).unwrap();
        // Lie about the architecture in the descriptor.
        let mut config = model.config.clone();
        config.backbone = "resnet50".into();
        config.pretrained = false;
        save_checkpoint(&path, ModelDescriptor::Branch { config }, &mut model, "x").unwrap();
        let Err(err) = load_checkpoint(&path) else { panic!("expected error") };
        assert!(matches!(err, ModelError::Checkpoint(_)), "{err}");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
