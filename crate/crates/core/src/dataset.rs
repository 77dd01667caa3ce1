//! Manifest-driven catalog of real and generated videos, split assignment,
//! and the frame-sampling policy.
//!
//! A manifest is a UTF-8 CSV with header
//! `id,path,label,gen_type,generator,container,width,height,split`
//! (one row per video; `split` may be empty until splits are made). A JSON
//! array of objects with identical field names is accepted interchangeably.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse error: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("record '{id}': {msg}")]
    Validation { id: String, msg: String },
    #[error("duplicate video id '{0}'")]
    DuplicateId(String),
    #[error("insufficient {label} records: need {needed} for train+val, have {available}")]
    InsufficientRecords { label: Label, needed: usize, available: usize },
    #[error("cannot sample frames: video has {total} frame(s), need at least 2")]
    TooFewFrames { total: usize },
    #[error("invalid sampling policy: frames_per_video must be >= 2, got {0}")]
    BadPolicy(usize),
    #[error("invalid split ratio: {0}")]
    BadRatio(f64),
}

/// Ground-truth class of a video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Generated,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Real => write!(f, "real"),
            Label::Generated => write!(f, "generated"),
        }
    }
}

/// How a generated video was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GenType {
    T2V,
    I2V,
    #[serde(rename = "none")]
    None,
}

/// Container format of the source file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Container {
    #[serde(rename = "MP4")]
    Mp4,
    #[serde(rename = "GIF")]
    Gif,
    #[serde(rename = "other")]
    Other,
}

/// Dataset partition a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One labeled video in the catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub path: PathBuf,
    pub label: Label,
    pub gen_type: GenType,
    pub generator: String,
    pub container: Container,
    pub width: u32,
    pub height: u32,
    pub split: Option<Split>,
}

impl VideoRecord {
    /// Subset key used by reports: generator plus generation type.
    pub fn subset(&self) -> String {
        match self.gen_type {
            GenType::None => self.generator.clone(),
            t => format!("{}/{:?}", self.generator, t),
        }
    }
}

/// Non-fatal observations made while loading a manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ManifestWarning {
    MissingFile { id: String, path: PathBuf },
}

impl fmt::Display for ManifestWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ManifestWarning::MissingFile { id, path } => {
                write!(f, "record '{id}': file not found: {}", path.display())
            }
        }
    }
}

/// Frame sampling: how many frames per video and how they are picked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub frames_per_video: usize,
    pub strategy: SamplingStrategy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    /// The first `frames_per_video` frames.
    Prefix,
    /// Evenly spaced indices including frame 0.
    Uniform,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self { frames_per_video: 95, strategy: SamplingStrategy::Prefix }
    }
}

impl SamplingPolicy {
    pub fn new(frames_per_video: usize, strategy: SamplingStrategy) -> Result<Self, DatasetError> {
        if frames_per_video < 2 {
            return Err(DatasetError::BadPolicy(frames_per_video));
        }
        Ok(Self { frames_per_video, strategy })
    }
}

/// Wire form shared by the CSV and JSON manifest flavors.
#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    id: String,
    path: String,
    label: String,
    gen_type: String,
    generator: String,
    container: String,
    width: u32,
    height: u32,
    #[serde(default)]
    split: String,
}

fn parse_record(raw: RawRecord, base_dir: &Path) -> Result<VideoRecord, DatasetError> {
    let id = raw.id.clone();
    let fail = |msg: String| DatasetError::Validation { id: id.clone(), msg };
    let label = match raw.label.as_str() {
        "real" => Label::Real,
        "generated" => Label::Generated,
        other => return Err(fail(format!("unknown label '{other}'"))),
    };
    let gen_type = match raw.gen_type.as_str() {
        "T2V" => GenType::T2V,
        "I2V" => GenType::I2V,
        "none" => GenType::None,
        other => return Err(fail(format!("unknown gen_type '{other}'"))),
    };
    let container = match raw.container.to_ascii_uppercase().as_str() {
        "MP4" => Container::Mp4,
        "GIF" => Container::Gif,
        "OTHER" => Container::Other,
        other => return Err(fail(format!("unknown container '{other}'"))),
    };
    let split = match raw.split.as_str() {
        "" => None,
        "train" => Some(Split::Train),
        "val" => Some(Split::Val),
        "test" => Some(Split::Test),
        other => return Err(fail(format!("unknown split '{other}'"))),
    };
    if label == Label::Real && (raw.generator != "none" || gen_type != GenType::None) {
        return Err(fail(format!(
            "real videos must have generator 'none' and gen_type 'none', got '{}'/'{}'",
            raw.generator, raw.gen_type
        )));
    }
    if label == Label::Generated && raw.generator == "none" {
        return Err(fail("generated videos must name their generator".into()));
    }
    if raw.width == 0 || raw.height == 0 {
        return Err(fail(format!("invalid dimensions {}x{}", raw.width, raw.height)));
    }
    let path = {
        let p = PathBuf::from(&raw.path);
        if p.is_absolute() {
            p
        } else {
            base_dir.join(p)
        }
    };
    Ok(VideoRecord {
        id: raw.id,
        path,
        label,
        gen_type,
        generator: raw.generator,
        container,
        width: raw.width,
        height: raw.height,
        split,
    })
}

fn to_raw(record: &VideoRecord) -> RawRecord {
    RawRecord {
        id: record.id.clone(),
        path: record.path.to_string_lossy().into_owned(),
        label: match record.label {
            Label::Real => "real".into(),
            Label::Generated => "generated".into(),
        },
        gen_type: match record.gen_type {
            GenType::T2V => "T2V".into(),
            GenType::I2V => "I2V".into(),
            GenType::None => "none".into(),
        },
        generator: record.generator.clone(),
        container: match record.container {
            Container::Mp4 => "MP4".into(),
            Container::Gif => "GIF".into(),
            Container::Other => "other".into(),
        },
        width: record.width,
        height: record.height,
        split: match record.split {
            None => "".into(),
            Some(Split::Train) => "train".into(),
            Some(Split::Val) => "val".into(),
            Some(Split::Test) => "test".into(),
        },
    }
}

/// Loads a manifest (CSV, or JSON when the extension is `.json`), validating
/// every record. Missing files are reported as warnings, not errors.
pub fn load_manifest(path: &Path) -> Result<(Vec<VideoRecord>, Vec<ManifestWarning>), DatasetError> {
    let base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let raws: Vec<RawRecord> = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?
    } else {
        let mut reader = csv::Reader::from_path(path)?;
        reader.deserialize().collect::<Result<_, _>>()?
    };
    let mut records = Vec::with_capacity(raws.len());
    let mut warnings = Vec::new();
    let mut seen = BTreeSet::new();
    for raw in raws {
        let record = parse_record(raw, &base_dir)?;
        if !seen.insert(record.id.clone()) {
            return Err(DatasetError::DuplicateId(record.id));
        }
        if !record.path.exists() {
            warnings.push(ManifestWarning::MissingFile { id: record.id.clone(), path: record.path.clone() });
        }
        records.push(record);
    }
    Ok((records, warnings))
}

/// Writes the manifest back out as CSV with the canonical column order.
pub fn save_manifest(records: &[VideoRecord], path: &Path) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut writer = csv::Writer::from_path(path)?;
    for record in records {
        writer.serialize(to_raw(record))?;
    }
    writer.flush()?;
    Ok(())
}

/// Assigns train/val/test splits per class: `train_n` train records and
/// `train_n / ratio` (rounded) val records per class, the remainder test.
///
/// Deterministic for a fixed seed: records are ordered by id, then shuffled
/// with a seeded RNG before slicing.
pub fn make_splits(
    records: &mut [VideoRecord],
    train_n: usize,
    ratio: f64,
    seed: u64,
) -> Result<(), DatasetError> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(DatasetError::BadRatio(ratio));
    }
    let val_n = (train_n as f64 / ratio).round() as usize;
    for label in [Label::Real, Label::Generated] {
        let mut idx: Vec<usize> =
            (0..records.len()).filter(|&i| records[i].label == label).collect();
        idx.sort_by(|&a, &b| records[a].id.cmp(&records[b].id));
        if idx.len() < train_n + val_n {
            return Err(DatasetError::InsufficientRecords {
                label,
                needed: train_n + val_n,
                available: idx.len(),
            });
        }
        let mut rng = crate::util::seeded_rng(seed, &["splits", &format!("{label}")]);
        idx.shuffle(&mut rng);
        for (k, &i) in idx.iter().enumerate() {
            records[i].split = Some(if k < train_n {
                Split::Train
            } else if k < train_n + val_n {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    Ok(())
}

/// Picks the frame indices to decode for a video with `total_frames` frames.
///
/// Returns `min(frames_per_video, total_frames)` strictly increasing indices.
/// `Prefix` returns `0..k`; `Uniform` returns `floor(i*(total-1)/(k-1))`.
pub fn sample_frame_indices(total_frames: usize, policy: &SamplingPolicy) -> Result<Vec<usize>, DatasetError> {
    if total_frames < 2 {
        return Err(DatasetError::TooFewFrames { total: total_frames });
    }
    if policy.frames_per_video < 2 {
        return Err(DatasetError::BadPolicy(policy.frames_per_video));
    }
    let k = policy.frames_per_video.min(total_frames);
    Ok(match policy.strategy {
        SamplingStrategy::Prefix => (0..k).collect(),
        SamplingStrategy::Uniform => {
            (0..k).map(|i| i * (total_frames - 1) / (k - 1)).collect()
        }
    })
}
