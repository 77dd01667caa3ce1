//! Bridge to an external flow estimator executed as a subprocess.
//!
//! The bridge writes the two frames as PNGs, invokes
//! `<command> <frame_a.png> <frame_b.png> <out.flo>`, and reads the result
//! back in the Middlebury layout. This is how a neural estimator with
//! published pretrained weights (e.g. a RAFT runner) plugs in without tying
//! this crate to a tensor runtime.

use super::{decode_flo, FlowError, FlowEstimator, FlowField};
use image::RgbImage;
use std::path::PathBuf;
use std::process::Command;

/// Runs an external command for every frame pair.
#[derive(Debug, Clone)]
pub struct ExternalEstimator {
    command: String,
    extra_args: Vec<String>,
    name: String,
    deterministic: bool,
}

impl ExternalEstimator {
    pub fn new(command: impl Into<String>) -> Self {
        let command = command.into();
        Self {
            name: format!("external:{command}"),
            command,
            extra_args: Vec::new(),
            deterministic: false,
        }
    }

    pub fn with_args(mut self, args: Vec<String>) -> Self {
        self.extra_args = args;
        self
    }

    /// Declare the backend deterministic, enabling cache reuse guarantees.
    pub fn assume_deterministic(mut self) -> Self {
        self.deterministic = true;
        self
    }
}

impl FlowEstimator for ExternalEstimator {
    fn name(&self) -> &str {
        &self.name
    }

    fn deterministic(&self) -> bool {
        self.deterministic
    }

    fn estimate(&self, a: &RgbImage, b: &RgbImage) -> Result<FlowField, FlowError> {
        let dir = tempfile::tempdir()?;
        let pa: PathBuf = dir.path().join("a.png");
        let pb: PathBuf = dir.path().join("b.png");
        let out: PathBuf = dir.path().join("out.flo");
        a.save(&pa)?;
        b.save(&pb)?;
        let status = Command::new(&self.command)
            .args(&self.extra_args)
            .arg(&pa)
            .arg(&pb)
            .arg(&out)
            .status()
            .map_err(|e| FlowError::BackendUnavailable(format!("{}: {e}", self.command)))?;
        if !status.success() {
            return Err(FlowError::BackendUnavailable(format!(
                "{} exited with {status}",
                self.command
            )));
        }
        let bytes = std::fs::read(&out)
            .map_err(|e| FlowError::BackendUnavailable(format!("{}: no output: {e}", self.command)))?;
        let field = decode_flo(&bytes)?;
        if (field.width(), field.height()) != a.dimensions() {
            return Err(FlowError::DimensionMismatch {
                a: a.dimensions(),
                b: (field.width(), field.height()),
            });
        }
        Ok(field)
    }
}
