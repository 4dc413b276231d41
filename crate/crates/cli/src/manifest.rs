//! Per-stage `manifest.json`: inputs, outputs, parameters, seed, timings
//! and a few summary metrics.
//!
//! A stage writes its manifest last, so a manifest's presence is what marks
//! the stage as complete for the stages downstream.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub stage: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub params: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, Value>,
    /// Wall-clock time of the whole stage, I/O included.
    pub wall_seconds: f64,
}

impl Manifest {
    pub fn new(stage: &str, cfg: &PipelineConfig) -> Self {
        Manifest {
            stage: stage.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: cfg.seed,
            params: cfg.params(),
            metrics: BTreeMap::new(),
            wall_seconds: 0.0,
        }
    }

    pub fn input(&mut self, cfg: &PipelineConfig, p: &Path) {
        self.inputs.push(relative(cfg, p));
    }

    pub fn output(&mut self, cfg: &PipelineConfig, p: &Path) {
        self.outputs.push(relative(cfg, p));
    }

    pub fn metric(&mut self, key: &str, v: impl Into<Value>) {
        self.metrics.insert(key.to_string(), v.into());
    }

    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

/// Paths inside the workdir are recorded relative to it, so two workdirs
/// produce comparable manifests.
fn relative(cfg: &PipelineConfig, p: &Path) -> String {
    p.strip_prefix(&cfg.workdir).unwrap_or(p).display().to_string()
}

/// Fails with the upstream stage's name unless its manifest exists.
pub fn require(stage: &'static str, dir: &Path) -> CliResult<()> {
    let path = dir.join(MANIFEST_FILE);
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Missing { stage, path })
    }
}
