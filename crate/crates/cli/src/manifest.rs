use std::path::{Path, PathBuf};

use lstan_core::metrics::Evaluation;
use lstan_core::model::ModelConfig;
use lstan_core::train::{StopReason, TrainConfig};
use lstan_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = concat!("lstan ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub series: PathBuf,
    pub series_sha256: String,
    pub graph: PathBuf,
    pub graph_sha256: String,
    pub use_weights: bool,
}

impl DatasetRef {
    pub fn new(series: &Path, graph: &Path, use_weights: bool) -> Result<Self> {
        Ok(DatasetRef {
            series: absolute(series),
            series_sha256: file_sha256(series)?,
            graph: absolute(graph),
            graph_sha256: file_sha256(graph)?,
            use_weights,
        })
    }

    /// Fails when either file changed since the manifest was written.
    pub fn verify(&self) -> Result<()> {
        for (path, want) in [(&self.series, &self.series_sha256), (&self.graph, &self.graph_sha256)] {
            let have = file_sha256(path)?;
            if &have != want {
                return Err(Error::Data(format!(
                    "{} changed since the run was recorded (sha256 {have}, manifest has {want})",
                    path.display()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub metrics: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedMetrics {
    pub val: Evaluation,
    pub test: Evaluation,
    pub baseline_test: Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetRef,
    pub outputs: Outputs,
    pub parameter_count: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    pub metrics: RecordedMetrics,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn absolute(path: &Path) -> PathBuf {
    std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf())
}
