use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::view::RegimeSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParentDataset {
    pub path: PathBuf,
    #[serde(default)]
    pub subset: RegimeSpec,
}

/// Lineage record of one experiment: what it consumed and what it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub experiment_id: String,
    pub parent_datasets: Vec<ParentDataset>,
    pub produced_dataset: PathBuf,
    pub config_digest: String,
    pub seed: u64,
    pub created_at: String,
    /// Fully resolved run configuration.
    pub config: serde_json::Value,
    #[serde(default)]
    pub metrics: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub parent_checkpoint: Option<PathBuf>,
}

impl ExperimentManifest {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        super::write_json_atomic(path.as_ref(), self)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Ok(serde_json::from_slice(&raw)?)
    }
}
