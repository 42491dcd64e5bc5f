//! Experiment orchestration: scratch runs, runs replaying stored datasets,
//! finetuning, the two-phase offline-then-online baseline and iterated
//! chains of runs, plus evaluation and metric logging.
//!
//! Every run lives in `<workspace>/experiments/<experiment_id>/`:
//!
//! ```text
//! manifest.json              lineage record (parents, produced data, digest)
//! metrics.jsonl              one JSON record per evaluation point
//! checkpoints/final.ckpt     learner state at the end of the run
//! produced_dataset.rae       every training episode of the run (+ .json index)
//! ```

mod eval;
mod metrics;
mod run;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use eval::{evaluate, evaluate_with, EvalReport};
pub use metrics::{moving_average, read_metrics, MetricRecord, MetricsLog, Phase, RunSummary};
pub use run::{chain, policy_from_manifest, run_experiment, Experiment, UpdateTrace};

use crate::algos::{AlgoKind, LearnerConfig};
use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::replay::MixConfig;
use crate::store::ParentDataset;

/// Replay settings of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    /// Fraction of each batch drawn from the online buffer. Ignored (taken
    /// as 1) when the run has no offline sources.
    pub p_online: f64,
    /// Online transitions required before the first learner step.
    pub min_online_fill: usize,
    pub batch_size: usize,
    /// Online buffer capacity in transitions.
    pub capacity: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        let mix = MixConfig::default();
        Self {
            p_online: mix.p_online,
            min_online_fill: mix.min_online_fill,
            batch_size: mix.batch_size,
            capacity: 1_000_000,
        }
    }
}

impl ReplayConfig {
    pub fn mix(&self) -> MixConfig {
        MixConfig {
            p_online: self.p_online,
            min_online_fill: self.min_online_fill,
            batch_size: self.batch_size,
        }
    }
}

/// Complete description of one run. A scratch run is a config with no
/// offline sources; finetuning sets `checkpoint`; both together give
/// finetuning combined with replay of prior data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Prefix of generated experiment ids.
    pub name: String,
    /// Fixed experiment id; the run fails if it already exists.
    pub experiment_id: Option<String>,
    /// Root directory of all outputs; relative dataset and checkpoint paths
    /// resolve against it.
    pub workspace: PathBuf,
    pub seed: u64,
    pub env: EnvConfig,
    pub learner: LearnerConfig,
    pub replay: ReplayConfig,
    /// Prior datasets (or view descriptors) replayed as offline data.
    pub offline: Vec<ParentDataset>,
    pub total_online_steps: u64,
    pub updates_per_env_step: f64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Trailing number of evaluation episodes averaged in summaries.
    pub smoothing_window: usize,
    /// Checkpoint whose weights initialize the learner (finetuning).
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            experiment_id: None,
            workspace: PathBuf::from("workspace"),
            seed: 0,
            env: EnvConfig::default(),
            learner: LearnerConfig::default(),
            replay: ReplayConfig::default(),
            offline: Vec::new(),
            total_online_steps: 50_000,
            updates_per_env_step: 0.25,
            eval_every: 5_000,
            eval_episodes: 10,
            smoothing_window: 100,
            checkpoint: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.learner.validate()?;
        if !self.offline.is_empty() {
            self.replay.mix().validate()?;
        }
        if self.replay.batch_size == 0 || self.replay.capacity == 0 {
            return Err(Error::InvalidArgument("replay.batch_size and replay.capacity must be positive".into()));
        }
        if !(self.updates_per_env_step >= 0.0 && self.updates_per_env_step.is_finite()) {
            return Err(Error::InvalidArgument("updates_per_env_step must be finite and >= 0".into()));
        }
        if self.eval_every == 0 || self.eval_episodes == 0 || self.smoothing_window == 0 {
            return Err(Error::InvalidArgument(
                "eval_every, eval_episodes and smoothing_window must be positive".into(),
            ));
        }
        if self.learner.algo == AlgoKind::Awac && self.offline.is_empty() {
            return Err(Error::InvalidArgument("awac needs offline sources for its pretraining phase".into()));
        }
        if let Some(id) = &self.experiment_id {
            if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
                return Err(Error::InvalidArgument(format!("experiment id {id:?} is not a plain name")));
            }
        }
        Ok(())
    }

    /// Batch mixing actually used: all-online when there is no offline data.
    pub fn effective_mix(&self) -> MixConfig {
        let mut mix = self.replay.mix();
        if self.offline.is_empty() {
            mix.p_online = 1.0;
        }
        mix
    }

    /// Resolves a path against the workspace unless it is absolute.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.workspace.join(path)
        }
    }

    pub fn experiments_dir(&self) -> PathBuf {
        self.workspace.join("experiments")
    }

    /// SHA-256 of the canonical JSON form (keys sorted) of the config, with
    /// the output location excluded so that relocated runs share a digest.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.workspace = PathBuf::new();
        canonical.experiment_id = None;
        let value = serde_json::to_value(&canonical).expect("run config serializes");
        let bytes = serde_json::to_vec(&value).expect("json value serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
