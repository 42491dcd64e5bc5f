use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::eval::EvalReport;
use crate::algos::StepStats;
use crate::error::{Error, Result};
use crate::replay::RatioAudit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Offline-only learner updates before any environment interaction.
    Pretrain,
    Online,
}

/// One line of `metrics.jsonl`. Learner diagnostics are means over the
/// updates since the previous record. No wall-clock fields are written, so
/// identical runs produce identical logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub phase: Phase,
    pub online_steps: u64,
    pub update_counter: u64,
    pub training_episodes: u64,
    pub eval: EvalReport,
    pub train_return: Option<f64>,
    pub critic_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub q_mean: Option<f64>,
    pub eta: Option<f64>,
    pub estep_kl: Option<f64>,
    pub mstep_kl: Option<f64>,
    pub mean_weight: Option<f64>,
    /// Temperature solves that ended on a bound since the previous record.
    pub eta_boundary_hits: u64,
    pub resets: u64,
    pub online_transitions: usize,
    pub offline_transitions: usize,
    pub ratio: RatioAudit,
}

#[derive(Debug, Default, Clone)]
struct Mean {
    sum: f64,
    n: u64,
}

impl Mean {
    fn add(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
    }

    fn take(&mut self) -> Option<f64> {
        let out = (self.n > 0).then(|| self.sum / self.n as f64);
        *self = Mean::default();
        out
    }
}

/// Running means of learner diagnostics between records.
#[derive(Debug, Default, Clone)]
pub(crate) struct StepAccumulator {
    critic_loss: Mean,
    policy_loss: Mean,
    q_mean: Mean,
    eta: Mean,
    estep_kl: Mean,
    mstep_kl: Mean,
    mean_weight: Mean,
    train_return: Mean,
    boundary_hits: u64,
    resets: u64,
}

impl StepAccumulator {
    pub(crate) fn add(&mut self, s: &StepStats) {
        self.critic_loss.add(s.critic_loss);
        self.policy_loss.add(Some(s.policy_loss));
        self.q_mean.add(s.q_mean);
        self.eta.add(s.eta);
        self.estep_kl.add(s.estep_kl);
        self.mstep_kl.add(s.mstep_kl);
        self.mean_weight.add(s.mean_weight);
        self.boundary_hits += s.eta_boundary.is_some() as u64;
        self.resets += s.reset as u64;
    }

    pub(crate) fn add_episode_return(&mut self, r: f64) {
        self.train_return.add(Some(r));
    }

    /// Fills the learner fields of a record and resets the means.
    pub(crate) fn drain_into(&mut self, r: &mut MetricRecord) {
        r.critic_loss = self.critic_loss.take();
        r.policy_loss = self.policy_loss.take();
        r.q_mean = self.q_mean.take();
        r.eta = self.eta.take();
        r.estep_kl = self.estep_kl.take();
        r.mstep_kl = self.mstep_kl.take();
        r.mean_weight = self.mean_weight.take();
        r.train_return = self.train_return.take();
        r.eta_boundary_hits = std::mem::take(&mut self.boundary_hits);
        r.resets = std::mem::take(&mut self.resets);
    }
}

/// Append-only line-delimited JSON log.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &MetricRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out
            .write_all(b"\n")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Trailing moving average: element `i` is the mean of
/// `values[i + 1 - min(window, i + 1) ..= i]`.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    assert!(window > 0, "window must be positive");
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Learning curve of one run: the mean over the trailing `window` evaluation
/// episodes at each evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub window: usize,
    /// `(online_steps, smoothed return)` per online-phase evaluation.
    pub curve: Vec<(u64, f64)>,
}

impl RunSummary {
    pub fn from_records(records: &[MetricRecord], window: usize) -> Self {
        let mut episodes: Vec<f64> = Vec::new();
        let mut curve = Vec::new();
        for r in records.iter().filter(|r| r.phase == Phase::Online) {
            episodes.extend(&r.eval.returns);
            let tail = &episodes[episodes.len().saturating_sub(window)..];
            if !tail.is_empty() {
                curve.push((r.online_steps, tail.iter().sum::<f64>() / tail.len() as f64));
            }
        }
        Self { window, curve }
    }

    pub fn load(metrics: impl AsRef<Path>, window: usize) -> Result<Self> {
        Ok(Self::from_records(&read_metrics(metrics)?, window))
    }

    pub fn final_return(&self) -> Option<f64> {
        self.curve.last().map(|c| c.1)
    }

    /// First evaluation point whose smoothed return reaches `threshold`.
    pub fn steps_to_reach(&self, threshold: f64) -> Option<u64> {
        self.curve.iter().find(|c| c.1 >= threshold).map(|c| c.0)
    }
}
