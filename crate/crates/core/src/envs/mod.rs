//! Built-in continuous-control environments.
//!
//! * `pendulum-dense`: torque-limited swing-up with a dense quadratic cost.
//! * `pointmass-sparse`: 2-D double integrator rewarded only inside a goal disc.
//! * `pointmass-sparse-perturbed`: the same task under changed dynamics
//!   (per-episode random mass and/or a swirl force field).
//!
//! Environments are deterministic given the RNG passed to `reset` and the
//! action sequence: `step` draws no randomness.

mod pendulum;
mod pointmass;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use pendulum::{Pendulum, PendulumConfig, PendulumState};
pub use pointmass::{DynamicsDescriptor, PointMass, PointMassConfig, PointMassState};

use crate::error::{Error, Result};
use crate::rng::ChaCha8Rng;
use crate::trajectory::EnvSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvId {
    #[serde(rename = "pendulum-dense")]
    PendulumDense,
    #[serde(rename = "pointmass-sparse")]
    PointmassSparse,
    #[serde(rename = "pointmass-sparse-perturbed")]
    PointmassSparsePerturbed,
}

impl EnvId {
    pub const ALL: [EnvId; 3] = [
        EnvId::PendulumDense,
        EnvId::PointmassSparse,
        EnvId::PointmassSparsePerturbed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::PendulumDense => "pendulum-dense",
            EnvId::PointmassSparse => "pointmass-sparse",
            EnvId::PointmassSparsePerturbed => "pointmass-sparse-perturbed",
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EnvId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown environment {s:?}")))
    }
}

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    pub truncated: bool,
    /// The action was outside the bounds and has been clipped.
    pub clipped: bool,
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;
    /// Draws an initial state and returns its observation.
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<Step>;
    /// Critic support bounds covering this task's discounted returns.
    fn value_range(&self) -> (f64, f64);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub id: EnvId,
    pub pendulum: PendulumConfig,
    pub pointmass: PointMassConfig,
    /// Changed dynamics, applied by the perturbed point-mass variant only.
    pub dynamics: DynamicsDescriptor,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            id: EnvId::PointmassSparse,
            pendulum: PendulumConfig::default(),
            pointmass: PointMassConfig::default(),
            dynamics: DynamicsDescriptor::default(),
        }
    }
}

pub fn make_env(config: &EnvConfig) -> Result<Box<dyn Environment>> {
    Ok(match config.id {
        EnvId::PendulumDense => Box::new(Pendulum::new(config.pendulum.clone())?),
        EnvId::PointmassSparse => Box::new(PointMass::new(config.pointmass.clone(), None)?),
        EnvId::PointmassSparsePerturbed => Box::new(PointMass::new(
            config.pointmass.clone(),
            Some(config.dynamics.clone()),
        )?),
    })
}

/// Clamps an action into the environment's action bounds; errors on non-finite entries.
pub(crate) fn clip_action(spec: &EnvSpec, action: &[f64]) -> Result<(Vec<f64>, bool)> {
    if action.len() != spec.act_dim {
        return Err(Error::shape(spec.act_dim, action.len()));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite(format!("action {action:?}")));
    }
    let mut clipped = false;
    let out = action
        .iter()
        .zip(spec.act_low.iter().zip(&spec.act_high))
        .map(|(a, (lo, hi))| {
            let c = a.clamp(*lo, *hi);
            clipped |= c != *a;
            c
        })
        .collect();
    Ok((out, clipped))
}
