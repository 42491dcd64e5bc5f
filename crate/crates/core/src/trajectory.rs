//! Transitions, episodes and N-step windows.
//!
//! Observations and actions are stored as `f32`; returns and bootstrapped
//! targets are accumulated in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Static description of an environment's interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub env_id: String,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub act_low: Vec<f64>,
    pub act_high: Vec<f64>,
    pub gamma: f64,
    pub max_episode_steps: usize,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.act_dim == 0 || self.max_episode_steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "env spec {}: dimensions and max_episode_steps must be positive",
                self.env_id
            )));
        }
        if self.act_low.len() != self.act_dim || self.act_high.len() != self.act_dim {
            return Err(Error::shape(
                format!("{} action bounds", self.act_dim),
                format!("{}/{}", self.act_low.len(), self.act_high.len()),
            ));
        }
        if let Some(i) = (0..self.act_dim).find(|&i| !(self.act_low[i] < self.act_high[i])) {
            return Err(Error::InvalidArgument(format!(
                "act_low[{i}] must be below act_high[{i}]"
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!(
                "gamma {} outside [0, 1)",
                self.gamma
            )));
        }
        Ok(())
    }

    /// True when observations and actions have the same shapes in both specs.
    pub fn dims_compatible(&self, other: &EnvSpec) -> bool {
        self.obs_dim == other.obs_dim && self.act_dim == other.act_dim
    }

    pub fn contains_action(&self, action: &[f64]) -> bool {
        action.len() == self.act_dim
            && action
                .iter()
                .zip(self.act_low.iter().zip(&self.act_high))
                .all(|(a, (lo, hi))| *a >= *lo && *a <= *hi)
    }
}

/// A single owned step of experience.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f32>,
    pub action: Vec<f32>,
    pub reward: f32,
    pub next_obs: Vec<f32>,
    /// `next_obs` is absorbing: continuation value is zero.
    pub terminal: bool,
    /// Cut by the time limit: the value still bootstraps through `next_obs`.
    pub truncated: bool,
}

/// Borrowed view of one step inside an [`Episode`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionRef<'a> {
    pub obs: &'a [f32],
    pub action: &'a [f32],
    pub reward: f32,
    pub next_obs: &'a [f32],
    pub terminal: bool,
    pub truncated: bool,
}

impl TransitionRef<'_> {
    pub fn to_owned(&self) -> Transition {
        Transition {
            obs: self.obs.to_vec(),
            action: self.action.to_vec(),
            reward: self.reward,
            next_obs: self.next_obs.to_vec(),
            terminal: self.terminal,
            truncated: self.truncated,
        }
    }
}

/// How an episode ended. Only the final transition carries this flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeEnd {
    Terminal,
    Truncated,
    /// Neither flag set, e.g. a rollout stopped externally.
    Open,
}

impl EpisodeEnd {
    pub fn from_flags(flags: u8) -> Result<Self> {
        match flags {
            0 => Ok(EpisodeEnd::Open),
            1 => Ok(EpisodeEnd::Terminal),
            2 => Ok(EpisodeEnd::Truncated),
            _ => Err(Error::InvalidArgument(format!(
                "episode flags {flags:#04b}: terminal and truncated are exclusive"
            ))),
        }
    }

    pub fn flags(self) -> u8 {
        match self {
            EpisodeEnd::Open => 0,
            EpisodeEnd::Terminal => 1,
            EpisodeEnd::Truncated => 2,
        }
    }
}

/// One trajectory stored as `T + 1` observations, `T` actions and `T` rewards,
/// so consecutive transitions chain by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    obs_dim: usize,
    act_dim: usize,
    observations: Vec<f32>,
    actions: Vec<f32>,
    rewards: Vec<f32>,
    end: EpisodeEnd,
    pub source_experiment: String,
    pub source_seed: u64,
    pub collection_index: u64,
}

impl Episode {
    /// Assemble an episode from flat buffers, checking their shapes.
    pub fn from_parts(
        obs_dim: usize,
        act_dim: usize,
        observations: Vec<f32>,
        actions: Vec<f32>,
        rewards: Vec<f32>,
        end: EpisodeEnd,
    ) -> Result<Self> {
        let steps = rewards.len();
        if steps == 0 {
            return Err(Error::InvalidArgument("episode has no transitions".into()));
        }
        if observations.len() != (steps + 1) * obs_dim {
            return Err(Error::shape(
                format!("{} observation values", (steps + 1) * obs_dim),
                observations.len(),
            ));
        }
        if actions.len() != steps * act_dim {
            return Err(Error::shape(
                format!("{} action values", steps * act_dim),
                actions.len(),
            ));
        }
        Ok(Self {
            obs_dim,
            act_dim,
            observations,
            actions,
            rewards,
            end,
            source_experiment: String::new(),
            source_seed: 0,
            collection_index: 0,
        })
    }

    /// Build from owned transitions, enforcing the chaining and end-flag rules.
    pub fn from_transitions(transitions: &[Transition]) -> Result<Self> {
        let first = transitions
            .first()
            .ok_or_else(|| Error::InvalidArgument("episode has no transitions".into()))?;
        let obs_dim = first.obs.len();
        let act_dim = first.action.len();
        let mut builder = EpisodeBuilder::new(obs_dim, act_dim, &first.obs);
        let last = transitions.len() - 1;
        for (k, tr) in transitions.iter().enumerate() {
            if tr.terminal && tr.truncated {
                return Err(Error::InvalidArgument(format!(
                    "transition {k} is both terminal and truncated"
                )));
            }
            if k < last && (tr.terminal || tr.truncated) {
                return Err(Error::InvalidArgument(format!(
                    "transition {k} ends the episode but is not last"
                )));
            }
            if k > 0 && transitions[k - 1].next_obs != tr.obs {
                return Err(Error::InvalidArgument(format!(
                    "transition {k} does not chain from its predecessor"
                )));
            }
            builder.push(&tr.action, tr.reward, &tr.next_obs)?;
        }
        let end = if transitions[last].terminal {
            EpisodeEnd::Terminal
        } else if transitions[last].truncated {
            EpisodeEnd::Truncated
        } else {
            EpisodeEnd::Open
        };
        builder.finish(end)
    }

    pub fn with_provenance(mut self, experiment: impl Into<String>, seed: u64) -> Self {
        self.source_experiment = experiment.into();
        self.source_seed = seed;
        self
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn end(&self) -> EpisodeEnd {
        self.end
    }

    pub fn observations(&self) -> &[f32] {
        &self.observations
    }

    pub fn actions(&self) -> &[f32] {
        &self.actions
    }

    pub fn rewards(&self) -> &[f32] {
        &self.rewards
    }

    /// Observation `k` for `k` in `0..=len()`.
    pub fn obs(&self, k: usize) -> &[f32] {
        &self.observations[k * self.obs_dim..(k + 1) * self.obs_dim]
    }

    pub fn action(&self, k: usize) -> &[f32] {
        &self.actions[k * self.act_dim..(k + 1) * self.act_dim]
    }

    pub fn transition(&self, k: usize) -> TransitionRef<'_> {
        let last = k + 1 == self.len();
        TransitionRef {
            obs: self.obs(k),
            action: self.action(k),
            reward: self.rewards[k],
            next_obs: self.obs(k + 1),
            terminal: last && self.end == EpisodeEnd::Terminal,
            truncated: last && self.end == EpisodeEnd::Truncated,
        }
    }

    pub fn transitions(&self) -> impl Iterator<Item = TransitionRef<'_>> + '_ {
        (0..self.len()).map(move |k| self.transition(k))
    }

    /// Sum of rewards, accumulated in `f64` in step order.
    pub fn undiscounted_return(&self) -> f64 {
        self.rewards.iter().map(|&r| r as f64).sum()
    }
}

/// Incremental episode construction used by environment rollouts.
#[derive(Debug, Clone)]
pub struct EpisodeBuilder {
    obs_dim: usize,
    act_dim: usize,
    observations: Vec<f32>,
    actions: Vec<f32>,
    rewards: Vec<f32>,
}

impl EpisodeBuilder {
    pub fn new(obs_dim: usize, act_dim: usize, initial_obs: &[f32]) -> Self {
        assert_eq!(initial_obs.len(), obs_dim, "initial observation size");
        Self {
            obs_dim,
            act_dim,
            observations: initial_obs.to_vec(),
            actions: Vec::new(),
            rewards: Vec::new(),
        }
    }

    pub fn push(&mut self, action: &[f32], reward: f32, next_obs: &[f32]) -> Result<()> {
        if action.len() != self.act_dim {
            return Err(Error::shape(self.act_dim, action.len()));
        }
        if next_obs.len() != self.obs_dim {
            return Err(Error::shape(self.obs_dim, next_obs.len()));
        }
        self.actions.extend_from_slice(action);
        self.rewards.push(reward);
        self.observations.extend_from_slice(next_obs);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn finish(self, end: EpisodeEnd) -> Result<Episode> {
        Episode::from_parts(
            self.obs_dim,
            self.act_dim,
            self.observations,
            self.actions,
            self.rewards,
            end,
        )
    }
}

/// Input of the N-step distributional operator for one time index.
#[derive(Debug, Clone, PartialEq)]
pub struct NStepSample {
    pub obs: Vec<f32>,
    pub action: Vec<f32>,
    pub n_step_reward: f64,
    pub bootstrap_obs: Vec<f32>,
    /// `gamma^steps_used`, or zero when the window reached a terminal.
    pub bootstrap_discount: f64,
    pub steps_used: usize,
}

/// `sum_t gamma^t * rewards[t]`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for &r in rewards {
        total += discount * r;
        discount *= gamma;
    }
    total
}

/// The N-step window starting at step `t`, truncated at the episode end.
pub fn nstep_sample_at(episode: &Episode, t: usize, n: usize, gamma: f64) -> NStepSample {
    debug_assert!(n >= 1 && t < episode.len());
    let steps = n.min(episode.len() - t);
    let mut n_step_reward = 0.0;
    let mut discount = 1.0;
    for k in 0..steps {
        n_step_reward += discount * episode.rewards[t + k] as f64;
        discount *= gamma;
    }
    let hit_terminal = t + steps == episode.len() && episode.end == EpisodeEnd::Terminal;
    NStepSample {
        obs: episode.obs(t).to_vec(),
        action: episode.action(t).to_vec(),
        n_step_reward,
        bootstrap_obs: episode.obs(t + steps).to_vec(),
        bootstrap_discount: if hit_terminal { 0.0 } else { discount },
        steps_used: steps,
    }
}

/// One N-step sample per time index of `episode`.
pub fn make_nstep_samples(episode: &Episode, n: usize, gamma: f64) -> Result<Vec<NStepSample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("N-step horizon must be >= 1".into()));
    }
    if episode.is_empty() {
        return Err(Error::InvalidArgument("episode has no transitions".into()));
    }
    Ok((0..episode.len())
        .map(|t| nstep_sample_at(episode, t, n, gamma))
        .collect())
}
