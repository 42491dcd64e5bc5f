use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{clip_action, Environment, Step};
use crate::error::{Error, Result};
use crate::rng::ChaCha8Rng;
use crate::trajectory::EnvSpec;

/// Planar double integrator in the box `[-1, 1]^2` with a random goal.
/// The observation is `(x, y, vx, vy, goal_x, goal_y)`; the action is an
/// acceleration command in `[-1, 1]^2`. The reward is 1 for every step that
/// ends within `goal_radius` of the goal and 0 otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointMassConfig {
    pub dt: f64,
    /// Linear velocity damping coefficient.
    pub damping: f64,
    pub goal_radius: f64,
    /// Goals are drawn uniformly from `[-goal_range, goal_range]^2`.
    pub goal_range: f64,
    /// Start positions are drawn uniformly from `[-start_range, start_range]^2`.
    pub start_range: f64,
    pub max_episode_steps: usize,
    pub gamma: f64,
    /// End the episode on the first goal contact instead of accruing reward.
    pub terminate_on_goal: bool,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            damping: 0.5,
            goal_radius: 0.2,
            goal_range: 0.8,
            start_range: 1.0,
            max_episode_steps: 300,
            gamma: 0.95,
            terminate_on_goal: false,
        }
    }
}

/// Dynamics changes for the transfer variant: a mass drawn per episode from
/// `mass_range` and an additive swirl force `swirl * (-y, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsDescriptor {
    pub mass_range: [f64; 2],
    pub swirl: f64,
}

impl Default for DynamicsDescriptor {
    fn default() -> Self {
        Self {
            mass_range: [2.0, 3.0],
            swirl: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMassState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub goal: [f64; 2],
    pub mass: f64,
}

#[derive(Debug, Clone)]
pub struct PointMass {
    config: PointMassConfig,
    dynamics: Option<DynamicsDescriptor>,
    spec: EnvSpec,
    state: PointMassState,
    t: usize,
}

impl PointMass {
    pub fn new(config: PointMassConfig, dynamics: Option<DynamicsDescriptor>) -> Result<Self> {
        if !(config.dt > 0.0 && config.goal_radius > 0.0 && config.damping >= 0.0) {
            return Err(Error::InvalidArgument("pointmass dt, goal_radius and damping".into()));
        }
        if !(0.0..=1.0).contains(&config.goal_range) || !(0.0..=1.0).contains(&config.start_range) {
            return Err(Error::InvalidArgument("pointmass ranges must lie in [0, 1]".into()));
        }
        if let Some(d) = &dynamics {
            if !(d.mass_range[0] > 0.0 && d.mass_range[0] <= d.mass_range[1]) || !d.swirl.is_finite() {
                return Err(Error::InvalidArgument("dynamics mass_range / swirl".into()));
            }
        }
        let env_id = if dynamics.is_some() {
            "pointmass-sparse-perturbed"
        } else {
            "pointmass-sparse"
        };
        let spec = EnvSpec {
            env_id: env_id.into(),
            obs_dim: 6,
            act_dim: 2,
            act_low: vec![-1.0; 2],
            act_high: vec![1.0; 2],
            gamma: config.gamma,
            max_episode_steps: config.max_episode_steps,
        };
        spec.validate()?;
        Ok(Self {
            config,
            dynamics,
            spec,
            state: PointMassState {
                pos: [0.0; 2],
                vel: [0.0; 2],
                goal: [0.0; 2],
                mass: 1.0,
            },
            t: 0,
        })
    }

    pub fn state(&self) -> PointMassState {
        self.state
    }

    pub fn set_state(&mut self, state: PointMassState) {
        self.state = state;
        self.t = 0;
    }

    pub fn in_goal(&self) -> bool {
        let [x, y] = self.state.pos;
        let [gx, gy] = self.state.goal;
        (x - gx).hypot(y - gy) <= self.config.goal_radius
    }

    fn observe(&self) -> Vec<f64> {
        let s = &self.state;
        vec![s.pos[0], s.pos[1], s.vel[0], s.vel[1], s.goal[0], s.goal[1]]
    }
}

impl Environment for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let c = &self.config;
        let uniform = |rng: &mut ChaCha8Rng, r: f64| if r > 0.0 { rng.random_range(-r..r) } else { 0.0 };
        let pos = [uniform(rng, c.start_range), uniform(rng, c.start_range)];
        let goal = [uniform(rng, c.goal_range), uniform(rng, c.goal_range)];
        let mass = match &self.dynamics {
            Some(d) if d.mass_range[0] < d.mass_range[1] => rng.random_range(d.mass_range[0]..d.mass_range[1]),
            Some(d) => d.mass_range[0],
            None => 1.0,
        };
        self.state = PointMassState {
            pos,
            vel: [0.0; 2],
            goal,
            mass,
        };
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        if self.t >= self.spec.max_episode_steps {
            return Err(Error::InvalidArgument("episode finished; reset first".into()));
        }
        let (a, clipped) = clip_action(&self.spec, action)?;
        let c = &self.config;
        let swirl = self.dynamics.as_ref().map_or(0.0, |d| d.swirl);
        let s = &mut self.state;
        let field = [-swirl * s.pos[1], swirl * s.pos[0]];
        for i in 0..2 {
            let acc = (a[i] + field[i]) / s.mass - c.damping * s.vel[i];
            s.vel[i] += acc * c.dt;
            s.pos[i] += s.vel[i] * c.dt;
            if s.pos[i].abs() > 1.0 {
                s.pos[i] = s.pos[i].clamp(-1.0, 1.0);
                s.vel[i] = 0.0;
            }
        }
        self.t += 1;
        let reached = self.in_goal();
        Ok(Step {
            obs: self.observe(),
            reward: if reached { 1.0 } else { 0.0 },
            terminal: reached && self.config.terminate_on_goal,
            truncated: self.t == self.spec.max_episode_steps,
            clipped,
        })
    }

    fn value_range(&self) -> (f64, f64) {
        (0.0, 1.0 / (1.0 - self.config.gamma))
    }
}
