use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{clip_action, Environment, Step};
use crate::error::{Error, Result};
use crate::rng::ChaCha8Rng;
use crate::trajectory::EnvSpec;

/// Swing-up pendulum. `theta = 0` is upright; the observation is
/// `(cos theta, sin theta, theta_dot)`. Each step costs
/// `theta^2 + 0.1 theta_dot^2 + 0.001 u^2` with `theta` wrapped to `[-pi, pi)`,
/// so rewards lie in `[-(pi^2 + 0.1 max_speed^2 + 0.001 max_torque^2), 0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumConfig {
    pub dt: f64,
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub max_torque: f64,
    pub max_speed: f64,
    /// Initial angle range.
    pub theta_range: [f64; 2],
    /// Initial angular velocity range.
    pub theta_dot_range: [f64; 2],
    pub max_episode_steps: usize,
    pub gamma: f64,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            max_torque: 2.0,
            max_speed: 8.0,
            theta_range: [-PI, PI],
            theta_dot_range: [-1.0, 1.0],
            max_episode_steps: 200,
            gamma: 0.98,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumState {
    pub theta: f64,
    pub theta_dot: f64,
}

#[derive(Debug, Clone)]
pub struct Pendulum {
    config: PendulumConfig,
    spec: EnvSpec,
    state: PendulumState,
    t: usize,
}

pub(crate) fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

impl Pendulum {
    pub fn new(config: PendulumConfig) -> Result<Self> {
        let [lo, hi] = config.theta_range;
        let [dlo, dhi] = config.theta_dot_range;
        if !(lo <= hi && dlo <= dhi && config.dt > 0.0 && config.max_torque > 0.0 && config.max_speed > 0.0) {
            return Err(Error::InvalidArgument("pendulum configuration ranges".into()));
        }
        let spec = EnvSpec {
            env_id: "pendulum-dense".into(),
            obs_dim: 3,
            act_dim: 1,
            act_low: vec![-config.max_torque],
            act_high: vec![config.max_torque],
            gamma: config.gamma,
            max_episode_steps: config.max_episode_steps,
        };
        spec.validate()?;
        Ok(Self {
            config,
            spec,
            state: PendulumState {
                theta: PI,
                theta_dot: 0.0,
            },
            t: 0,
        })
    }

    pub fn state(&self) -> PendulumState {
        self.state
    }

    /// Places the pendulum in an arbitrary state and restarts the step count.
    pub fn set_state(&mut self, state: PendulumState) {
        self.state = state;
        self.t = 0;
    }

    pub fn config(&self) -> &PendulumConfig {
        &self.config
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.state.theta.cos(), self.state.theta.sin(), self.state.theta_dot]
    }

    /// Per-step cost of a state and torque.
    pub fn cost(theta: f64, theta_dot: f64, torque: f64) -> f64 {
        let th = wrap_angle(theta);
        th * th + 0.1 * theta_dot * theta_dot + 0.001 * torque * torque
    }

    /// Angular acceleration `3g/(2l) sin(theta) + 3/(m l^2) u`.
    pub fn acceleration(&self, theta: f64, torque: f64) -> f64 {
        let c = &self.config;
        3.0 * c.gravity / (2.0 * c.length) * theta.sin() + 3.0 / (c.mass * c.length * c.length) * torque
    }
}

impl Environment for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let [lo, hi] = self.config.theta_range;
        let [dlo, dhi] = self.config.theta_dot_range;
        let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| if lo < hi { rng.random_range(lo..hi) } else { lo };
        self.state = PendulumState {
            theta: draw(rng, lo, hi),
            theta_dot: draw(rng, dlo, dhi),
        };
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        if self.t >= self.spec.max_episode_steps {
            return Err(Error::InvalidArgument("episode finished; reset first".into()));
        }
        let (a, clipped) = clip_action(&self.spec, action)?;
        let u = a[0];
        let PendulumState { theta, theta_dot } = self.state;
        let reward = -Self::cost(theta, theta_dot, u);
        // Semi-implicit Euler: velocity first, then position with the new velocity.
        let max = self.config.max_speed;
        let new_dot = (theta_dot + self.acceleration(theta, u) * self.config.dt).clamp(-max, max);
        self.state = PendulumState {
            theta: theta + new_dot * self.config.dt,
            theta_dot: new_dot,
        };
        self.t += 1;
        Ok(Step {
            obs: self.observe(),
            reward,
            terminal: false,
            truncated: self.t == self.spec.max_episode_steps,
            clipped,
        })
    }

    fn value_range(&self) -> (f64, f64) {
        let c = &self.config;
        let worst = PI * PI + 0.1 * c.max_speed * c.max_speed + 0.001 * c.max_torque * c.max_torque;
        // Covers cost accumulations from the hanging state with margin.
        (-(PI * PI) / (1.0 - c.gamma) * 1.25 - worst, 0.0)
    }
}
