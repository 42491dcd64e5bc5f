//! Deterministic policy gradient through a distributional critic.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::critic::{q_mean_from_logits, Support};
use crate::error::{Error, Result};
use crate::net::{Grads, Head, Mlp, Squash};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct D4pgConfig {
    /// Exploration noise standard deviation, relative to the action half-range.
    pub exploration_noise: f64,
}

impl Default for D4pgConfig {
    fn default() -> Self {
        Self {
            exploration_noise: 0.3,
        }
    }
}

/// Concatenates observation and action columns into critic inputs.
pub fn critic_input(obs: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
    let (b, od) = obs.dim();
    let mut x = Array2::zeros((b, od + actions.ncols()));
    x.slice_mut(s![.., ..od]).assign(&obs);
    x.slice_mut(s![.., od..]).assign(&actions);
    x
}

pub struct D4pgOutput {
    /// `-mean_j Q(s_j, pi(s_j))`.
    pub loss: f64,
    pub q_mean: f64,
    pub grads: Grads,
}

/// Gradient of `-mean_j Q(s_j, squash(policy(s_j)))` with respect to the
/// policy parameters, taken through the critic's action input.
pub fn d4pg_policy_loss(
    policy: &Mlp,
    squash: &Squash,
    critic: &Mlp,
    support: &Support,
    states: ArrayView2<f64>,
) -> Result<D4pgOutput> {
    if !matches!(policy.head(), Head::Linear) {
        return Err(Error::InvalidArgument(
            "deterministic policy gradient needs a linear-head policy".into(),
        ));
    }
    let b = states.nrows();
    let od = states.ncols();
    let (raw, policy_cache) = policy.forward_train(states)?;
    let mut actions = raw.clone();
    let mut dadu = raw.clone();
    for j in 0..b {
        let u = raw.row(j).to_vec();
        for (k, (a, d)) in squash.apply(&u).into_iter().zip(squash.derivative(&u)).enumerate() {
            actions[[j, k]] = a;
            dadu[[j, k]] = d;
        }
    }
    let x = critic_input(states, actions.view());
    let (logits, critic_cache) = critic.forward_train(x.view())?;
    let mut upstream = Array2::zeros(logits.raw_dim());
    let mut q_total = 0.0;
    for j in 0..b {
        let (q, g) = q_mean_from_logits(&logits.row(j).to_vec(), support);
        q_total += q;
        for (o, gi) in upstream.row_mut(j).iter_mut().zip(&g) {
            *o = -gi / b as f64;
        }
    }
    let (_, dx) = critic.backward(&critic_cache, upstream.view())?;
    let policy_up = &dx.slice(s![.., od..]) * &dadu;
    let (grads, _) = policy.backward(&policy_cache, policy_up.view())?;
    Ok(D4pgOutput {
        loss: -q_total / b as f64,
        q_mean: q_total / b as f64,
        grads,
    })
}
