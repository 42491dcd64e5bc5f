//! Output heads: squashed diagonal Gaussians and categorical logits.

use std::f64::consts::{LN_2, PI};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
// Squashed actions are pulled this far inside the bounds before inversion.
const EDGE: f64 = 1e-6;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Bounded odd sigmoidal map `a = low + (high - low) * (tanh(u) + 1) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Squash {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl Squash {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Self {
        assert_eq!(low.len(), high.len());
        Self { low, high }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(u, (lo, hi))| lo + (hi - lo) * 0.5 * (u.tanh() + 1.0))
            .collect()
    }

    /// `d a / d u` per dimension.
    pub fn derivative(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(u, (lo, hi))| {
                let t = u.tanh();
                (hi - lo) * 0.5 * (1.0 - t * t)
            })
            .collect()
    }

    /// Pre-squash value of an in-bounds action.
    pub fn invert(&self, a: &[f64]) -> Result<Vec<f64>> {
        if a.len() != self.dim() {
            return Err(Error::shape(self.dim(), a.len()));
        }
        a.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(a, (lo, hi))| {
                let y = 2.0 * (a - lo) / (hi - lo) - 1.0;
                if !y.is_finite() || y.abs() > 1.0 + EDGE {
                    return Err(Error::OutOfBounds(format!("{a} not in [{lo}, {hi}]")));
                }
                Ok(y.clamp(-1.0 + EDGE, 1.0 - EDGE).atanh())
            })
            .collect()
    }

    /// `sum_i log |d a_i / d u_i|`.
    pub fn log_det_jacobian(&self, u: &[f64]) -> f64 {
        u.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(u, (lo, hi))| {
                // log(1 - tanh(u)^2) = 2 (ln 2 - |u| - ln(1 + e^{-2|u|}))
                let a = u.abs();
                ((hi - lo) * 0.5).ln() + 2.0 * (LN_2 - a - (-2.0 * a).exp().ln_1p())
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub act_dim: usize,
    /// Floor added to the softplus scale.
    pub min_scale: f64,
    pub squash: Option<Squash>,
}

/// Per-dimension Gaussian over the pre-squash variable.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl GaussianHead {
    pub fn params(&self, raw: &[f64]) -> GaussianParams {
        debug_assert_eq!(raw.len(), 2 * self.act_dim);
        let (m, s) = raw.split_at(self.act_dim);
        GaussianParams {
            mean: m.to_vec(),
            scale: s.iter().map(|&v| softplus(v) + self.min_scale).collect(),
        }
    }

    /// The deterministic action: the squashed mean.
    pub fn mode_action(&self, params: &GaussianParams) -> Vec<f64> {
        match &self.squash {
            Some(sq) => sq.apply(&params.mean),
            None => params.mean.clone(),
        }
    }

    /// Draws `(u, action)`.
    pub fn sample(&self, params: &GaussianParams, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
        let u: Vec<f64> = params
            .mean
            .iter()
            .zip(&params.scale)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let a = match &self.squash {
            Some(sq) => sq.apply(&u),
            None => u.clone(),
        };
        (u, a)
    }

    pub fn to_pre_squash(&self, action: &[f64]) -> Result<Vec<f64>> {
        match &self.squash {
            Some(sq) => sq.invert(action),
            None => Ok(action.to_vec()),
        }
    }

    /// Log density in pre-squash space together with its gradient with respect
    /// to the raw head outputs `[mean.., scale_logits..]`.
    pub fn log_prob_u_with_grad(&self, raw: &[f64], u: &[f64]) -> (f64, Vec<f64>) {
        let a = self.act_dim;
        let mut grad = vec![0.0; 2 * a];
        let mut lp = 0.0;
        for i in 0..a {
            let s = softplus(raw[a + i]) + self.min_scale;
            let z = (u[i] - raw[i]) / s;
            lp += -0.5 * z * z - s.ln() - LOG_SQRT_2PI;
            grad[i] = z / s;
            grad[a + i] = (z * z / s - 1.0 / s) * sigmoid(raw[a + i]);
        }
        (lp, grad)
    }
}

fn gaussian_u_log_prob(params: &GaussianParams, u: &[f64]) -> f64 {
    u.iter()
        .zip(params.mean.iter().zip(&params.scale))
        .map(|(u, (m, s))| {
            let z = (u - m) / s;
            -0.5 * z * z - s.ln() - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

/// Log density of an action under a (optionally squashed) diagonal Gaussian,
/// including the change-of-variables correction.
pub fn gaussian_log_prob(params: &GaussianParams, action: &[f64], squash: Option<&Squash>) -> Result<f64> {
    if action.len() != params.mean.len() {
        return Err(Error::shape(params.mean.len(), action.len()));
    }
    match squash {
        None => Ok(gaussian_u_log_prob(params, action)),
        Some(sq) => {
            let u = sq.invert(action)?;
            Ok(gaussian_u_log_prob(params, &u) - sq.log_det_jacobian(&u))
        }
    }
}

/// Gradient of [`gaussian_log_prob`] with respect to the raw head outputs.
pub fn gaussian_log_prob_grad(head: &GaussianHead, raw: &[f64], action: &[f64]) -> Result<(f64, Vec<f64>)> {
    let u = head.to_pre_squash(action)?;
    let (lp, grad) = head.log_prob_u_with_grad(raw, &u);
    let correction = head.squash.as_ref().map_or(0.0, |sq| sq.log_det_jacobian(&u));
    Ok((lp - correction, grad))
}

/// `KL(old || new)` between diagonal Gaussians (invariant to the squash) and
/// its gradient with respect to the raw outputs of `new`.
pub fn gaussian_kl(head: &GaussianHead, old: &GaussianParams, new_raw: &[f64]) -> (f64, Vec<f64>) {
    let a = head.act_dim;
    let mut grad = vec![0.0; 2 * a];
    let mut kl = 0.0;
    for i in 0..a {
        let mn = new_raw[i];
        let sn = softplus(new_raw[a + i]) + head.min_scale;
        let (mo, so) = (old.mean[i], old.scale[i]);
        let num = so * so + (mo - mn) * (mo - mn);
        kl += (sn / so).ln() + num / (2.0 * sn * sn) - 0.5;
        grad[i] = (mn - mo) / (sn * sn);
        grad[a + i] = (1.0 / sn - num / (sn * sn * sn)) * sigmoid(new_raw[a + i]);
    }
    (kl, grad)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
