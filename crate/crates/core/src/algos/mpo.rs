//! Temperature dual and weighted maximum-likelihood steps of MPO.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{gaussian_kl, GaussianHead, GaussianParams, Grads, Mlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpoConfig {
    /// Actions sampled per state for the non-parametric improvement (K).
    pub action_samples: usize,
    /// KL budget of the improved distribution against the sampling policy.
    pub epsilon: f64,
    pub eta_init: f64,
    /// Coefficient of the `KL(old || new)` penalty in the fitting step.
    pub mstep_kl_weight: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub eta_tolerance: f64,
}

impl Default for MpoConfig {
    fn default() -> Self {
        Self {
            action_samples: 20,
            epsilon: 0.1,
            eta_init: 1.0,
            mstep_kl_weight: 1.0,
            eta_min: 1e-6,
            eta_max: 1e3,
            eta_tolerance: 1e-6,
        }
    }
}

impl MpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.action_samples < 2 {
            return Err(Error::InvalidArgument("mpo.action_samples must be >= 2".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("mpo.epsilon must be positive".into()));
        }
        if !(self.eta_min >= 1e-6 && self.eta_min < self.eta_max && self.eta_max <= 1e3) {
            return Err(Error::InvalidArgument(format!(
                "eta bounds [{}, {}] must satisfy 1e-6 <= min < max <= 1e3",
                self.eta_min, self.eta_max
            )));
        }
        if !(self.eta_init >= self.eta_min && self.eta_init <= self.eta_max) {
            return Err(Error::InvalidArgument("mpo.eta_init outside eta bounds".into()));
        }
        if !(self.mstep_kl_weight >= 0.0) || !(self.eta_tolerance > 0.0) {
            return Err(Error::InvalidArgument("mpo.mstep_kl_weight and eta_tolerance".into()));
        }
        Ok(())
    }
}

/// Why the temperature solver stopped at a bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaBoundary {
    /// Values are constant across actions in every state: any temperature
    /// satisfies the constraint, the largest is returned.
    Degenerate,
    /// The constraint is slack even at the smallest temperature.
    Lower,
    /// The constraint is violated even at the largest temperature.
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtaSolution {
    pub eta: f64,
    pub boundary: Option<EtaBoundary>,
    /// Mean over states of `KL(weights || uniform)` at `eta`.
    pub kl: f64,
}

fn check_q(q: &ArrayView2<f64>) -> Result<()> {
    if q.ncols() < 2 {
        return Err(Error::InvalidArgument(format!("need >= 2 actions per state, got {}", q.ncols())));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("action values".into()));
    }
    Ok(())
}

/// Row-wise softmax of `q / eta`.
pub fn mpo_estep_weights(q: ArrayView2<f64>, eta: f64) -> Result<Array2<f64>> {
    check_q(&q)?;
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {eta}")));
    }
    let mut w = q.to_owned();
    for mut row in w.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| ((v - max) / eta).exp());
        let total = row.sum();
        row /= total;
    }
    Ok(w)
}

/// Per-state `log mean_k exp(q_k / eta)` and `sum_k w_k q_k / eta`.
fn row_terms(q: &ArrayView2<f64>, eta: f64) -> (f64, f64) {
    let k = q.ncols() as f64;
    let (mut lme, mut wq) = (0.0, 0.0);
    for row in q.axis_iter(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut weighted = 0.0;
        for &v in row {
            let e = ((v - max) / eta).exp();
            total += e;
            weighted += e * (v - max) / eta;
        }
        lme += max / eta + (total / k).ln();
        wq += max / eta + weighted / total;
    }
    let n = q.nrows() as f64;
    (lme / n, wq / n)
}

/// The convex dual `g(eta) = eta * epsilon + eta * mean_s log mean_a exp(q / eta)`.
pub fn mpo_dual(q: ArrayView2<f64>, eta: f64, epsilon: f64) -> f64 {
    let (lme, _) = row_terms(&q, eta);
    eta * epsilon + eta * lme
}

/// `g'(eta) = epsilon - mean_s KL(softmax(q / eta) || uniform)`.
pub fn mpo_dual_derivative(q: ArrayView2<f64>, eta: f64, epsilon: f64) -> f64 {
    epsilon - mean_kl_to_uniform(q, eta)
}

pub fn mpo_estep_kl(q: ArrayView2<f64>, eta: f64) -> f64 {
    mean_kl_to_uniform(q, eta)
}

fn mean_kl_to_uniform(q: ArrayView2<f64>, eta: f64) -> f64 {
    let (lme, wq) = row_terms(&q, eta);
    (wq - lme).max(0.0)
}

/// Minimizes the dual by bisection (in log space) on its derivative.
/// `warm_start` seeds the bracket search.
pub fn mpo_solve_eta(
    q: ArrayView2<f64>,
    epsilon: f64,
    eta_min: f64,
    eta_max: f64,
    tolerance: f64,
    warm_start: Option<f64>,
) -> Result<EtaSolution> {
    check_q(&q)?;
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let degenerate = q.axis_iter(Axis(0)).all(|row| {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        max - min <= 1e-12 * max.abs().max(1.0)
    });
    let solution = |eta: f64, boundary| EtaSolution {
        eta,
        boundary,
        kl: mean_kl_to_uniform(q, eta),
    };
    if degenerate {
        return Ok(solution(eta_max, Some(EtaBoundary::Degenerate)));
    }
    let d = |eta: f64| mpo_dual_derivative(q, eta, epsilon);
    let d_min = d(eta_min);
    if d_min >= 0.0 {
        return Ok(solution(eta_min, Some(EtaBoundary::Lower)));
    }
    let d_max = d(eta_max);
    if d_max <= 0.0 {
        return Ok(solution(eta_max, Some(EtaBoundary::Upper)));
    }
    // Bracket [lo, hi] with d(lo) < 0 < d(hi), grown geometrically around the
    // warm start.
    let (mut lo, mut hi) = (eta_min, eta_max);
    if let Some(w) = warm_start.filter(|w| *w > eta_min && *w < eta_max) {
        let dw = d(w);
        if dw == 0.0 {
            return Ok(solution(w, None));
        }
        let mut step = 2.0;
        if dw > 0.0 {
            hi = w;
            loop {
                let cand = (w / step).max(eta_min);
                if cand <= eta_min || d(cand) < 0.0 {
                    lo = cand;
                    break;
                }
                hi = cand;
                step *= step;
            }
        } else {
            lo = w;
            loop {
                let cand = (w * step).min(eta_max);
                if cand >= eta_max || d(cand) > 0.0 {
                    hi = cand;
                    break;
                }
                lo = cand;
                step *= step;
            }
        }
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        let dm = d(mid);
        if dm.abs() <= tolerance || hi / lo - 1.0 <= tolerance {
            return Ok(solution(mid, None));
        }
        if dm > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(solution((lo * hi).sqrt(), None))
}

pub struct MstepOutput {
    pub loss: f64,
    pub kl: f64,
    pub grads: Grads,
}

/// Weighted maximum-likelihood fit with a `KL(old || new)` penalty:
/// `-(1/B) sum_j sum_k w_jk log pi(u_jk | s_j) + kl_weight * (1/B) sum_j KL_j`.
///
/// `samples` holds the pre-squash actions row-major as `(B * K, act_dim)`,
/// the K samples of state `j` in rows `j*K .. (j+1)*K`. The squash Jacobian
/// does not depend on the policy parameters and is left out.
pub fn mpo_mstep_loss(
    policy: &Mlp,
    head: &GaussianHead,
    states: ArrayView2<f64>,
    samples: ArrayView2<f64>,
    weights: ArrayView2<f64>,
    old: &[GaussianParams],
    kl_weight: f64,
) -> Result<MstepOutput> {
    let b = states.nrows();
    let k = weights.ncols();
    if weights.nrows() != b || samples.nrows() != b * k || old.len() != b {
        return Err(Error::shape(
            format!("{b} states x {k} samples"),
            format!(
                "weights {:?}, samples {}, old {}",
                weights.dim(),
                samples.nrows(),
                old.len()
            ),
        ));
    }
    if samples.ncols() != head.act_dim {
        return Err(Error::shape(head.act_dim, samples.ncols()));
    }
    let (raw, cache) = policy.forward_train(states)?;
    let mut upstream = Array2::zeros(raw.raw_dim());
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut kl_total = 0.0;
    for j in 0..b {
        let r = raw.row(j).to_vec();
        let mut up = upstream.row_mut(j);
        for s in 0..k {
            let w = weights[[j, s]];
            if w == 0.0 {
                continue;
            }
            let u = samples.row(j * k + s).to_vec();
            let (lp, g) = head.log_prob_u_with_grad(&r, &u);
            loss -= w * lp * inv_b;
            for (o, gi) in up.iter_mut().zip(&g) {
                *o -= w * gi * inv_b;
            }
        }
        let (kl, g) = gaussian_kl(head, &old[j], &r);
        kl_total += kl * inv_b;
        loss += kl_weight * kl * inv_b;
        for (o, gi) in up.iter_mut().zip(&g) {
            *o += kl_weight * gi * inv_b;
        }
    }
    let (grads, _) = policy.backward(&cache, upstream.view())?;
    Ok(MstepOutput {
        loss,
        kl: kl_total,
        grads,
    })
}
