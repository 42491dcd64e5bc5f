//! Advantage-filtered regression (CRR) and plain behavior cloning.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{GaussianHead, Grads, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrrVariant {
    /// `f = 1[A > 0]`.
    Binary,
    /// `f = min(exp(A / beta), w_max)`.
    Exp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrrConfig {
    pub variant: CrrVariant,
    pub beta: f64,
    /// Policy samples used for the value baseline of the advantage (m).
    pub advantage_samples: usize,
    pub exp_weight_clip: f64,
}

impl Default for CrrConfig {
    fn default() -> Self {
        Self {
            variant: CrrVariant::Exp,
            beta: 1.0,
            advantage_samples: 4,
            exp_weight_clip: 20.0,
        }
    }
}

impl CrrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.exp_weight_clip > 0.0) || self.advantage_samples == 0 {
            return Err(Error::InvalidArgument(
                "crr.beta and crr.exp_weight_clip must be positive, crr.advantage_samples >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// `A = q_sa - mean(q_sampled)`.
pub fn crr_advantage(q_sa: f64, q_sampled: &[f64]) -> f64 {
    q_sa - q_sampled.iter().sum::<f64>() / q_sampled.len() as f64
}

/// Filter weight of one dataset action.
pub fn crr_weight(q_sa: f64, q_sampled: &[f64], cfg: &CrrConfig) -> f64 {
    assert!(!q_sampled.is_empty(), "advantage needs at least one sampled value");
    let a = crr_advantage(q_sa, q_sampled);
    match cfg.variant {
        CrrVariant::Binary => {
            if a > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        CrrVariant::Exp => (a / cfg.beta).exp().min(cfg.exp_weight_clip),
    }
}

/// `-(1/B) sum_j w_j log pi(a_j | s_j)` for dataset actions `a_j`, with its
/// parameter gradient. Log-densities include the squash correction.
pub fn weighted_nll(
    policy: &Mlp,
    head: &GaussianHead,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    weights: &[f64],
) -> Result<(f64, Grads)> {
    let b = states.nrows();
    if actions.nrows() != b || weights.len() != b || actions.ncols() != head.act_dim {
        return Err(Error::shape(
            format!("{b} rows of {} actions and weights", head.act_dim),
            format!("actions {:?}, weights {}", actions.dim(), weights.len()),
        ));
    }
    let (raw, cache) = policy.forward_train(states)?;
    let mut upstream = Array2::zeros(raw.raw_dim());
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    for j in 0..b {
        let u = head.to_pre_squash(&actions.row(j).to_vec())?;
        let r = raw.row(j).to_vec();
        let (lp, g) = head.log_prob_u_with_grad(&r, &u);
        let correction = head.squash.as_ref().map_or(0.0, |sq| sq.log_det_jacobian(&u));
        loss -= weights[j] * (lp - correction) * inv_b;
        for (o, gi) in upstream.row_mut(j).iter_mut().zip(&g) {
            *o = -weights[j] * gi * inv_b;
        }
    }
    let (grads, _) = policy.backward(&cache, upstream.view())?;
    Ok((loss, grads))
}

/// Mean negative log-likelihood of dataset actions.
pub fn bc_loss(
    policy: &Mlp,
    head: &GaussianHead,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
) -> Result<(f64, Grads)> {
    weighted_nll(policy, head, states, actions, &vec![1.0; states.nrows()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{gaussian_log_prob, relative_error, Activation, Head, Squash};
    use ndarray::concatenate;
    use ndarray::Axis;
    use rand::Rng;

    fn binary() -> CrrConfig {
        CrrConfig {
            variant: CrrVariant::Binary,
            ..CrrConfig::default()
        }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(crr_weight(2.0, &[1.0; 4], &binary()), 1.0);
        assert_eq!(crr_weight(0.5, &[1.0; 4], &binary()), 0.0);
        assert_eq!(crr_weight(1.0, &[1.0; 4], &binary()), 0.0);
        let exp = CrrConfig::default();
        assert!((crr_weight(1.0, &[0.0], &exp) - std::f64::consts::E).abs() < 1e-12);
        assert_eq!(crr_weight(10.0, &[0.0], &exp), 20.0);
    }

    #[test]
    fn binary_weight_ignores_positive_scaling() {
        let mut rng = crate::rng::seeded(1);
        for _ in 0..1000 {
            let q: f64 = rng.random_range(-5.0..5.0);
            let s: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c = rng.random_range(1e-3..1e3);
            let scaled: Vec<f64> = s.iter().map(|v| v * c).collect();
            assert_eq!(crr_weight(q, &s, &binary()), crr_weight(q * c, &scaled, &binary()));
        }
    }

    fn setup(rng: &mut impl Rng) -> (Mlp, GaussianHead) {
        let head = GaussianHead {
            act_dim: 2,
            min_scale: 1e-3,
            squash: Some(Squash::new(vec![-1.0, -2.0], vec![1.0, 2.0])),
        };
        let net = Mlp::new(3, &[6], 2, Activation::Tanh, Head::DiagonalGaussian(head.clone()), 1.0, rng);
        (net, head)
    }

    #[test]
    fn tight_policy_at_mean_gives_mode_constant() {
        let mut rng = crate::rng::seeded(2);
        let head = GaussianHead {
            act_dim: 1,
            min_scale: 0.0,
            squash: None,
        };
        // Zero final layer: mean 0, scale softplus(bias); bias chosen so scale = 1.
        let mut net = Mlp::new(2, &[4], 1, Activation::Tanh, Head::DiagonalGaussian(head.clone()), 0.0, &mut rng);
        net.layers_mut()[1].b[1] = (std::f64::consts::E - 1.0).ln();
        let states = Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0));
        let actions = Array2::zeros((5, 1));
        let (loss, _) = bc_loss(&net, &head, states.view(), actions.view()).unwrap();
        assert!((loss - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_has_same_loss() {
        let mut rng = crate::rng::seeded(3);
        let (net, head) = setup(&mut rng);
        let states = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let actions = Array2::from_shape_fn((4, 2), |(_, c)| rng.random_range(-0.9..0.9) * (c + 1) as f64);
        let (a, _) = bc_loss(&net, &head, states.view(), actions.view()).unwrap();
        let s2 = concatenate![Axis(0), states, states];
        let a2 = concatenate![Axis(0), actions, actions];
        let (b, _) = bc_loss(&net, &head, s2.view(), a2.view()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_density_and_gradient_matches_central_differences() {
        let mut rng = crate::rng::seeded(4);
        for _ in 0..10 {
            let (net, head) = setup(&mut rng);
            let states = Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0));
            let actions = Array2::from_shape_fn((3, 2), |(_, c)| rng.random_range(-0.95..0.95) * (c + 1) as f64);
            let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..3.0)).collect();
            let (loss, grads) = weighted_nll(&net, &head, states.view(), actions.view(), &w).unwrap();
            let direct: f64 = (0..3)
                .map(|j| {
                    let p = head.params(&net.forward(&states.row(j).to_vec()).unwrap());
                    -w[j] * gaussian_log_prob(&p, &actions.row(j).to_vec(), head.squash.as_ref()).unwrap() / 3.0
                })
                .sum();
            assert!((loss - direct).abs() < 1e-10);
            let params = net.flat_params();
            let mut probe = net.clone();
            let fd: Vec<f64> = (0..params.len())
                .map(|i| {
                    let mut p = params.clone();
                    p[i] += 1e-5;
                    probe.set_flat_params(&p);
                    let plus = weighted_nll(&probe, &head, states.view(), actions.view(), &w).unwrap().0;
                    p[i] -= 2e-5;
                    probe.set_flat_params(&p);
                    let minus = weighted_nll(&probe, &head, states.view(), actions.view(), &w).unwrap().0;
                    (plus - minus) / 2e-5
                })
                .collect();
            assert!(relative_error(&grads.flatten(), &fd) < 1e-4);
        }
    }
}
