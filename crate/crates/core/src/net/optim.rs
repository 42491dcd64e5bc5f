use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use super::{Dense, Grads, Mlp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip applied before the update, if set.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_grad_norm: None,
        }
    }
}

/// Bias-corrected adaptive-moment optimizer state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first: Vec<Dense>,
    pub second: Vec<Dense>,
}

impl Adam {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        let zeros = || {
            net.layers()
                .iter()
                .map(|l| Dense {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step_count: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Grads) -> Result<()> {
        if grads.layers.len() != net.layers().len() {
            return Err(Error::shape(net.layers().len(), grads.layers.len()));
        }
        if let Some((layer, bias)) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of layer {layer} {} at optimizer step {}",
                if bias { "bias" } else { "weights" },
                self.step_count
            )));
        }
        let clip = match self.config.max_grad_norm {
            Some(max) => {
                let norm = grads.norm();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.step_count += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
            ..
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((layer, g), m), v) in net
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
                let g = g * clip;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            Zip::from(&mut layer.w)
                .and(&g.w)
                .and(&mut m.w)
                .and(&mut v.w)
                .for_each(update);
            Zip::from(&mut layer.b)
                .and(&g.b)
                .and(&mut m.b)
                .and(&mut v.b)
                .for_each(update);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetUpdate {
    /// Copy the live network every `every` updates.
    Periodic { every: u64 },
    /// `target = (1 - tau) * target + tau * live` after every update.
    Polyak { tau: f64 },
}

/// A live network and its lagged copy.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPair {
    pub live: Mlp,
    pub target: Mlp,
    pub rule: TargetUpdate,
    updates: u64,
}

impl TargetPair {
    pub fn new(live: Mlp, rule: TargetUpdate) -> Self {
        Self {
            target: live.clone(),
            live,
            rule,
            updates: 0,
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Applies the target rule after one update of the live network.
    /// Returns true when a periodic copy happened.
    pub fn after_update(&mut self) -> bool {
        self.updates += 1;
        match self.rule {
            TargetUpdate::Periodic { every } => {
                if every > 0 && self.updates % every == 0 {
                    self.target.clone_from(&self.live);
                    return true;
                }
                false
            }
            TargetUpdate::Polyak { tau } => {
                self.target.lerp_from(&self.live, tau);
                false
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, Head};
    use ndarray::array;

    fn net() -> Mlp {
        Mlp::new(2, &[4], 1, Activation::Tanh, Head::Linear, 1.0, &mut crate::rng::seeded(1))
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut n = net();
        let before = n.clone();
        let mut adam = Adam::new(&n, AdamConfig::default());
        adam.step(&mut n, &Grads::zeros_like(&before)).unwrap();
        assert_eq!(n, before);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn accumulators_start_at_zero() {
        let adam = Adam::new(&net(), AdamConfig::default());
        assert!(adam.first.iter().chain(&adam.second).all(|d| {
            d.w.iter().chain(d.b.iter()).all(|v| *v == 0.0)
        }));
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut n = net();
        let mut g = Grads::zeros_like(&n);
        g.layers[0].w.fill(0.5);
        g.layers[1].b.fill(-2.0);
        let mut adam = Adam::new(&n, AdamConfig::default());
        let mut prev = n.clone();
        for _ in 0..50 {
            adam.step(&mut n, &g).unwrap();
            assert!(Zip::from(&n.layers()[0].w)
                .and(&prev.layers()[0].w)
                .all(|a, b| a < b));
            assert!(n.layers()[1].b[0] > prev.layers()[1].b[0]);
            prev = n.clone();
        }
    }

    #[test]
    fn quadratic_bowl_loss_decreases() {
        // loss = 0.5 * sum((f(x) - y)^2) over a fixed batch
        let mut n = net();
        let x = array![[0.5, -0.3], [1.0, 0.2], [-0.7, 0.9]];
        let y = array![[1.0], [-0.5], [0.3]];
        let mut adam = Adam::new(
            &n,
            AdamConfig {
                learning_rate: 1e-2,
                ..AdamConfig::default()
            },
        );
        let loss = |n: &Mlp| 0.5 * (n.forward_batch(x.view()).unwrap() - &y).mapv(|v| v * v).sum();
        let mut prev = loss(&n);
        for _ in 0..10 {
            let (out, cache) = n.forward_train(x.view()).unwrap();
            let (g, _) = n.backward(&cache, (out - &y).view()).unwrap();
            adam.step(&mut n, &g).unwrap();
            let now = loss(&n);
            assert!(now < prev, "{now} >= {prev}");
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut n = net();
        let mut g = Grads::zeros_like(&n);
        g.layers[1].w[[0, 0]] = f64::NAN;
        let mut adam = Adam::new(&n, AdamConfig::default());
        let err = adam.step(&mut n, &g).unwrap_err();
        assert!(err.to_string().contains("layer 1"));
    }

    #[test]
    fn periodic_target_copies_exactly() {
        let mut pair = TargetPair::new(net(), TargetUpdate::Periodic { every: 3 });
        let mut g = Grads::zeros_like(&pair.live);
        g.layers[0].w.fill(1.0);
        let mut adam = Adam::new(&pair.live, AdamConfig::default());
        for k in 1..=6 {
            adam.step(&mut pair.live, &g).unwrap();
            let copied = pair.after_update();
            assert_eq!(copied, k % 3 == 0);
            if copied {
                assert_eq!(pair.target, pair.live);
            } else {
                assert_ne!(pair.target, pair.live);
            }
        }
    }

    #[test]
    fn polyak_blends() {
        let mut pair = TargetPair::new(net(), TargetUpdate::Polyak { tau: 0.25 });
        let old = pair.target.clone();
        pair.live.layers_mut()[0].w.fill(1.0);
        pair.after_update();
        let expected = 0.75 * old.layers()[0].w[[0, 0]] + 0.25;
        assert!((pair.target.layers()[0].w[[0, 0]] - expected).abs() < 1e-15);
    }
}
