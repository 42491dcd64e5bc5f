use serde::{Deserialize, Serialize};

use crate::algos::Policy;
use crate::envs::{make_env, EnvConfig};
use crate::error::Result;
use crate::rng::{self, ChaCha8Rng, Stream};

/// Undiscounted returns of a batch of evaluation episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub online_steps: u64,
    pub mean: f64,
    /// Sample standard deviation (0 for a single episode).
    pub stddev: f64,
    pub returns: Vec<f64>,
}

impl EvalReport {
    pub fn from_returns(online_steps: u64, returns: Vec<f64>) -> Self {
        let n = returns.len() as f64;
        let mean = if returns.is_empty() { 0.0 } else { returns.iter().sum::<f64>() / n };
        let stddev = if returns.len() > 1 {
            (returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            online_steps,
            mean,
            stddev,
            returns,
        }
    }
}

/// Rolls out `episodes` full episodes with an arbitrary controller. Initial
/// states come from `rng`; the controller sees `f32` observations, the same
/// precision stored in datasets.
pub fn evaluate_with(
    env_config: &EnvConfig,
    episodes: usize,
    rng: &mut ChaCha8Rng,
    mut controller: impl FnMut(&[f32]) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let mut env = make_env(env_config)?;
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs: Vec<f32> = env.reset(rng).iter().map(|&v| v as f32).collect();
        let mut total = 0.0;
        loop {
            let step = env.step(&controller(&obs)?)?;
            total += step.reward;
            if step.terminal || step.truncated {
                break;
            }
            obs = step.obs.iter().map(|&v| v as f32).collect();
        }
        returns.push(total);
    }
    Ok(returns)
}

/// Deterministic-policy evaluation (Gaussian mean, or the deterministic
/// output without noise) on the evaluation stream of `seed`.
pub fn evaluate(policy: &Policy, env_config: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalReport> {
    let mut rng = rng::stream(seed, Stream::Eval);
    let returns = evaluate_policy(policy, env_config, episodes, &mut rng)?;
    Ok(EvalReport::from_returns(0, returns))
}

pub(crate) fn evaluate_policy(
    policy: &Policy,
    env_config: &EnvConfig,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    // The mode is used, so this generator is never drawn from.
    let mut unused = rng::seeded(0);
    evaluate_with(env_config, episodes, rng, |obs| policy.act(obs, false, &mut unused))
}


#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::algos::PolicyKind;
    use crate::envs::{EnvId, PendulumConfig, PointMassConfig};
    use crate::net::{Activation, Head, Mlp, Squash};
    use rand::Rng;

    /// Uniformly random actions within the environment's bounds.
    fn random_controller<'a>(
        low: &'a [f64],
        high: &'a [f64],
        rng: &'a mut impl Rng,
    ) -> impl FnMut(&[f32]) -> Result<Vec<f64>> + 'a {
        move |_| Ok(low.iter().zip(high).map(|(l, h)| rng.random_range(*l..*h)).collect())
    }

    fn zero_policy(obs_dim: usize, act_dim: usize, low: f64, high: f64) -> Policy {
        let mut init = rng::seeded(0);
        let mut net = Mlp::new(obs_dim, &[4], act_dim, Activation::Tanh, Head::Linear, 1.0, &mut init);
        let zeros = vec![0.0; net.flat_params().len()];
        net.set_flat_params(&zeros);
        Policy {
            net,
            kind: PolicyKind::Deterministic {
                squash: Squash::new(vec![low; act_dim], vec![high; act_dim]),
                noise: 0.5,
            },
        }
    }

    #[test]
    fn zero_torque_from_hanging_matches_constant_angle_cost() {
        let env = EnvConfig {
            id: EnvId::PendulumDense,
            pendulum: PendulumConfig {
                theta_range: [PI, PI],
                theta_dot_range: [0.0, 0.0],
                ..PendulumConfig::default()
            },
            ..EnvConfig::default()
        };
        let report = evaluate(&zero_policy(3, 1, -2.0, 2.0), &env, 3, 11).unwrap();
        // The hanging pendulum never moves: every step costs exactly pi^2.
        // f32 observations do not matter because the policy ignores them.
        let expected = -(env.pendulum.max_episode_steps as f64) * PI * PI;
        for r in &report.returns {
            assert!((r - expected).abs() < 1e-6 * expected.abs(), "{r} vs {expected}");
        }
        assert!(report.stddev < 1e-9);
    }

    #[test]
    fn evaluation_is_reproducible_per_seed() {
        let env = EnvConfig::default();
        let mut init = rng::seeded(5);
        let net = Mlp::new(6, &[8], 2, Activation::Tanh, Head::Linear, 1.0, &mut init);
        let policy = Policy {
            net,
            kind: PolicyKind::Deterministic {
                squash: Squash::new(vec![-1.0; 2], vec![1.0; 2]),
                noise: 0.3,
            },
        };
        let a = evaluate(&policy, &env, 4, 3).unwrap();
        let b = evaluate(&policy, &env, 4, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.returns.len(), 4);
    }

    #[test]
    fn random_policy_scores_near_the_chance_rate_of_goal_dwell() {
        let env = EnvConfig {
            pointmass: PointMassConfig {
                max_episode_steps: 100,
                ..PointMassConfig::default()
            },
            ..EnvConfig::default()
        };
        let (low, high) = (vec![-1.0; 2], vec![1.0; 2]);
        let episodes = 400;
        let mut eval_rng = rng::stream(1, Stream::Eval);
        let mut act_rng = rng::seeded(2);
        let returns = evaluate_with(&env, episodes, &mut eval_rng, random_controller(&low, &high, &mut act_rng)).unwrap();
        let mean = returns.iter().sum::<f64>() / episodes as f64;

        // Independent Monte-Carlo estimate of the chance dwell rate: the
        // unperturbed dynamics written out directly, on its own random stream.
        let mut rng = rng::seeded(99);
        let c = &env.pointmass;
        let mut hits = 0u64;
        for _ in 0..episodes {
            let mut p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let g = [rng.random_range(-c.goal_range..c.goal_range), rng.random_range(-c.goal_range..c.goal_range)];
            let mut v = [0.0f64; 2];
            for _ in 0..c.max_episode_steps {
                for i in 0..2 {
                    let a: f64 = rng.random_range(-1.0..1.0);
                    v[i] += (a - c.damping * v[i]) * c.dt;
                    p[i] += v[i] * c.dt;
                    if p[i].abs() > 1.0 {
                        p[i] = p[i].clamp(-1.0, 1.0);
                        v[i] = 0.0;
                    }
                }
                if (p[0] - g[0]).hypot(p[1] - g[1]) <= c.goal_radius {
                    hits += 1;
                }
            }
        }
        let oracle = hits as f64 / episodes as f64;
        let per_step = oracle / c.max_episode_steps as f64;
        assert!(mean > 0.0 && per_step < 0.1, "chance dwell should be small and nonzero");
        // Episode returns are heavy-tailed (a start near the goal dwells long);
        // compare the two estimates at a generous multiple of the standard
        // error of the pooled sample.
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (episodes as f64 - 1.0);
        let se = (2.0 * var / episodes as f64).sqrt();
        assert!((mean - oracle).abs() < 4.0 * se, "mean {mean}, oracle {oracle}, se {se}");
    }
}
