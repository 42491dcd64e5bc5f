//! Categorical distributional state-action values and their N-step target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::softmax;

/// Input distributions may deviate from unit mass by at most this much.
pub const MASS_TOLERANCE: f64 = 1e-6;

/// Evenly spaced return atoms `z_i = v_min + i * (v_max - v_min) / (A - 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SupportSpec", into = "SupportSpec")]
pub struct Support {
    v_min: f64,
    v_max: f64,
    z: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SupportSpec {
    v_min: f64,
    v_max: f64,
    atoms: usize,
}

impl TryFrom<SupportSpec> for Support {
    type Error = Error;
    fn try_from(s: SupportSpec) -> Result<Self> {
        Support::new(s.v_min, s.v_max, s.atoms)
    }
}

impl From<Support> for SupportSpec {
    fn from(s: Support) -> Self {
        SupportSpec {
            v_min: s.v_min,
            v_max: s.v_max,
            atoms: s.atoms(),
        }
    }
}

impl Support {
    pub fn new(v_min: f64, v_max: f64, atoms: usize) -> Result<Self> {
        if atoms < 2 {
            return Err(Error::InvalidArgument(format!("support needs at least 2 atoms, got {atoms}")));
        }
        if !(v_min.is_finite() && v_max.is_finite() && v_min < v_max) {
            return Err(Error::InvalidArgument(format!("support bounds [{v_min}, {v_max}]")));
        }
        let dz = (v_max - v_min) / (atoms - 1) as f64;
        let mut z: Vec<f64> = (0..atoms).map(|i| v_min + i as f64 * dz).collect();
        z[atoms - 1] = v_max;
        Ok(Self { v_min, v_max, z })
    }

    pub fn v_min(&self) -> f64 {
        self.v_min
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn atoms(&self) -> usize {
        self.z.len()
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn spacing(&self) -> f64 {
        (self.v_max - self.v_min) / (self.atoms() - 1) as f64
    }
}

fn check_mass(probs: &[f64]) -> Result<()> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::NonFinite("probabilities must be finite and non-negative".into()));
    }
    let mass: f64 = probs.iter().sum();
    if (mass - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::NotNormalized {
            mass,
            tolerance: MASS_TOLERANCE,
        });
    }
    Ok(())
}

/// Projects masses `probs[j]` at arbitrary `locations[j]` onto the support:
/// each location is clamped into `[v_min, v_max]` and its mass is split
/// linearly between the two neighbouring atoms.
pub fn project(locations: &[f64], probs: &[f64], support: &Support) -> Result<Vec<f64>> {
    if locations.len() != probs.len() {
        return Err(Error::shape(probs.len(), locations.len()));
    }
    check_mass(probs)?;
    if locations.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("projection locations".into()));
    }
    let n = support.atoms();
    let dz = support.spacing();
    let mut out = vec![0.0; n];
    for (&v, &p) in locations.iter().zip(probs) {
        let b = ((v.clamp(support.v_min, support.v_max) - support.v_min) / dz).clamp(0.0, (n - 1) as f64);
        let lo = b.floor();
        let l = lo as usize;
        let frac = b - lo;
        if l + 1 >= n || frac == 0.0 {
            out[l.min(n - 1)] += p;
        } else {
            out[l] += p * (1.0 - frac);
            out[l + 1] += p * frac;
        }
    }
    Ok(out)
}

/// Distributional N-step target: atoms shifted to `reward + discount * z`
/// and projected back. A zero discount collapses to a point mass at the
/// (clamped) reward.
pub fn nstep_target(
    n_step_reward: f64,
    bootstrap_discount: f64,
    bootstrap_probs: &[f64],
    support: &Support,
) -> Result<Vec<f64>> {
    if bootstrap_probs.len() != support.atoms() {
        return Err(Error::shape(support.atoms(), bootstrap_probs.len()));
    }
    let locations: Vec<f64> = support
        .z()
        .iter()
        .map(|z| n_step_reward + bootstrap_discount * z)
        .collect();
    project(&locations, bootstrap_probs, support)
}

/// Cross-entropy `H(target, softmax(logits))` and its gradient with respect
/// to the logits, `softmax(logits) - target`.
pub fn critic_loss(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let loss = -target
        .iter()
        .zip(logits)
        .map(|(t, l)| if *t == 0.0 { 0.0 } else { t * (l - lse) })
        .sum::<f64>();
    let grad = softmax(logits).iter().zip(target).map(|(p, t)| p - t).collect();
    (loss, grad)
}

/// Expected return of a categorical value.
pub fn q_mean(probs: &[f64], support: &Support) -> f64 {
    probs.iter().zip(support.z()).map(|(p, z)| p * z).sum()
}

/// Expected return directly from logits, plus `d q / d logit_i = p_i (z_i - q)`.
pub fn q_mean_from_logits(logits: &[f64], support: &Support) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let q = q_mean(&p, support);
    let grad = p.iter().zip(support.z()).map(|(p, z)| p * (z - q)).collect();
    (q, grad)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Independent projection: atom `i` collects each mass weighted by the
    /// triangular kernel `max(0, 1 - |clamp(v) - z_i| / dz)`.
    pub(crate) fn kernel_projection(locations: &[f64], probs: &[f64], support: &Support) -> Vec<f64> {
        let dz = support.spacing();
        support
            .z()
            .iter()
            .map(|zi| {
                locations
                    .iter()
                    .zip(probs)
                    .map(|(v, p)| {
                        let c = v.clamp(support.v_min(), support.v_max());
                        p * (1.0 - (c - zi).abs() / dz).max(0.0)
                    })
                    .sum()
            })
            .collect()
    }

    pub(crate) fn random_probs(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|r| r / total).collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn support_atoms_are_even() {
        let s = Support::new(-1.0, 1.0, 5).unwrap();
        assert_eq!(s.z(), &[-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(Support::new(0.0, 1.0, 1).is_err());
        assert!(Support::new(1.0, 1.0, 3).is_err());
    }

    #[test]
    fn support_serde_round_trip() {
        let s = Support::new(-10.0, 10.0, 51).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"v_min":-10.0,"v_max":10.0,"atoms":51}"#);
        assert_eq!(serde_json::from_str::<Support>(&json).unwrap(), s);
        assert!(serde_json::from_str::<Support>(r#"{"v_min":0,"v_max":1,"atoms":1}"#).is_err());
    }

    #[test]
    fn projection_fixed_point() {
        let s = Support::new(-3.0, 7.0, 11).unwrap();
        let p = random_probs(&mut crate::rng::seeded(1), 11);
        let out = project(s.z(), &p, &s).unwrap();
        assert!(close(&out, &p, 1e-15));
    }

    #[test]
    fn projection_midpoint_and_clamp() {
        let s = Support::new(0.0, 1.0, 3).unwrap();
        assert_eq!(project(&[0.25, 0.25, 0.25], &[1.0, 0.0, 0.0], &s).unwrap(), vec![0.5, 0.5, 0.0]);
        assert_eq!(project(&[2.0, 2.0, 2.0], &[0.2, 0.3, 0.5], &s).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(project(&[-5.0; 3], &[0.2, 0.3, 0.5], &s).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn projection_rejects_unnormalized_input() {
        let s = Support::new(0.0, 1.0, 3).unwrap();
        assert!(matches!(
            project(s.z(), &[0.5, 0.5, 0.5], &s),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn projection_matches_kernel_oracle() {
        let mut rng = crate::rng::seeded(2);
        for _ in 0..2000 {
            let atoms = rng.random_range(2..60);
            let lo = rng.random_range(-50.0..0.0);
            let s = Support::new(lo, lo + rng.random_range(0.5..80.0), atoms).unwrap();
            let m = rng.random_range(1..60);
            let span = s.v_max() - s.v_min();
            let loc: Vec<f64> = (0..m)
                .map(|_| rng.random_range(s.v_min() - span..s.v_max() + span))
                .collect();
            let p = random_probs(&mut rng, m);
            let got = project(&loc, &p, &s).unwrap();
            assert!(close(&got, &kernel_projection(&loc, &p, &s), 1e-9));
            let in_mass: f64 = p.iter().sum();
            assert!((got.iter().sum::<f64>() - in_mass).abs() < 1e-12);
        }
    }

    #[test]
    fn terminal_target_collapses_to_reward() {
        let s = Support::new(-1.0, 1.0, 5).unwrap();
        let p = random_probs(&mut crate::rng::seeded(3), 5);
        assert_eq!(nstep_target(0.0, 0.0, &p, &s).unwrap(), vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let split = nstep_target(0.25, 0.0, &p, &s).unwrap();
        assert!(close(&split, &[0.0, 0.0, 0.5, 0.5, 0.0], 1e-15));
    }

    #[test]
    fn undiscounted_zero_reward_target_is_identity() {
        let s = Support::new(-2.0, 2.0, 9).unwrap();
        let uniform = vec![1.0 / 9.0; 9];
        assert!(close(&nstep_target(0.0, 1.0, &uniform, &s).unwrap(), &uniform, 1e-15));
    }

    #[test]
    fn nstep_target_matches_enumeration_oracle() {
        let mut rng = crate::rng::seeded(4);
        for _ in 0..500 {
            let s = Support::new(-10.0, 10.0, rng.random_range(2..52)).unwrap();
            let p = random_probs(&mut rng, s.atoms());
            let r = rng.random_range(-5.0..5.0);
            let d = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.0) };
            let mut oracle = vec![0.0; s.atoms()];
            for (j, zj) in s.z().iter().enumerate() {
                let v = (r + d * zj).clamp(-10.0, 10.0);
                for (i, zi) in s.z().iter().enumerate() {
                    oracle[i] += p[j] * (1.0 - (v - zi).abs() / s.spacing()).max(0.0);
                }
            }
            assert!(close(&nstep_target(r, d, &p, &s).unwrap(), &oracle, 1e-9));
        }
    }

    #[test]
    fn one_step_target_is_bellman_shift() {
        // reward 0.5, discount 0.5 on atoms {0, 1, 2}: locations {0.5, 1, 1.5}.
        let s = Support::new(0.0, 2.0, 3).unwrap();
        let out = nstep_target(0.5, 0.5, &[0.2, 0.3, 0.5], &s).unwrap();
        assert!(close(&out, &[0.1, 0.1 + 0.3 + 0.25, 0.25], 1e-15));
    }

    #[test]
    fn critic_loss_examples() {
        let logits = [0.3, -1.0, 2.0];
        let p = softmax(&logits);
        let (_, g) = critic_loss(&logits, &p);
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        let (loss, _) = critic_loss(&logits, &[0.0, 1.0, 0.0]);
        assert!((loss + p[1].ln()).abs() < 1e-12);
    }

    #[test]
    fn critic_loss_gradient_matches_central_differences() {
        let mut rng = crate::rng::seeded(5);
        for _ in 0..100 {
            let n = rng.random_range(2..20);
            let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let target = random_probs(&mut rng, n);
            let (_, g) = critic_loss(&logits, &target);
            let fd: Vec<f64> = (0..n)
                .map(|k| {
                    let mut a = logits.clone();
                    a[k] += 1e-6;
                    let plus = critic_loss(&a, &target).0;
                    a[k] -= 2e-6;
                    (plus - critic_loss(&a, &target).0) / 2e-6
                })
                .collect();
            assert!(crate::net::relative_error(&g, &fd) < 1e-6);
        }
    }

    #[test]
    fn q_mean_examples() {
        let s = Support::new(-1.0, 1.0, 11).unwrap();
        assert!(q_mean(&[1.0 / 11.0; 11], &s).abs() < 1e-15);
        let mut point = vec![0.0; 11];
        point[10] = 1.0;
        assert_eq!(q_mean(&point, &s), 1.0);
        let mut rng = crate::rng::seeded(6);
        let p = random_probs(&mut rng, 11);
        let mut naive = 0.0;
        for i in 0..11 {
            naive += p[i] * (-1.0 + 0.2 * i as f64);
        }
        assert!((q_mean(&p, &s) - naive).abs() < 1e-12);
    }

    #[test]
    fn q_mean_logit_gradient_matches_central_differences() {
        let s = Support::new(-4.0, 6.0, 21).unwrap();
        let mut rng = crate::rng::seeded(7);
        let logits: Vec<f64> = (0..21).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, g) = q_mean_from_logits(&logits, &s);
        let fd: Vec<f64> = (0..21)
            .map(|k| {
                let mut a = logits.clone();
                a[k] += 1e-6;
                let plus = q_mean_from_logits(&a, &s).0;
                a[k] -= 2e-6;
                (plus - q_mean_from_logits(&a, &s).0) / 2e-6
            })
            .collect();
        assert!(crate::net::relative_error(&g, &fd) < 1e-6);
    }

    proptest! {
        #[test]
        fn projection_conserves_mass(
            seed in any::<u64>(),
            atoms in 2usize..80,
            m in 1usize..80,
        ) {
            let mut rng = crate::rng::seeded(seed);
            let s = Support::new(-1.0, 3.0, atoms).unwrap();
            let loc: Vec<f64> = (0..m).map(|_| rng.random_range(-6.0..8.0)).collect();
            let p = random_probs(&mut rng, m);
            let out = project(&loc, &p, &s).unwrap();
            prop_assert!((out.iter().sum::<f64>() - p.iter().sum::<f64>()).abs() < 1e-12);
            prop_assert!(out.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn projection_preserves_mean_of_clamped_target(
            seed in any::<u64>(),
            atoms in 2usize..40,
        ) {
            // Linear splitting keeps the first moment exactly.
            let mut rng = crate::rng::seeded(seed);
            let s = Support::new(0.0, 5.0, atoms).unwrap();
            let loc: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..6.0)).collect();
            let p = random_probs(&mut rng, 10);
            let out = project(&loc, &p, &s).unwrap();
            let clamped_mean: f64 = loc.iter().zip(&p).map(|(v, p)| v.clamp(0.0, 5.0) * p).sum();
            prop_assert!((q_mean(&out, &s) - clamped_mean).abs() < 1e-9);
        }
    }
}
