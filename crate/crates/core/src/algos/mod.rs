//! Learner algorithms sharing one distributional critic: MPO, CRR, the
//! deterministic-policy D4PG variant, behavior cloning and AWAC, plus the
//! periodic weight-reset baseline.
//!
//! One learner step updates the critic first (cross-entropy towards the
//! N-step distributional target built from the target networks), then the
//! policy, and finally applies the target-network rule.

mod crr;
mod d4pg;
mod mpo;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use crr::{bc_loss, crr_advantage, crr_weight, weighted_nll, CrrConfig, CrrVariant};
pub use d4pg::{critic_input, d4pg_policy_loss, D4pgConfig, D4pgOutput};
pub use mpo::{
    mpo_dual, mpo_dual_derivative, mpo_estep_kl, mpo_estep_weights, mpo_mstep_loss, mpo_solve_eta,
    EtaBoundary, EtaSolution, MpoConfig, MstepOutput,
};

use crate::critic::{critic_loss, nstep_target, q_mean_from_logits, Support};
use crate::error::{Error, Result};
use crate::net::{
    softmax, Activation, Adam, AdamConfig, Checkpoint, GaussianHead, GaussianParams, Grads, Head,
    Mlp, Squash, TargetPair, TargetUpdate,
};
use crate::replay::Batch;
use crate::rng::{self, ChaCha8Rng, RngState, Stream};
use crate::trajectory::EnvSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgoKind {
    Mpo,
    Crr,
    D4pg,
    Bc,
    Awac,
}

impl AlgoKind {
    pub fn uses_critic(self) -> bool {
        self != AlgoKind::Bc
    }

    pub fn deterministic_policy(self) -> bool {
        self == AlgoKind::D4pg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AwacConfig {
    /// Offline-only learner updates before any environment interaction.
    pub pretrain_updates: u64,
    /// Advantage temperature; the policy objective is CRR-Exp with `beta = 1 / lambda`.
    pub lambda: f64,
}

impl Default for AwacConfig {
    fn default() -> Self {
        Self {
            pretrain_updates: 25_000,
            lambda: 1.0,
        }
    }
}

impl AwacConfig {
    pub fn crr(&self, base: &CrrConfig) -> CrrConfig {
        CrrConfig {
            variant: CrrVariant::Exp,
            beta: 1.0 / self.lambda,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub activation: Activation,
    /// Scale of the final policy layer's initial weights.
    pub policy_final_scale: f64,
    /// Lower bound on the Gaussian policy's standard deviation.
    pub min_policy_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            policy_hidden: vec![64, 64],
            critic_hidden: vec![128, 128],
            activation: Activation::Relu,
            policy_final_scale: 0.1,
            min_policy_scale: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub atoms: usize,
    /// Support bounds; the environment's defaults apply when unset.
    pub v_min: Option<f64>,
    pub v_max: Option<f64>,
    pub n_step: usize,
    /// Target-policy actions averaged at the bootstrap state.
    pub bootstrap_samples: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            atoms: 51,
            v_min: None,
            v_max: None,
            n_step: 5,
            bootstrap_samples: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub algo: AlgoKind,
    pub networks: NetworkConfig,
    pub critic: CriticConfig,
    pub policy_optimizer: AdamConfig,
    pub critic_optimizer: AdamConfig,
    pub target_update: TargetUpdate,
    pub mpo: MpoConfig,
    pub crr: CrrConfig,
    pub d4pg: D4pgConfig,
    pub awac: AwacConfig,
    /// Reinitialize every network and optimizer every this many updates.
    pub reset_interval: Option<u64>,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            algo: AlgoKind::Mpo,
            networks: NetworkConfig::default(),
            critic: CriticConfig::default(),
            policy_optimizer: AdamConfig::default(),
            critic_optimizer: AdamConfig::default(),
            target_update: TargetUpdate::Periodic { every: 100 },
            mpo: MpoConfig::default(),
            crr: CrrConfig::default(),
            d4pg: D4pgConfig::default(),
            awac: AwacConfig::default(),
            reset_interval: None,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        self.mpo.validate()?;
        self.crr.validate()?;
        if self.critic.n_step == 0 || self.critic.bootstrap_samples == 0 {
            return Err(Error::InvalidArgument(
                "critic.n_step and critic.bootstrap_samples must be >= 1".into(),
            ));
        }
        if self.critic.atoms < 2 {
            return Err(Error::InvalidArgument("critic.atoms must be >= 2".into()));
        }
        if self.algo == AlgoKind::Awac && (self.awac.pretrain_updates == 0 || !(self.awac.lambda > 0.0)) {
            return Err(Error::InvalidArgument(
                "awac.pretrain_updates must be > 0 and awac.lambda positive".into(),
            ));
        }
        if self.reset_interval == Some(0) {
            return Err(Error::InvalidArgument("reset_interval must be positive".into()));
        }
        if !(self.networks.min_policy_scale >= 0.0) {
            return Err(Error::InvalidArgument("networks.min_policy_scale".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResetSchedule {
    pub interval_updates: u64,
    pub next_reset_at: u64,
}

impl ResetSchedule {
    pub fn new(interval_updates: u64) -> Self {
        Self {
            interval_updates,
            next_reset_at: interval_updates,
        }
    }
}

/// How the policy network's output becomes an action.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyKind {
    Gaussian(GaussianHead),
    Deterministic { squash: Squash, noise: f64 },
}

/// A frozen copy of the policy used for acting and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub net: Mlp,
    pub kind: PolicyKind,
}

impl Policy {
    /// Exploratory actions sample the Gaussian (or add Gaussian noise to the
    /// deterministic output); otherwise the mode is returned.
    pub fn act(&self, obs: &[f32], explore: bool, rng: &mut impl Rng) -> Result<Vec<f64>> {
        act_with(&self.net, &self.kind, obs, explore, rng)
    }
}

fn act_with(net: &Mlp, kind: &PolicyKind, obs: &[f32], explore: bool, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let x: Vec<f64> = obs.iter().map(|v| *v as f64).collect();
    let raw = net.forward(&x)?;
    Ok(match kind {
        PolicyKind::Gaussian(head) => {
            let params = head.params(&raw);
            if explore {
                head.sample(&params, rng).1
            } else {
                head.mode_action(&params)
            }
        }
        PolicyKind::Deterministic { squash, noise } => {
            let mut a = squash.apply(&raw);
            if explore {
                for (i, v) in a.iter_mut().enumerate() {
                    let half = 0.5 * (squash.high[i] - squash.low[i]);
                    *v = (*v + noise * half * rng.sample::<f64, _>(StandardNormal))
                        .clamp(squash.low[i], squash.high[i]);
                }
            }
            a
        }
    })
}

/// Scalar diagnostics of one learner step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub critic_loss: Option<f64>,
    pub policy_loss: f64,
    pub q_mean: Option<f64>,
    pub eta: Option<f64>,
    pub eta_boundary: Option<EtaBoundary>,
    pub estep_kl: Option<f64>,
    pub mstep_kl: Option<f64>,
    pub mean_weight: Option<f64>,
    pub reset: bool,
}

/// Batch tensors in `f64`.
struct BatchTensors {
    obs: Array2<f64>,
    actions: Array2<f64>,
    rewards: Vec<f64>,
    discounts: Vec<f64>,
    next_obs: Array2<f64>,
}

impl BatchTensors {
    fn new(batch: &Batch, obs_dim: usize, act_dim: usize) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let b = batch.len();
        let mut obs = Array2::zeros((b, obs_dim));
        let mut actions = Array2::zeros((b, act_dim));
        let mut next_obs = Array2::zeros((b, obs_dim));
        for (j, s) in batch.samples.iter().enumerate() {
            if s.obs.len() != obs_dim || s.bootstrap_obs.len() != obs_dim || s.action.len() != act_dim {
                return Err(Error::shape(
                    format!("obs {obs_dim}, action {act_dim}"),
                    format!("obs {}, action {}", s.obs.len(), s.action.len()),
                ));
            }
            for k in 0..obs_dim {
                obs[[j, k]] = s.obs[k] as f64;
                next_obs[[j, k]] = s.bootstrap_obs[k] as f64;
            }
            for k in 0..act_dim {
                actions[[j, k]] = s.action[k] as f64;
            }
        }
        Ok(Self {
            obs,
            actions,
            rewards: batch.samples.iter().map(|s| s.n_step_reward).collect(),
            discounts: batch.samples.iter().map(|s| s.bootstrap_discount).collect(),
            next_obs,
        })
    }
}

/// Mean cross-entropy of the critic's predictions against fixed target
/// distributions, with its parameter gradient.
pub fn critic_loss_batch(critic: &Mlp, inputs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<(f64, Grads)> {
    let (logits, cache) = critic.forward_train(inputs)?;
    if targets.dim() != logits.dim() {
        return Err(Error::shape(format!("{:?}", logits.dim()), format!("{:?}", targets.dim())));
    }
    let b = inputs.nrows() as f64;
    let mut upstream = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (j, row) in logits.axis_iter(Axis(0)).enumerate() {
        let (l, g) = critic_loss(&row.to_vec(), &targets.row(j).to_vec());
        loss += l / b;
        for (o, gi) in upstream.row_mut(j).iter_mut().zip(&g) {
            *o = gi / b;
        }
    }
    let (grads, _) = critic.backward(&cache, upstream.view())?;
    Ok((loss, grads))
}

/// Everything one learner owns. Parameters are `f64`; the learner RNG drives
/// action sampling inside updates.
#[derive(Debug, Clone)]
pub struct LearnerState {
    pub config: LearnerConfig,
    spec: EnvSpec,
    support: Support,
    seed: u64,
    pub policy: TargetPair,
    pub critic: TargetPair,
    pub policy_opt: Adam,
    pub critic_opt: Adam,
    pub policy_kind: PolicyKind,
    pub eta: f64,
    pub update_counter: u64,
    pub reset_schedule: Option<ResetSchedule>,
    pub rng: ChaCha8Rng,
}

/// Freshly initialized networks and optimizers, a pure function of the seed.
struct Fresh {
    policy: TargetPair,
    critic: TargetPair,
    policy_opt: Adam,
    critic_opt: Adam,
    eta: f64,
}

fn fresh(config: &LearnerConfig, spec: &EnvSpec, kind: &PolicyKind, seed: u64) -> Fresh {
    let mut init = rng::stream(seed, Stream::Init);
    let nc = &config.networks;
    let head = match kind {
        PolicyKind::Gaussian(h) => Head::DiagonalGaussian(h.clone()),
        PolicyKind::Deterministic { .. } => Head::Linear,
    };
    let policy = Mlp::new(
        spec.obs_dim,
        &nc.policy_hidden,
        spec.act_dim,
        nc.activation,
        head,
        nc.policy_final_scale,
        &mut init,
    );
    let critic = Mlp::new(
        spec.obs_dim + spec.act_dim,
        &nc.critic_hidden,
        0,
        nc.activation,
        Head::Categorical {
            atoms: config.critic.atoms,
        },
        1.0,
        &mut init,
    );
    Fresh {
        policy_opt: Adam::new(&policy, config.policy_optimizer.clone()),
        critic_opt: Adam::new(&critic, config.critic_optimizer.clone()),
        policy: TargetPair::new(policy, config.target_update),
        critic: TargetPair::new(critic, config.target_update),
        eta: config.mpo.eta_init,
    }
}

impl LearnerState {
    pub fn new(config: LearnerConfig, spec: &EnvSpec, support: Support, seed: u64) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        if support.atoms() != config.critic.atoms {
            return Err(Error::shape(config.critic.atoms, support.atoms()));
        }
        let squash = Squash::new(spec.act_low.clone(), spec.act_high.clone());
        let policy_kind = if config.algo.deterministic_policy() {
            PolicyKind::Deterministic {
                squash,
                noise: config.d4pg.exploration_noise,
            }
        } else {
            PolicyKind::Gaussian(GaussianHead {
                act_dim: spec.act_dim,
                min_scale: config.networks.min_policy_scale,
                squash: Some(squash),
            })
        };
        let f = fresh(&config, spec, &policy_kind, seed);
        Ok(Self {
            reset_schedule: config.reset_interval.map(ResetSchedule::new),
            config,
            spec: spec.clone(),
            support,
            seed,
            policy: f.policy,
            critic: f.critic,
            policy_opt: f.policy_opt,
            critic_opt: f.critic_opt,
            policy_kind,
            eta: f.eta,
            update_counter: 0,
            rng: rng::stream(seed, Stream::Learner),
        })
    }

    pub fn support(&self) -> &Support {
        &self.support
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn act(&self, obs: &[f32], explore: bool, rng: &mut impl Rng) -> Result<Vec<f64>> {
        act_with(&self.policy.live, &self.policy_kind, obs, explore, rng)
    }

    pub fn snapshot(&self) -> Policy {
        Policy {
            net: self.policy.live.clone(),
            kind: self.policy_kind.clone(),
        }
    }

    /// Reinitializes networks, targets, optimizers and the temperature from the
    /// initialization seed. The update counter and learner RNG keep running.
    pub fn reinitialize(&mut self) {
        let f = fresh(&self.config, &self.spec, &self.policy_kind, self.seed);
        self.policy = f.policy;
        self.critic = f.critic;
        self.policy_opt = f.policy_opt;
        self.critic_opt = f.critic_opt;
        self.eta = f.eta;
    }

    /// Applies a reset if one is scheduled at the current counter.
    pub fn apply_scheduled_reset(&mut self) -> bool {
        match &mut self.reset_schedule {
            Some(s) if self.update_counter == s.next_reset_at => {
                s.next_reset_at += s.interval_updates;
                self.reinitialize();
                true
            }
            _ => false,
        }
    }

    fn gaussian_head(&self) -> Result<&GaussianHead> {
        match &self.policy_kind {
            PolicyKind::Gaussian(h) => Ok(h),
            PolicyKind::Deterministic { .. } => Err(Error::InvalidArgument(
                "algorithm needs a stochastic policy".into(),
            )),
        }
    }

    /// Actions of `net` (the live or target policy) at each row of `states`,
    /// `samples` per row, as `(rows * samples, act_dim)` plus pre-squash values.
    fn sample_actions(
        &mut self,
        net_is_target: bool,
        states: ArrayView2<f64>,
        samples: usize,
        explore: bool,
    ) -> Result<(Array2<f64>, Array2<f64>, Vec<GaussianParams>)> {
        let net = if net_is_target { &self.policy.target } else { &self.policy.live };
        let raw = net.forward_batch(states)?;
        let b = states.nrows();
        let ad = self.spec.act_dim;
        let mut actions = Array2::zeros((b * samples, ad));
        let mut pre = Array2::zeros((b * samples, ad));
        let mut params = Vec::new();
        match &self.policy_kind {
            PolicyKind::Gaussian(head) => {
                for j in 0..b {
                    let p = head.params(&raw.row(j).to_vec());
                    for k in 0..samples {
                        let (u, a) = head.sample(&p, &mut self.rng);
                        for i in 0..ad {
                            actions[[j * samples + k, i]] = a[i];
                            pre[[j * samples + k, i]] = u[i];
                        }
                    }
                    params.push(p);
                }
            }
            PolicyKind::Deterministic { squash, noise } => {
                for j in 0..b {
                    let u = raw.row(j).to_vec();
                    let a0 = squash.apply(&u);
                    for k in 0..samples {
                        for i in 0..ad {
                            let mut a = a0[i];
                            if explore {
                                let half = 0.5 * (squash.high[i] - squash.low[i]);
                                a = (a + noise * half * self.rng.sample::<f64, _>(StandardNormal))
                                    .clamp(squash.low[i], squash.high[i]);
                            }
                            actions[[j * samples + k, i]] = a;
                            pre[[j * samples + k, i]] = u[i];
                        }
                    }
                }
            }
        }
        Ok((actions, pre, params))
    }

    fn repeat_rows(x: ArrayView2<f64>, times: usize) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows() * times, x.ncols()));
        for (j, row) in x.axis_iter(Axis(0)).enumerate() {
            for k in 0..times {
                out.row_mut(j * times + k).assign(&row);
            }
        }
        out
    }

    /// Mean values `Q(s_j, a_jk)` under the given critic, shaped `(B, K)`.
    fn q_values(critic: &Mlp, support: &Support, states: ArrayView2<f64>, actions: ArrayView2<f64>, k: usize) -> Result<Array2<f64>> {
        let x = critic_input(Self::repeat_rows(states, k).view(), actions);
        let logits = critic.forward_batch(x.view())?;
        let b = states.nrows();
        let mut q = Array2::zeros((b, k));
        for (r, row) in logits.axis_iter(Axis(0)).enumerate() {
            q[[r / k, r % k]] = q_mean_from_logits(&row.to_vec(), support).0;
        }
        Ok(q)
    }

    fn critic_update(&mut self, bt: &BatchTensors) -> Result<(f64, f64)> {
        let b = bt.obs.nrows();
        let m = self.config.critic.bootstrap_samples;
        let (next_actions, _, _) = self.sample_actions(true, bt.next_obs.view(), m, false)?;
        let x_next = critic_input(Self::repeat_rows(bt.next_obs.view(), m).view(), next_actions.view());
        let next_logits = self.critic.target.forward_batch(x_next.view())?;
        let atoms = self.support.atoms();
        let mut targets = Array2::zeros((b, atoms));
        for j in 0..b {
            for k in 0..m {
                let probs = softmax(&next_logits.row(j * m + k).to_vec());
                let t = nstep_target(bt.rewards[j], bt.discounts[j], &probs, &self.support)?;
                for (o, v) in targets.row_mut(j).iter_mut().zip(&t) {
                    *o += v / m as f64;
                }
            }
        }
        let x = critic_input(bt.obs.view(), bt.actions.view());
        let (loss, grads) = critic_loss_batch(&self.critic.live, x.view(), targets.view())?;
        self.check_loss("critic", loss)?;
        self.critic_opt.step(&mut self.critic.live, &grads)?;
        let q = Self::q_values(&self.critic.live, &self.support, bt.obs.view(), bt.actions.view(), 1)?;
        Ok((loss, q.mean().unwrap_or(0.0)))
    }

    fn check_loss(&self, what: &str, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "{what} loss at update {} (value {loss})",
                self.update_counter
            )));
        }
        Ok(())
    }

    fn mpo_update(&mut self, bt: &BatchTensors, stats: &mut StepStats) -> Result<()> {
        let head = self.gaussian_head()?.clone();
        let k = self.config.mpo.action_samples;
        let (actions, pre, old) = self.sample_actions(true, bt.obs.view(), k, true)?;
        let q = Self::q_values(&self.critic.target, &self.support, bt.obs.view(), actions.view(), k)?;
        let cfg = &self.config.mpo;
        let sol = mpo_solve_eta(q.view(), cfg.epsilon, cfg.eta_min, cfg.eta_max, cfg.eta_tolerance, Some(self.eta))?;
        self.eta = sol.eta;
        let weights = mpo_estep_weights(q.view(), sol.eta)?;
        let out = mpo_mstep_loss(
            &self.policy.live,
            &head,
            bt.obs.view(),
            pre.view(),
            weights.view(),
            &old,
            cfg.mstep_kl_weight,
        )?;
        self.check_loss("policy", out.loss)?;
        self.policy_opt.step(&mut self.policy.live, &out.grads)?;
        stats.policy_loss = out.loss;
        stats.eta = Some(sol.eta);
        stats.eta_boundary = sol.boundary;
        stats.estep_kl = Some(sol.kl);
        stats.mstep_kl = Some(out.kl);
        Ok(())
    }

    fn crr_update(&mut self, bt: &BatchTensors, cfg: &CrrConfig, stats: &mut StepStats) -> Result<()> {
        let head = self.gaussian_head()?.clone();
        let m = cfg.advantage_samples;
        let (sampled, _, _) = self.sample_actions(false, bt.obs.view(), m, true)?;
        let q_sampled = Self::q_values(&self.critic.live, &self.support, bt.obs.view(), sampled.view(), m)?;
        let q_data = Self::q_values(&self.critic.live, &self.support, bt.obs.view(), bt.actions.view(), 1)?;
        let weights: Vec<f64> = (0..bt.obs.nrows())
            .map(|j| crr_weight(q_data[[j, 0]], &q_sampled.row(j).to_vec(), cfg))
            .collect();
        let (loss, grads) = weighted_nll(&self.policy.live, &head, bt.obs.view(), bt.actions.view(), &weights)?;
        self.check_loss("policy", loss)?;
        self.policy_opt.step(&mut self.policy.live, &grads)?;
        stats.policy_loss = loss;
        stats.mean_weight = Some(weights.iter().sum::<f64>() / weights.len() as f64);
        Ok(())
    }

    fn d4pg_update(&mut self, bt: &BatchTensors, stats: &mut StepStats) -> Result<()> {
        let squash = match &self.policy_kind {
            PolicyKind::Deterministic { squash, .. } => squash.clone(),
            PolicyKind::Gaussian(_) => {
                return Err(Error::InvalidArgument("d4pg needs a deterministic policy".into()))
            }
        };
        let out = d4pg_policy_loss(&self.policy.live, &squash, &self.critic.live, &self.support, bt.obs.view())?;
        self.check_loss("policy", out.loss)?;
        self.policy_opt.step(&mut self.policy.live, &out.grads)?;
        stats.policy_loss = out.loss;
        Ok(())
    }

    fn bc_update(&mut self, bt: &BatchTensors, stats: &mut StepStats) -> Result<()> {
        let head = self.gaussian_head()?.clone();
        let (loss, grads) = bc_loss(&self.policy.live, &head, bt.obs.view(), bt.actions.view())?;
        self.check_loss("policy", loss)?;
        self.policy_opt.step(&mut self.policy.live, &grads)?;
        stats.policy_loss = loss;
        Ok(())
    }

    /// One learner step: scheduled reset, critic update, policy update,
    /// target rules, counter increment.
    pub fn learner_step(&mut self, batch: &Batch) -> Result<StepStats> {
        let mut stats = StepStats {
            reset: self.apply_scheduled_reset(),
            ..StepStats::default()
        };
        let bt = BatchTensors::new(batch, self.spec.obs_dim, self.spec.act_dim)?;
        if self.config.algo.uses_critic() {
            let (loss, q) = self.critic_update(&bt)?;
            stats.critic_loss = Some(loss);
            stats.q_mean = Some(q);
        }
        match self.config.algo {
            AlgoKind::Mpo => self.mpo_update(&bt, &mut stats)?,
            AlgoKind::Crr => {
                let cfg = self.config.crr.clone();
                self.crr_update(&bt, &cfg, &mut stats)?
            }
            AlgoKind::Awac => {
                let cfg = self.config.awac.crr(&self.config.crr);
                self.crr_update(&bt, &cfg, &mut stats)?
            }
            AlgoKind::D4pg => self.d4pg_update(&bt, &mut stats)?,
            AlgoKind::Bc => self.bc_update(&bt, &mut stats)?,
        }
        self.critic.after_update();
        self.policy.after_update();
        self.update_counter += 1;
        Ok(stats)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            update_counter: self.update_counter,
            scalars: vec![("eta".into(), self.eta)],
            nets: vec![
                ("policy".into(), self.policy.live.clone()),
                ("policy_target".into(), self.policy.target.clone()),
                ("critic".into(), self.critic.live.clone()),
                ("critic_target".into(), self.critic.target.clone()),
            ],
            optimizers: vec![
                ("policy".into(), self.policy_opt.clone()),
                ("critic".into(), self.critic_opt.clone()),
            ],
            rng: Some(RngState::capture(&self.rng)),
        }
    }

    /// Loads policy and critic weights (targets set equal to them) for
    /// finetuning. Optimizer state, temperature and counters stay fresh.
    pub fn load_weights(&mut self, ck: &Checkpoint) -> Result<()> {
        let load = |name: &str, current: &Mlp| -> Result<Mlp> {
            let net = ck
                .net(name)
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint has no network {name:?}")))?;
            if net.sizes() != current.sizes() || net.head() != current.head() {
                return Err(Error::shape(
                    format!("{name} with sizes {:?}", current.sizes()),
                    format!("{:?}", net.sizes()),
                ));
            }
            Ok(net.clone())
        };
        let policy = load("policy", &self.policy.live)?;
        let critic = load("critic", &self.critic.live)?;
        self.policy = TargetPair::new(policy, self.config.target_update);
        self.critic = TargetPair::new(critic, self.config.target_update);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replay::SampleSource;
    use crate::trajectory::NStepSample;

    fn spec(act_dim: usize) -> EnvSpec {
        EnvSpec {
            env_id: "test".into(),
            obs_dim: 2,
            act_dim,
            act_low: vec![-1.0; act_dim],
            act_high: vec![1.0; act_dim],
            gamma: 0.9,
            max_episode_steps: 10,
        }
    }

    fn small_config(algo: AlgoKind) -> LearnerConfig {
        LearnerConfig {
            algo,
            networks: NetworkConfig {
                policy_hidden: vec![16],
                critic_hidden: vec![16],
                activation: Activation::Tanh,
                ..NetworkConfig::default()
            },
            critic: CriticConfig {
                atoms: 21,
                ..CriticConfig::default()
            },
            mpo: MpoConfig {
                action_samples: 4,
                ..MpoConfig::default()
            },
            ..LearnerConfig::default()
        }
    }

    fn support() -> Support {
        Support::new(-3.0, 1.0, 21).unwrap()
    }

    fn random_batch(rng: &mut impl Rng, b: usize, act_dim: usize) -> Batch {
        let samples = (0..b)
            .map(|_| NStepSample {
                obs: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                action: (0..act_dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
                n_step_reward: rng.random_range(-1.0..0.0),
                bootstrap_obs: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                bootstrap_discount: if rng.random_bool(0.2) { 0.0 } else { 0.81 },
                steps_used: 2,
            })
            .collect();
        Batch::from_samples(samples, SampleSource::Offline)
    }

    #[test]
    fn every_algorithm_steps_and_counts() {
        for algo in [AlgoKind::Mpo, AlgoKind::Crr, AlgoKind::D4pg, AlgoKind::Bc, AlgoKind::Awac] {
            let mut st = LearnerState::new(small_config(algo), &spec(2), support(), 1).unwrap();
            let mut rng = crate::rng::seeded(2);
            for k in 0..5 {
                let stats = st.learner_step(&random_batch(&mut rng, 8, 2)).unwrap();
                assert_eq!(st.update_counter, k + 1);
                assert!(stats.policy_loss.is_finite());
                assert_eq!(stats.critic_loss.is_some(), algo != AlgoKind::Bc);
            }
        }
    }

    #[test]
    fn identical_state_and_batch_give_identical_parameters() {
        let mut a = LearnerState::new(small_config(AlgoKind::Mpo), &spec(1), support(), 3).unwrap();
        let mut rng = crate::rng::seeded(4);
        let batch = random_batch(&mut rng, 16, 1);
        a.learner_step(&batch).unwrap();
        let mut b = a.clone();
        a.learner_step(&batch).unwrap();
        b.learner_step(&batch).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.critic, b.critic);
        assert_eq!(a.eta, b.eta);
    }

    fn assert_fresh(st: &LearnerState, fresh: &LearnerState) {
        assert_eq!(st.policy, fresh.policy);
        assert_eq!(st.critic, fresh.critic);
        assert_eq!(st.policy_opt.first, fresh.policy_opt.first);
        assert_eq!(st.policy_opt.second, fresh.policy_opt.second);
        assert_eq!(st.policy_opt.step_count, 0);
        assert_eq!(st.critic_opt, fresh.critic_opt);
        assert_eq!(st.eta, fresh.eta);
    }

    #[test]
    fn scheduled_resets_restore_fresh_initialization() {
        let config = LearnerConfig {
            reset_interval: Some(10),
            ..small_config(AlgoKind::Mpo)
        };
        let fresh = LearnerState::new(config.clone(), &spec(1), support(), 5).unwrap();
        let mut st = fresh.clone();
        let mut rng = crate::rng::seeded(6);
        let mut resets = 0;
        while st.update_counter < 30 {
            if st.update_counter > 0 && st.update_counter % 10 == 0 {
                assert_ne!(st.policy, fresh.policy);
                assert!(st.apply_scheduled_reset());
                assert_fresh(&st, &fresh);
                resets += 1;
            }
            let stats = st.learner_step(&random_batch(&mut rng, 8, 1)).unwrap();
            assert!(!stats.reset);
        }
        assert_eq!(resets, 2);
    }

    #[test]
    fn learner_step_applies_reset_first() {
        let config = LearnerConfig {
            reset_interval: Some(3),
            ..small_config(AlgoKind::Crr)
        };
        let mut st = LearnerState::new(config, &spec(1), support(), 7).unwrap();
        let mut rng = crate::rng::seeded(8);
        let flags: Vec<bool> = (0..7)
            .map(|_| st.learner_step(&random_batch(&mut rng, 8, 1)).unwrap().reset)
            .collect();
        assert_eq!(flags, vec![false, false, false, true, false, false, true]);
    }

    #[test]
    fn checkpoint_weights_load_for_finetuning() {
        let mut a = LearnerState::new(small_config(AlgoKind::Mpo), &spec(1), support(), 9).unwrap();
        let mut rng = crate::rng::seeded(10);
        for _ in 0..3 {
            a.learner_step(&random_batch(&mut rng, 8, 1)).unwrap();
        }
        let ck = a.to_checkpoint();
        let mut b = LearnerState::new(small_config(AlgoKind::Mpo), &spec(1), support(), 11).unwrap();
        b.load_weights(&ck).unwrap();
        let round = |n: &Mlp| n.flat_params().iter().map(|v| *v as f32).collect::<Vec<_>>();
        assert_eq!(round(&b.policy.live), round(&a.policy.live));
        assert_eq!(b.policy.target, b.policy.live);
        assert_eq!(b.policy_opt.step_count, 0);
        let mut other = small_config(AlgoKind::Mpo);
        other.networks.policy_hidden = vec![8];
        let mut c = LearnerState::new(other, &spec(1), support(), 11).unwrap();
        assert!(c.load_weights(&ck).is_err());
    }

    /// One-step bandit: state irrelevant, reward -(a - a*)^2, terminal.
    #[test]
    fn crr_exp_converges_on_synthetic_bandit() {
        let best = 0.6;
        let mut config = small_config(AlgoKind::Crr);
        config.policy_optimizer.learning_rate = 1e-3;
        config.critic_optimizer.learning_rate = 1e-3;
        config.crr.beta = 0.1;
        let sup = Support::new(-3.0, 0.5, 21).unwrap();
        let mut st = LearnerState::new(config, &spec(1), sup, 12).unwrap();
        let mut rng = crate::rng::seeded(13);
        let obs = [0.2f32, -0.4];
        let mean_action = |st: &LearnerState| st.act(&obs, false, &mut crate::rng::seeded(0)).unwrap()[0];
        let start = (mean_action(&st) - best).abs();
        for _ in 0..500 {
            let samples = (0..32)
                .map(|_| {
                    let a: f32 = rng.random_range(-1.0..1.0);
                    NStepSample {
                        obs: obs.to_vec(),
                        action: vec![a],
                        n_step_reward: -((a as f64 - best).powi(2)),
                        bootstrap_obs: obs.to_vec(),
                        bootstrap_discount: 0.0,
                        steps_used: 1,
                    }
                })
                .collect();
            st.learner_step(&Batch::from_samples(samples, SampleSource::Offline)).unwrap();
        }
        let end = (mean_action(&st) - best).abs();
        assert!(end < 0.5 * start, "distance {start} -> {end}");
    }

    #[test]
    fn critic_batch_gradient_matches_central_differences() {
        let mut rng = crate::rng::seeded(14);
        let critic = Mlp::new(3, &[6], 0, Activation::Tanh, Head::Categorical { atoms: 7 }, 1.0, &mut rng);
        let x = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let mut t = Array2::from_shape_fn((4, 7), |_| rng.random::<f64>());
        for mut row in t.axis_iter_mut(Axis(0)) {
            let s = row.sum();
            row /= s;
        }
        let (_, g) = critic_loss_batch(&critic, x.view(), t.view()).unwrap();
        let params = critic.flat_params();
        let mut probe = critic.clone();
        let fd: Vec<f64> = (0..params.len())
            .map(|i| {
                let mut p = params.clone();
                p[i] += 1e-5;
                probe.set_flat_params(&p);
                let plus = critic_loss_batch(&probe, x.view(), t.view()).unwrap().0;
                p[i] -= 2e-5;
                probe.set_flat_params(&p);
                let minus = critic_loss_batch(&probe, x.view(), t.view()).unwrap().0;
                (plus - minus) / 2e-5
            })
            .collect();
        assert!(crate::net::relative_error(&g.flatten(), &fd) < 1e-4);
    }
}
