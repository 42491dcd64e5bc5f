use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use super::eval::{evaluate_policy, EvalReport};
use super::metrics::{MetricRecord, MetricsLog, Phase, StepAccumulator};
use super::RunConfig;
use crate::algos::{AlgoKind, LearnerState, Policy};
use crate::critic::Support;
use crate::envs::{make_env, Environment};
use crate::error::{Error, Result};
use crate::net::Checkpoint;
use crate::replay::{
    sample_mixed, sample_union, Batch, MixConfig, NStepParams, OfflineSource, OnlineBuffer, RatioAudit,
    TransitionSource,
};
use crate::rng::{self, ChaCha8Rng, Stream};
use crate::store::{
    load_view, merge, subset, DatasetMeta, DatasetView, DatasetWriter, ExperimentManifest, ParentDataset,
};
use crate::trajectory::{EpisodeBuilder, EpisodeEnd};

/// Per-update record kept when tracing is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateTrace {
    pub update: u64,
    /// Environment steps taken before this update.
    pub online_steps: u64,
    pub online_transitions: usize,
    pub offline_transitions: usize,
    pub batch_online: usize,
}

/// One run in progress. [`Experiment::new`] validates the configuration,
/// opens the offline sources and creates the output directory;
/// [`Experiment::run`] executes the interleaved actor/learner loop.
pub struct Experiment {
    config: RunConfig,
    id: String,
    dir: PathBuf,
    parents: Vec<ParentDataset>,
    env: Box<dyn Environment>,
    learner: LearnerState,
    online: OnlineBuffer,
    offline: OfflineSource,
    mix: MixConfig,
    nstep: NStepParams,
    writer: Option<DatasetWriter>,
    log: MetricsLog,
    acc: StepAccumulator,
    audit: RatioAudit,
    actor_rng: ChaCha8Rng,
    data_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    online_steps: u64,
    training_episodes: u64,
    trace: Option<Vec<UpdateTrace>>,
}

fn open_offline(config: &RunConfig, spec: &crate::trajectory::EnvSpec) -> Result<(Vec<ParentDataset>, Option<DatasetView>)> {
    let mut parents = Vec::new();
    let mut views = Vec::new();
    for p in &config.offline {
        let path = config.resolve(&p.path);
        let view = load_view(&path)?;
        if !view.env_spec().dims_compatible(spec) {
            return Err(Error::DimensionMismatch {
                what: "environment and offline dataset".into(),
                detail: format!(
                    "{} has obs/act dims {}/{}, environment {} has {}/{}",
                    path.display(),
                    view.env_spec().obs_dim,
                    view.env_spec().act_dim,
                    spec.env_id,
                    spec.obs_dim,
                    spec.act_dim
                ),
            });
        }
        views.push(subset(&view, &p.subset)?);
        parents.push(ParentDataset {
            path,
            subset: p.subset.clone(),
        });
    }
    let merged = if views.is_empty() { None } else { Some(merge(&views)?) };
    Ok((parents, merged))
}

fn allocate_dir(config: &RunConfig) -> Result<(String, PathBuf)> {
    let root = config.experiments_dir();
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let try_create = |id: &str| -> Result<Option<PathBuf>> {
        let dir = root.join(id);
        match fs::create_dir(&dir) {
            Ok(()) => Ok(Some(dir)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Ok(None),
            Err(e) => Err(Error::io(&dir, e)),
        }
    };
    if let Some(id) = &config.experiment_id {
        return try_create(id)?
            .map(|dir| (id.clone(), dir))
            .ok_or_else(|| Error::DuplicateExperiment(id.clone()));
    }
    let base = format!("{}-s{}", config.name, config.seed);
    for n in 0u32.. {
        let id = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        if let Some(dir) = try_create(&id)? {
            return Ok((id, dir));
        }
    }
    unreachable!("unbounded id search")
}

/// Fresh learner for a run, with the critic support taken from the config or
/// the environment's value range.
fn build_learner(config: &RunConfig, env: &dyn Environment) -> Result<LearnerState> {
    let (lo, hi) = env.value_range();
    let cc = &config.learner.critic;
    let support = Support::new(cc.v_min.unwrap_or(lo), cc.v_max.unwrap_or(hi), cc.atoms)?;
    LearnerState::new(config.learner.clone(), env.spec(), support, config.seed)
}

/// The final policy of a finished run and the configuration it ran with.
pub fn policy_from_manifest(manifest: &ExperimentManifest) -> Result<(RunConfig, Policy)> {
    let config: RunConfig = serde_json::from_value(manifest.config.clone())?;
    let env = make_env(&config.env)?;
    let mut learner = build_learner(&config, env.as_ref())?;
    let ck = manifest
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("experiment {} has no checkpoint", manifest.experiment_id)))?;
    learner.load_weights(&Checkpoint::load(ck)?)?;
    Ok((config, learner.snapshot()))
}

fn abort_on_non_finite(e: Error) -> Error {
    match e {
        Error::NonFinite(msg) => Error::TrainingAborted(format!("non-finite value: {msg}")),
        other => other,
    }
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let env = make_env(&config.env)?;
        let spec = env.spec().clone();
        let (parents, view) = open_offline(&config, &spec)?;
        let offline = match &view {
            Some(v) => OfflineSource::from_view(v)?,
            None => OfflineSource::from_episodes(Vec::new()),
        };
        let mut learner = build_learner(&config, env.as_ref())?;
        if let Some(ck) = &config.checkpoint {
            learner.load_weights(&Checkpoint::load(config.resolve(ck))?)?;
        }
        let (id, dir) = allocate_dir(&config)?;
        let meta = DatasetMeta {
            config_digest: config.digest(),
            ..DatasetMeta::new(id.clone(), config.seed)
        };
        let writer = DatasetWriter::create(dir.join("produced_dataset.rae"), &spec, meta)?;
        let log = MetricsLog::create(dir.join("metrics.jsonl"))?;
        let seed = config.seed;
        Ok(Self {
            mix: config.effective_mix(),
            nstep: NStepParams {
                n: config.learner.critic.n_step,
                gamma: spec.gamma,
            },
            online: OnlineBuffer::new(config.replay.capacity),
            id,
            dir,
            parents,
            env,
            learner,
            offline,
            writer: Some(writer),
            log,
            acc: StepAccumulator::default(),
            audit: RatioAudit::default(),
            actor_rng: rng::stream(seed, Stream::Actor),
            data_rng: rng::stream(seed, Stream::Data),
            eval_rng: rng::stream(seed, Stream::Eval),
            online_steps: 0,
            training_episodes: 0,
            trace: None,
            config,
        })
    }

    /// Keeps an [`UpdateTrace`] entry for every learner step.
    pub fn record_updates(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn trace(&self) -> &[UpdateTrace] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dir(&self) -> &std::path::Path {
        &self.dir
    }

    pub fn learner(&self) -> &LearnerState {
        &self.learner
    }

    pub fn online_buffer(&self) -> &OnlineBuffer {
        &self.online
    }

    pub fn offline_source(&self) -> &OfflineSource {
        &self.offline
    }

    fn union_sampling(&self) -> bool {
        self.config.learner.algo == AlgoKind::Awac
    }

    fn sample(&mut self) -> Result<Option<Batch>> {
        let result = if self.union_sampling() {
            sample_union(
                &self.online,
                &self.offline,
                self.config.replay.batch_size,
                self.nstep,
                &mut self.data_rng,
            )
        } else {
            sample_mixed(&self.online, &self.offline, &self.mix, self.nstep, &mut self.data_rng)
        };
        match result {
            Ok(b) => Ok(Some(b)),
            Err(Error::BlockedUntilFill { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn update(&mut self, batch: &Batch) -> Result<()> {
        let expected = (!self.union_sampling()).then(|| self.mix.online_count());
        self.audit.record(batch, expected);
        if let Some(trace) = &mut self.trace {
            trace.push(UpdateTrace {
                update: self.learner.update_counter,
                online_steps: self.online_steps,
                online_transitions: self.online.transition_count(),
                offline_transitions: self.offline.transition_count(),
                batch_online: batch.online_count(),
            });
        }
        let stats = self.learner.learner_step(batch).map_err(abort_on_non_finite)?;
        self.acc.add(&stats);
        Ok(())
    }

    fn record(&mut self, phase: Phase) -> Result<()> {
        let policy = self.learner.snapshot();
        let returns = evaluate_policy(&policy, &self.config.env, self.config.eval_episodes, &mut self.eval_rng)?;
        let mut r = MetricRecord {
            phase,
            online_steps: self.online_steps,
            update_counter: self.learner.update_counter,
            training_episodes: self.training_episodes,
            eval: EvalReport::from_returns(self.online_steps, returns),
            train_return: None,
            critic_loss: None,
            policy_loss: None,
            q_mean: None,
            eta: None,
            estep_kl: None,
            mstep_kl: None,
            mean_weight: None,
            eta_boundary_hits: 0,
            resets: 0,
            online_transitions: self.online.transition_count(),
            offline_transitions: self.offline.transition_count(),
            ratio: self.audit.clone(),
        };
        self.acc.drain_into(&mut r);
        self.log.append(&r)
    }

    fn store_episode(&mut self, builder: EpisodeBuilder, end: EpisodeEnd) -> Result<()> {
        let mut episode = builder.finish(end)?.with_provenance(self.id.clone(), self.config.seed);
        let writer = self.writer.as_mut().expect("writer open while running");
        episode.collection_index = writer.append_episode(&episode)?;
        self.acc.add_episode_return(episode.undiscounted_return());
        self.online.push_episode(Arc::new(episode))?;
        self.training_episodes += 1;
        Ok(())
    }

    fn to_f32(v: &[f64]) -> Vec<f32> {
        v.iter().map(|&x| x as f32).collect()
    }

    /// Runs to completion and writes the manifest, checkpoint and sealed
    /// produced dataset.
    pub fn run(&mut self) -> Result<ExperimentManifest> {
        if self.writer.is_none() {
            return Err(Error::InvalidArgument(format!("experiment {} already ran", self.id)));
        }
        if self.config.learner.algo == AlgoKind::Awac {
            for _ in 0..self.config.learner.awac.pretrain_updates {
                let batch = self.sample()?.expect("union sampling never blocks");
                self.update(&batch)?;
            }
            self.record(Phase::Pretrain)?;
        }
        self.record(Phase::Online)?;

        let spec = self.env.spec().clone();
        let (od, ad) = (spec.obs_dim, spec.act_dim);
        let mut obs = Self::to_f32(&self.env.reset(&mut self.actor_rng));
        let mut builder = EpisodeBuilder::new(od, ad, &obs);
        let mut credit = 0.0;
        while self.online_steps < self.config.total_online_steps {
            let action: Vec<f64> = self
                .learner
                .act(&obs, true, &mut self.actor_rng)
                .map_err(abort_on_non_finite)?
                .iter()
                .zip(spec.act_low.iter().zip(&spec.act_high))
                .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
                .collect();
            let step = self.env.step(&action).map_err(abort_on_non_finite)?;
            self.online_steps += 1;
            let next = Self::to_f32(&step.obs);
            builder.push(&Self::to_f32(&action), step.reward as f32, &next)?;
            if step.terminal || step.truncated {
                let end = if step.terminal { EpisodeEnd::Terminal } else { EpisodeEnd::Truncated };
                obs = Self::to_f32(&self.env.reset(&mut self.actor_rng));
                let done = std::mem::replace(&mut builder, EpisodeBuilder::new(od, ad, &obs));
                self.store_episode(done, end)?;
            } else {
                obs = next;
            }

            credit += self.config.updates_per_env_step;
            while credit >= 1.0 {
                match self.sample()? {
                    Some(batch) => {
                        self.update(&batch)?;
                        credit -= 1.0;
                    }
                    None => {
                        credit = 0.0;
                        break;
                    }
                }
            }

            if self.online_steps % self.config.eval_every == 0 || self.online_steps == self.config.total_online_steps {
                self.record(Phase::Online)?;
            }
        }
        if !builder.is_empty() {
            // The step budget ended mid-episode; keep the partial episode so
            // the produced dataset still matches the online buffer.
            self.store_episode(builder, EpisodeEnd::Open)?;
        }
        self.finish()
    }

    fn finish(&mut self) -> Result<ExperimentManifest> {
        let writer = self.writer.take().expect("writer open while running");
        let produced = writer.seal()?;
        let ck_dir = self.dir.join("checkpoints");
        fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
        let ck_path = ck_dir.join("final.ckpt");
        self.learner.to_checkpoint().save(&ck_path)?;
        let manifest = ExperimentManifest {
            experiment_id: self.id.clone(),
            parent_datasets: self.parents.clone(),
            produced_dataset: produced.path().to_path_buf(),
            config_digest: self.config.digest(),
            seed: self.config.seed,
            created_at: produced.meta().created_at.clone(),
            config: serde_json::to_value(&self.config)?,
            metrics: Some(self.log.path().to_path_buf()),
            checkpoint: Some(ck_path),
            parent_checkpoint: self.config.checkpoint.as_ref().map(|c| self.config.resolve(c)),
        };
        manifest.write(self.dir.join("manifest.json"))?;
        Ok(manifest)
    }
}

pub fn run_experiment(config: &RunConfig) -> Result<ExperimentManifest> {
    Experiment::new(config.clone())?.run()
}

/// Iterated replay: iteration 0 learns from scratch, iteration `k` replays
/// the merged produced datasets of iterations `0..k` with freshly
/// initialized networks.
pub fn chain(base: &RunConfig, iterations: usize) -> Result<Vec<ExperimentManifest>> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("chain needs at least one iteration".into()));
    }
    let mut manifests: Vec<ExperimentManifest> = Vec::with_capacity(iterations);
    for k in 0..iterations {
        let config = RunConfig {
            name: format!("{}-iter{k}", base.name),
            experiment_id: base.experiment_id.as_ref().map(|id| format!("{id}-iter{k}")),
            offline: manifests
                .iter()
                .map(|m| ParentDataset {
                    path: m.produced_dataset.clone(),
                    subset: Default::default(),
                })
                .collect(),
            checkpoint: None,
            ..base.clone()
        };
        manifests.push(run_experiment(&config)?);
    }
    Ok(manifests)
}
