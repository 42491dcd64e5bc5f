use std::path::Path;

use rae::envs::{EnvConfig, EnvId, PointMassConfig};
use rae::store::{self, Dataset, ExperimentManifest, ParentDataset, Regime, RegimeSpec};
use rae::workflow::{chain, read_metrics, run_experiment, Phase, RunConfig, RunSummary};

fn small(workspace: &Path, name: &str, seed: u64) -> RunConfig {
    let mut config = RunConfig {
        name: name.into(),
        workspace: workspace.to_path_buf(),
        seed,
        env: EnvConfig {
            id: EnvId::PointmassSparse,
            pointmass: PointMassConfig {
                max_episode_steps: 50,
                ..PointMassConfig::default()
            },
            ..EnvConfig::default()
        },
        total_online_steps: 300,
        updates_per_env_step: 0.5,
        eval_every: 100,
        eval_episodes: 2,
        smoothing_window: 4,
        ..RunConfig::default()
    };
    config.learner.networks.policy_hidden = vec![8];
    config.learner.networks.critic_hidden = vec![8];
    config.learner.mpo.action_samples = 4;
    config.replay.batch_size = 8;
    config.replay.min_online_fill = 16;
    config
}

fn replaying(mut config: RunConfig, parent: &ExperimentManifest, subset: RegimeSpec) -> RunConfig {
    config.offline = vec![ParentDataset {
        path: parent.produced_dataset.clone(),
        subset,
    }];
    config
}

#[test]
fn scratch_run_stores_every_training_episode() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_experiment(&small(dir.path(), "scratch", 0)).unwrap();
    let data = Dataset::open(&m.produced_dataset).unwrap();
    assert_eq!(data.episode_count(), 6);
    let steps: u64 = data.index().iter().map(|e| e.steps as u64).sum();
    assert_eq!(steps, 300);
    assert!(data.index().iter().all(|e| e.source_experiment == m.experiment_id));
    let order: Vec<u64> = data.index().iter().map(|e| e.collection_index).collect();
    assert_eq!(order, (0..6).collect::<Vec<_>>());
    assert!(m.parent_datasets.is_empty());
    assert!(m.checkpoint.as_ref().unwrap().exists());
}

#[test]
fn replay_run_links_its_parent_and_logs_online_records() {
    let dir = tempfile::tempdir().unwrap();
    let prior = run_experiment(&small(dir.path(), "prior", 0)).unwrap();
    let config = replaying(small(dir.path(), "rae", 1), &prior, RegimeSpec::new(Regime::High, 3));
    let m = run_experiment(&config).unwrap();
    assert_eq!(m.parent_datasets, config.offline);

    let records = read_metrics(m.metrics.as_ref().unwrap()).unwrap();
    assert!(records.iter().all(|r| r.phase == Phase::Online));
    let steps: Vec<u64> = records.iter().map(|r| r.online_steps).collect();
    assert_eq!(steps, vec![0, 100, 200, 300]);
    let summary = RunSummary::from_records(&records, 4);
    assert!(summary.final_return().is_some());

    // The produced dataset contains only this run's own data.
    let data = Dataset::open(&m.produced_dataset).unwrap();
    assert!(data.index().iter().all(|e| e.source_experiment == m.experiment_id));
}

#[test]
fn manifests_round_trip_and_ids_do_not_collide() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(dir.path(), "same", 0);
    let a = run_experiment(&config).unwrap();
    let b = run_experiment(&config).unwrap();
    assert_ne!(a.experiment_id, b.experiment_id);
    assert_eq!(a.config_digest, b.config_digest);
    let path = a.produced_dataset.parent().unwrap().join("manifest.json");
    assert_eq!(ExperimentManifest::read(path).unwrap(), a);
}

#[test]
fn finetuning_records_the_parent_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let prior = run_experiment(&small(dir.path(), "prior", 0)).unwrap();
    let mut config = small(dir.path(), "finetune", 0);
    config.checkpoint = prior.checkpoint.clone();
    let m = run_experiment(&config).unwrap();
    assert_eq!(m.parent_checkpoint, prior.checkpoint);
}

#[test]
fn chain_iterations_replay_all_earlier_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let runs = chain(&small(dir.path(), "chain", 2), 3).unwrap();
    assert_eq!(runs.len(), 3);
    for (k, m) in runs.iter().enumerate() {
        let parents: Vec<_> = m.parent_datasets.iter().map(|p| p.path.clone()).collect();
        let earlier: Vec<_> = runs[..k].iter().map(|r| r.produced_dataset.clone()).collect();
        assert_eq!(parents, earlier);
        assert_eq!(m.seed, 2);
    }
}

#[test]
fn subset_views_survive_a_descriptor_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let prior = run_experiment(&small(dir.path(), "prior", 0)).unwrap();
    let full = Dataset::open(&prior.produced_dataset).unwrap().view();
    let low = store::subset(&full, &RegimeSpec::new(Regime::Low, 2)).unwrap();
    let path = dir.path().join("low.view.json");
    low.to_descriptor(vec!["low 2".into()]).write(&path).unwrap();
    let back = store::load_view(&path).unwrap();
    let picked: Vec<u64> = back.index_entries().map(|e| e.collection_index).collect();
    assert_eq!(picked, vec![0, 1]);
    assert_eq!(back.load_episodes().unwrap(), low.load_episodes().unwrap());
    assert!(store::subset(&full, &RegimeSpec::new(Regime::Low, 7)).is_err());
}
