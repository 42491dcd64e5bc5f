mod config;
mod grid;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rae::store::{self, ExperimentManifest, Regime, RegimeSpec};
use rae::workflow::{self, RunSummary};

#[derive(Parser)]
#[command(name = "rae", version, about = "Replay-across-experiments reinforcement learning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and print its manifest path.
    Train(ConfigArgs),
    /// Inspect datasets and derive subset or merged views.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Run every cell of a grid file and write a normalized CSV summary.
    Grid(GridArgs),
    /// Run an iterated chain: each iteration replays all earlier datasets.
    Chain(ChainArgs),
    /// Evaluate the final policy of a finished experiment.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted overrides such as --replay.p_online=0.7.
    #[arg(value_name = "--KEY=VALUE", allow_hyphen_values = true, trailing_var_arg = true)]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ChainArgs {
    #[arg(long)]
    iterations: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GridArgs {
    /// JSON grid file.
    spec: PathBuf,
    /// Cells run concurrently as child processes.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Manifest of a finished experiment.
    manifest: PathBuf,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    /// Evaluation seed (defaults to the run's seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Print episode count and return statistics.
    Stats { path: PathBuf },
    /// Write a view descriptor selecting a data regime.
    Subset {
        path: PathBuf,
        #[arg(long)]
        regime: Regime,
        #[arg(long)]
        size: Option<usize>,
        /// Seed of the mixed regime's uniform draw.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a view descriptor of the union of datasets or views.
    Merge {
        #[arg(required = true, num_args = 1..)]
        paths: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn manifest_path(m: &ExperimentManifest) -> PathBuf {
    m.produced_dataset
        .parent()
        .map(|d| d.join("manifest.json"))
        .unwrap_or_else(|| PathBuf::from("manifest.json"))
}

pub fn final_return(m: &ExperimentManifest) -> Result<Option<f64>> {
    let config: workflow::RunConfig = serde_json::from_value(m.config.clone())?;
    let metrics = m.metrics.as_ref().context("manifest lists no metrics file")?;
    Ok(RunSummary::load(metrics, config.smoothing_window)?.final_return())
}

fn workspace() -> PathBuf {
    PathBuf::from(config::workspace_default().unwrap_or_else(|| "workspace".into()))
}

fn views_dir() -> PathBuf {
    workspace().join("views")
}

fn stem(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().split('.').next().unwrap_or("dataset").to_string())
        .unwrap_or_else(|| "dataset".into())
}

fn train(args: &ConfigArgs) -> Result<()> {
    let cfg = config::load(args.config.as_deref(), &args.overrides)?;
    let m = workflow::run_experiment(&cfg)?;
    println!("{}", manifest_path(&m).display());
    Ok(())
}

fn chain(args: &ChainArgs) -> Result<()> {
    let cfg = config::load(args.config.config.as_deref(), &args.config.overrides)?;
    let manifests = workflow::chain(&cfg, args.iterations)?;
    for m in &manifests {
        println!("{}", manifest_path(m).display());
    }
    println!("iteration,experiment_id,final_return");
    for (k, m) in manifests.iter().enumerate() {
        let r = final_return(m)?.map(|r| r.to_string()).unwrap_or_default();
        println!("{k},{},{r}", m.experiment_id);
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let m = ExperimentManifest::read(&args.manifest)?;
    let (cfg, policy) = workflow::policy_from_manifest(&m)?;
    let report = workflow::evaluate(&policy, &cfg.env, args.episodes, args.seed.unwrap_or(cfg.seed))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn dataset(cmd: &DatasetCommand) -> Result<()> {
    match cmd {
        DatasetCommand::Stats { path } => {
            let view = store::load_view(path)?;
            println!("{}", serde_json::to_string_pretty(&store::dataset_stats(&view))?);
        }
        DatasetCommand::Subset {
            path,
            regime,
            size,
            seed,
            out,
        } => {
            let spec = RegimeSpec {
                regime: *regime,
                size: *size,
                rng_seed: *seed,
            };
            let view = store::subset(&store::load_view(path)?, &spec)?;
            let out = out.clone().unwrap_or_else(|| {
                let size = size.map(|s| s.to_string()).unwrap_or_else(|| "all".into());
                views_dir().join(format!("{}-{regime:?}-{size}.view.json", stem(path)).to_lowercase())
            });
            write_view(&view, &out, vec![format!("subset {} {spec:?}", path.display())])?;
        }
        DatasetCommand::Merge { paths, out } => {
            let views = paths.iter().map(store::load_view).collect::<rae::Result<Vec<_>>>()?;
            let merged = store::merge(&views)?;
            let out = out.clone().unwrap_or_else(|| {
                let names: Vec<String> = paths.iter().map(|p| stem(p)).collect();
                views_dir().join(format!("merge-{}.view.json", names.join("+")))
            });
            let derivation = vec![format!(
                "merge {}",
                paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(" ")
            )];
            write_view(&merged, &out, derivation)?;
        }
    }
    Ok(())
}

fn write_view(view: &store::DatasetView, out: &Path, derivation: Vec<String>) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    view.to_descriptor(derivation).write(out)?;
    println!("{} ({} episodes)", out.display(), view.len());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => train(args),
        Command::Dataset { command } => dataset(command),
        Command::Grid(args) => grid::run(&args.spec, args.jobs),
        Command::Chain(args) => chain(args),
        Command::Eval(args) => eval(args),
    }
}

fn main() -> ExitCode {
    let keys = config::keys_help();
    let command = Cli::command()
        .mut_subcommand("train", |c| c.after_long_help(keys.clone()).after_help("Run with --help to list every config key."))
        .mut_subcommand("chain", |c| c.after_long_help(keys.clone()))
        .mut_subcommand("grid", |c| c.after_long_help(grid::HELP));
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
