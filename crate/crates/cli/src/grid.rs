//! Grid runs: every combination of the axis values becomes one `rae train`
//! child process; the summary CSV reports each cell's final smoothed return
//! as a percentage of a scratch baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use anyhow::{anyhow, bail, Context, Result};
use rae::store::ExperimentManifest;
use serde::Deserialize;
use serde_json::Value;

use crate::config;
use crate::{final_return, manifest_path};

pub const HELP: &str = r#"Grid file (JSON):
  {
    "name": "mix",                              output folder under <workspace>/grids/
    "config": "rae.json" | { ... },             base run config (path relative to the grid file)
    "overrides": { "total_online_steps": 2000 },  dotted overrides applied to every cell
    "axes": [ { "key": "replay.p_online", "values": [0.5, 0.7] }, ... ],
    "baseline": { "manifest": "path" } | { "overrides": { "offline": [] } },
    "jobs": 1
  }
The summary CSV holds one row per cell with normalized = final_return / baseline_return * 100."#;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Axis {
    key: String,
    values: Vec<Value>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
enum Baseline {
    Manifest(PathBuf),
    Overrides(BTreeMap<String, Value>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSpec {
    name: String,
    #[serde(default)]
    config: Option<Value>,
    #[serde(default)]
    overrides: BTreeMap<String, Value>,
    axes: Vec<Axis>,
    baseline: Baseline,
    #[serde(default)]
    jobs: Option<usize>,
}

fn cells(axes: &[Axis]) -> Vec<Vec<(String, Value)>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((axis.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    out
}

fn as_override(key: &str, value: &Value) -> String {
    format!("--{key}={value}")
}

struct Cell {
    label: String,
    settings: Vec<(String, Value)>,
    config_path: PathBuf,
}

fn spawn(cell: &Cell) -> Result<Child> {
    let exe = std::env::current_exe().context("locating the rae executable")?;
    Command::new(exe)
        .arg("train")
        .arg("--config")
        .arg(&cell.config_path)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .with_context(|| format!("starting cell {}", cell.label))
}

fn collect(cell: &Cell, child: Child) -> Result<ExperimentManifest> {
    let out = child.wait_with_output()?;
    if !out.status.success() {
        bail!("{}", String::from_utf8_lossy(&out.stderr).trim());
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    let path = stdout
        .lines()
        .last()
        .ok_or_else(|| anyhow!("cell {} printed no manifest path", cell.label))?;
    Ok(ExperimentManifest::read(path.trim())?)
}

/// Runs cells with at most `jobs` child processes alive.
fn run_cells(cells: &[Cell], jobs: usize) -> Vec<Result<ExperimentManifest>> {
    let mut results: Vec<Option<Result<ExperimentManifest>>> = cells.iter().map(|_| None).collect();
    let mut running: Vec<(usize, Child)> = Vec::new();
    let mut next = 0;
    while next < cells.len() || !running.is_empty() {
        while running.len() < jobs.max(1) && next < cells.len() {
            match spawn(&cells[next]) {
                Ok(child) => running.push((next, child)),
                Err(e) => results[next] = Some(Err(e)),
            }
            next += 1;
        }
        if !running.is_empty() {
            let (i, child) = running.remove(0);
            results[i] = Some(collect(&cells[i], child));
        }
    }
    results.into_iter().map(|r| r.expect("every cell ran")).collect()
}

fn write_cell_config(dir: &Path, label: &str, tree: &Value) -> Result<PathBuf> {
    let path = dir.join(format!("{label}.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(tree)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn run(spec_path: &Path, jobs: Option<usize>) -> Result<()> {
    let text = std::fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: GridSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", spec_path.display()))?;
    if spec.axes.is_empty() || spec.axes.iter().any(|a| a.values.is_empty()) {
        bail!("grid needs at least one axis, each with at least one value");
    }
    let spec_dir = spec_path.parent().unwrap_or(Path::new("."));
    let base_file = match &spec.config {
        Some(Value::String(p)) => Some(spec_dir.join(p)),
        _ => None,
    };
    let mut base_overrides: Vec<String> = Vec::new();
    if let Some(Value::Object(inline)) = &spec.config {
        // Inline configs are flattened into overrides so their keys get checked.
        for (k, v) in inline {
            base_overrides.push(as_override(k, v));
        }
    }
    base_overrides.extend(spec.overrides.iter().map(|(k, v)| as_override(k, v)));
    let base_tree = config::assemble_tree(base_file.as_deref(), &base_overrides)?;
    let workspace = PathBuf::from(
        base_tree["workspace"]
            .as_str()
            .ok_or_else(|| anyhow!("workspace must be a string"))?,
    );
    let out_dir = workspace.join("grids").join(&spec.name);
    let cell_dir = out_dir.join("cells");
    std::fs::create_dir_all(&cell_dir).with_context(|| format!("creating {}", cell_dir.display()))?;

    let build = |label: &str, settings: &[(String, Value)]| -> Result<Cell> {
        let mut tree = base_tree.clone();
        for (k, v) in settings {
            config::set_path(&mut tree, k, v.clone())?;
        }
        tree["name"] = Value::String(format!("{}-{label}", spec.name));
        config::from_tree(tree.clone())?;
        Ok(Cell {
            label: label.to_string(),
            settings: settings.to_vec(),
            config_path: write_cell_config(&cell_dir, label, &tree)?,
        })
    };

    let jobs = jobs.or(spec.jobs).unwrap_or(1);
    let baseline = match &spec.baseline {
        Baseline::Manifest(p) => ExperimentManifest::read(spec_dir.join(p))?,
        Baseline::Overrides(o) => {
            let settings: Vec<(String, Value)> = o.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
            let cell = build("baseline", &settings)?;
            run_cells(std::slice::from_ref(&cell), 1)
                .pop()
                .expect("one result")
                .context("baseline run failed")?
        }
    };
    let baseline_return = final_return(&baseline)?.ok_or_else(|| anyhow!("baseline has no evaluations"))?;

    let grid_cells = cells(&spec.axes)
        .iter()
        .enumerate()
        .map(|(i, s)| build(&format!("cell{i}"), s))
        .collect::<Result<Vec<_>>>()?;
    let results = run_cells(&grid_cells, jobs);

    let mut csv = String::from("cell");
    for axis in &spec.axes {
        write!(csv, ",{}", axis.key)?;
    }
    csv.push_str(",experiment_id,final_return,baseline_return,normalized,status,manifest\n");
    let mut failed = Vec::new();
    for (cell, result) in grid_cells.iter().zip(results) {
        write!(csv, "{}", cell.label)?;
        for (_, v) in &cell.settings {
            let v = match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            write!(csv, ",{}", v.replace(',', ";"))?;
        }
        match result.and_then(|m| Ok((final_return(&m)?, m))) {
            Ok((Some(r), m)) => {
                // A zero baseline leaves the percentage undefined.
                let normalized = if baseline_return != 0.0 {
                    (r / baseline_return * 100.0).to_string()
                } else {
                    String::new()
                };
                writeln!(
                    csv,
                    ",{},{r},{baseline_return},{normalized},ok,{}",
                    m.experiment_id,
                    manifest_path(&m).display()
                )?
            }
            Ok((None, m)) => {
                failed.push(format!("{}: no evaluations", cell.label));
                writeln!(csv, ",{},,{baseline_return},,failed,{}", m.experiment_id, manifest_path(&m).display())?
            }
            Err(e) => {
                failed.push(format!("{}: {e:#}", cell.label));
                writeln!(csv, ",,,{baseline_return},,failed,")?
            }
        }
    }
    let csv_path = out_dir.join("summary.csv");
    std::fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    println!("{}", csv_path.display());
    if !failed.is_empty() {
        bail!(
            "{} of {} cells failed:\n  {}",
            failed.len(),
            grid_cells.len(),
            failed.join("\n  ")
        );
    }
    Ok(())
}
