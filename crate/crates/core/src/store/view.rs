//! Virtual views over sealed datasets: subsets and merges are index filters,
//! never copies of episode data.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::format::MAGIC;
use super::{Dataset, IndexEntry};
use crate::error::{Error, Result};
use crate::rng;
use crate::trajectory::{EnvSpec, Episode};

/// Dataset regimes. `High` and `Low` select by collection recency (end and
/// start of training); `Mixed` samples uniformly without replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[serde(alias = "high_return")]
    High,
    #[serde(alias = "mixed_return")]
    Mixed,
    #[serde(alias = "low_return")]
    Low,
    All,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "high" | "high_return" => Ok(Regime::High),
            "mixed" | "mixed_return" => Ok(Regime::Mixed),
            "low" | "low_return" => Ok(Regime::Low),
            "all" => Ok(Regime::All),
            other => Err(Error::InvalidArgument(format!(
                "unknown regime {other:?} (expected high, mixed, low or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSpec {
    pub regime: Regime,
    /// Number of episodes; `None` keeps every episode.
    #[serde(default)]
    pub size: Option<usize>,
    /// Only used by `Mixed`.
    #[serde(default)]
    pub rng_seed: u64,
}

impl RegimeSpec {
    pub fn all() -> Self {
        Self {
            regime: Regime::All,
            size: None,
            rng_seed: 0,
        }
    }

    pub fn new(regime: Regime, size: usize) -> Self {
        Self {
            regime,
            size: Some(size),
            rng_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }
}

impl Default for RegimeSpec {
    fn default() -> Self {
        Self::all()
    }
}

/// An ordered selection of episodes from one or more sealed datasets.
#[derive(Debug, Clone)]
pub struct DatasetView {
    env_spec: EnvSpec,
    datasets: Vec<Arc<Dataset>>,
    entries: Vec<(usize, usize)>,
}

impl DatasetView {
    pub fn full(dataset: Dataset) -> Self {
        let entries = (0..dataset.episode_count()).map(|p| (0, p)).collect();
        Self {
            env_spec: dataset.env_spec().clone(),
            datasets: vec![Arc::new(dataset)],
            entries,
        }
    }

    /// A view containing no episodes.
    pub fn empty(env_spec: EnvSpec) -> Self {
        Self {
            env_spec,
            datasets: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn env_spec(&self) -> &EnvSpec {
        &self.env_spec
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn datasets(&self) -> &[Arc<Dataset>] {
        &self.datasets
    }

    pub fn index_entries(&self) -> impl Iterator<Item = &IndexEntry> + '_ {
        self.entries
            .iter()
            .map(move |&(d, p)| &self.datasets[d].index()[p])
    }

    /// `(dataset path, position)` for every episode of the view.
    pub fn episode_refs(&self) -> impl Iterator<Item = (&Path, usize)> + '_ {
        self.entries
            .iter()
            .map(move |&(d, p)| (self.datasets[d].path(), p))
    }

    fn with_entries(&self, entries: Vec<(usize, usize)>) -> Self {
        Self {
            env_spec: self.env_spec.clone(),
            datasets: self.datasets.clone(),
            entries,
        }
    }

    /// Decodes every episode in view order, reading each dataset file once.
    pub fn load_episodes(&self) -> Result<Vec<Episode>> {
        let mut per_dataset: Vec<Vec<usize>> = vec![Vec::new(); self.datasets.len()];
        for &(d, p) in &self.entries {
            per_dataset[d].push(p);
        }
        let mut decoded: Vec<HashMap<usize, Episode>> = Vec::with_capacity(self.datasets.len());
        for (ds, positions) in self.datasets.iter().zip(&per_dataset) {
            let episodes = if positions.is_empty() {
                Vec::new()
            } else {
                ds.read_episodes(positions)?
            };
            decoded.push(positions.iter().copied().zip(episodes).collect());
        }
        Ok(self
            .entries
            .iter()
            .map(|&(d, p)| decoded[d][&p].clone())
            .collect())
    }

    pub fn to_descriptor(&self, derivation: Vec<String>) -> ViewDescriptor {
        ViewDescriptor {
            kind: VIEW_KIND.to_string(),
            version: 1,
            env_spec: self.env_spec.clone(),
            datasets: self
                .datasets
                .iter()
                .map(|d| ViewSource {
                    path: d.path().to_path_buf(),
                })
                .collect(),
            episodes: self.entries.clone(),
            derivation,
        }
    }

    pub fn from_descriptor(desc: &ViewDescriptor) -> Result<Self> {
        if desc.kind != VIEW_KIND {
            return Err(Error::InvalidArgument(format!(
                "not a view descriptor (kind {:?})",
                desc.kind
            )));
        }
        let datasets = desc
            .datasets
            .iter()
            .map(|s| Dataset::open(&s.path).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        for ds in &datasets {
            if !ds.env_spec().dims_compatible(&desc.env_spec) {
                return Err(Error::DimensionMismatch {
                    what: "view and dataset".into(),
                    detail: ds.path().display().to_string(),
                });
            }
        }
        for &(d, p) in &desc.episodes {
            if datasets.get(d).is_none_or(|ds| p >= ds.episode_count()) {
                return Err(Error::InvalidArgument(format!(
                    "view references missing episode ({d}, {p})"
                )));
            }
        }
        Ok(Self {
            env_spec: desc.env_spec.clone(),
            datasets,
            entries: desc.episodes.clone(),
        })
    }
}

const VIEW_KIND: &str = "rae-view";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSource {
    pub path: PathBuf,
}

/// On-disk form of a [`DatasetView`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewDescriptor {
    pub kind: String,
    pub version: u32,
    pub env_spec: EnvSpec,
    pub datasets: Vec<ViewSource>,
    /// `(dataset slot, episode position)` pairs in view order.
    pub episodes: Vec<(usize, usize)>,
    /// Human-readable record of the operations that produced the view.
    #[serde(default)]
    pub derivation: Vec<String>,
}

impl ViewDescriptor {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        super::write_json_atomic(path.as_ref(), self)
    }
}

/// Opens either a `.rae` dataset (as a full view) or a view descriptor.
pub fn load_view(path: impl AsRef<Path>) -> Result<DatasetView> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    if bytes.starts_with(MAGIC) {
        Ok(Dataset::open(path)?.view())
    } else {
        let desc: ViewDescriptor = serde_json::from_slice(&bytes)?;
        DatasetView::from_descriptor(&desc)
    }
}

/// Applies a data regime to a view.
pub fn subset(view: &DatasetView, spec: &RegimeSpec) -> Result<DatasetView> {
    let count = view.len();
    if spec.regime == Regime::All {
        return match spec.size {
            None => Ok(view.clone()),
            Some(size) => Err(Error::InvalidArgument(format!(
                "regime all takes no size (got {size})"
            ))),
        };
    }
    let size = spec.size.unwrap_or(count);
    if size == 0 {
        return Err(Error::InvalidArgument("subset size must be positive".into()));
    }
    if size > count {
        return Err(Error::SubsetTooLarge { size, count });
    }
    let mut order: Vec<usize> = (0..count).collect();
    // Stable sort: ties in collection index keep view order.
    let collection: Vec<u64> = view.index_entries().map(|e| e.collection_index).collect();
    order.sort_by_key(|&i| collection[i]);
    let chosen: Vec<usize> = match spec.regime {
        Regime::Low => order[..size].to_vec(),
        Regime::High => order[count - size..].to_vec(),
        Regime::Mixed => {
            let mut rng = rng::seeded(spec.rng_seed);
            let mut picked = rand::seq::index::sample(&mut rng, count, size).into_vec();
            picked.sort_unstable();
            picked
        }
        Regime::All => unreachable!("handled above"),
    };
    Ok(view.with_entries(chosen.into_iter().map(|i| view.entries[i]).collect()))
}

/// Union of views. Provenance is carried per episode by the underlying index.
pub fn merge(views: &[DatasetView]) -> Result<DatasetView> {
    let first = views
        .first()
        .ok_or_else(|| Error::InvalidArgument("merge needs at least one view".into()))?;
    let mut datasets: Vec<Arc<Dataset>> = Vec::new();
    let mut slot_of: HashMap<PathBuf, usize> = HashMap::new();
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    let mut entries = Vec::new();
    for view in views {
        if !view.env_spec.dims_compatible(&first.env_spec) {
            return Err(Error::DimensionMismatch {
                what: "merged datasets".into(),
                detail: format!(
                    "{} ({}x{}) vs {} ({}x{})",
                    first.env_spec.env_id,
                    first.env_spec.obs_dim,
                    first.env_spec.act_dim,
                    view.env_spec.env_id,
                    view.env_spec.obs_dim,
                    view.env_spec.act_dim
                ),
            });
        }
        let mut remap = Vec::with_capacity(view.datasets.len());
        for ds in &view.datasets {
            let key = fs::canonicalize(ds.path()).unwrap_or_else(|_| ds.path().to_path_buf());
            let slot = *slot_of.entry(key).or_insert_with(|| {
                datasets.push(ds.clone());
                datasets.len() - 1
            });
            remap.push(slot);
        }
        for &(d, p) in &view.entries {
            let entry = (remap[d], p);
            if seen.insert(entry) {
                entries.push(entry);
            }
        }
    }
    Ok(DatasetView {
        env_spec: first.env_spec.clone(),
        datasets,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    pub total_steps: u64,
    pub mean_return: Option<f64>,
    pub min_return: Option<f64>,
    pub max_return: Option<f64>,
    pub per_source: BTreeMap<String, usize>,
}

/// Summary statistics from the index alone.
pub fn dataset_stats(view: &DatasetView) -> DatasetStats {
    let mut stats = DatasetStats {
        count: 0,
        total_steps: 0,
        mean_return: None,
        min_return: None,
        max_return: None,
        per_source: BTreeMap::new(),
    };
    let mut sum = 0.0;
    for e in view.index_entries() {
        stats.count += 1;
        stats.total_steps += e.steps as u64;
        sum += e.undiscounted_return;
        let r = e.undiscounted_return;
        stats.min_return = Some(stats.min_return.map_or(r, |m: f64| m.min(r)));
        stats.max_return = Some(stats.max_return.map_or(r, |m: f64| m.max(r)));
        *stats.per_source.entry(e.source_experiment.clone()).or_default() += 1;
    }
    if stats.count > 0 {
        stats.mean_return = Some(sum / stats.count as f64);
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{DatasetMeta, DatasetWriter};
    use crate::trajectory::{EpisodeEnd, Episode};

    fn spec() -> EnvSpec {
        EnvSpec {
            env_id: "test-env".into(),
            obs_dim: 2,
            act_dim: 1,
            act_low: vec![-1.0],
            act_high: vec![1.0],
            gamma: 0.9,
            max_episode_steps: 10,
        }
    }

    fn episode_with_return(ret: f32, experiment: &str) -> Episode {
        Episode::from_parts(2, 1, vec![0.0; 6], vec![0.0; 2], vec![ret, 0.0], EpisodeEnd::Truncated)
            .unwrap()
            .with_provenance(experiment, 3)
    }

    fn build(dir: &Path, name: &str, returns: &[f32]) -> Dataset {
        let mut w = DatasetWriter::create(dir.join(name), &spec(), DatasetMeta::new(name, 0)).unwrap();
        for &r in returns {
            w.append_episode(&episode_with_return(r, name)).unwrap();
        }
        w.seal().unwrap()
    }

    fn collection_indices(view: &DatasetView) -> Vec<u64> {
        view.index_entries().map(|e| e.collection_index).collect()
    }

    #[test]
    fn recency_regimes() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build(dir.path(), "d.rae", &[0.0; 10]);
        let view = ds.view();
        let high = subset(&view, &RegimeSpec::new(Regime::High, 3)).unwrap();
        assert_eq!(collection_indices(&high), vec![7, 8, 9]);
        let low = subset(&view, &RegimeSpec::new(Regime::Low, 3)).unwrap();
        assert_eq!(collection_indices(&low), vec![0, 1, 2]);
        let mut mixed = collection_indices(&subset(&view, &RegimeSpec::new(Regime::Mixed, 10)).unwrap());
        mixed.sort();
        assert_eq!(mixed, (0..10).collect::<Vec<_>>());
        assert_eq!(collection_indices(&subset(&view, &RegimeSpec::all()).unwrap()).len(), 10);
    }

    #[test]
    fn mixed_is_seed_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build(dir.path(), "d.rae", &[0.0; 50]);
        let a = subset(&ds.view(), &RegimeSpec::new(Regime::Mixed, 12).with_seed(9)).unwrap();
        let b = subset(&ds.view(), &RegimeSpec::new(Regime::Mixed, 12).with_seed(9)).unwrap();
        let c = subset(&ds.view(), &RegimeSpec::new(Regime::Mixed, 12).with_seed(10)).unwrap();
        assert_eq!(collection_indices(&a), collection_indices(&b));
        assert_ne!(collection_indices(&a), collection_indices(&c));
    }

    #[test]
    fn high_and_low_partition_the_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build(dir.path(), "d.rae", &[0.0; 12]);
        for k in 1..12 {
            let mut union = collection_indices(&subset(&ds.view(), &RegimeSpec::new(Regime::High, k)).unwrap());
            union.extend(collection_indices(
                &subset(&ds.view(), &RegimeSpec::new(Regime::Low, 12 - k)).unwrap(),
            ));
            union.sort();
            assert_eq!(union, (0..12).collect::<Vec<_>>());
        }
    }

    #[test]
    fn oversized_subset_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build(dir.path(), "d.rae", &[0.0; 4]);
        assert!(matches!(
            subset(&ds.view(), &RegimeSpec::new(Regime::Low, 5)),
            Err(Error::SubsetTooLarge { size: 5, count: 4 })
        ));
    }

    #[test]
    fn merge_examples() {
        let dir = tempfile::tempdir().unwrap();
        let a = build(dir.path(), "a.rae", &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = build(dir.path(), "b.rae", &[1.0, 1.0, 6.0, 7.0, 8.0]);
        let one = merge(&[a.view()]).unwrap();
        assert_eq!(
            one.episode_refs().collect::<Vec<_>>(),
            a.view().episode_refs().collect::<Vec<_>>()
        );
        let both = merge(&[a.view(), b.view()]).unwrap();
        assert_eq!(both.len(), 10);
        let stats = dataset_stats(&both);
        assert_eq!(stats.per_source.get("a.rae"), Some(&5));
        assert_eq!(stats.per_source.get("b.rae"), Some(&5));

        // Histogram of the union equals the sum of the input histograms.
        let hist = |v: &DatasetView| {
            let mut h: BTreeMap<i64, usize> = BTreeMap::new();
            for e in v.index_entries() {
                *h.entry(e.undiscounted_return.round() as i64).or_default() += 1;
            }
            h
        };
        let mut expected = hist(&a.view());
        for (k, n) in hist(&b.view()) {
            *expected.entry(k).or_default() += n;
        }
        assert_eq!(hist(&subset(&both, &RegimeSpec::all()).unwrap()), expected);
    }

    #[test]
    fn merge_rejects_incompatible_specs() {
        let dir = tempfile::tempdir().unwrap();
        let a = build(dir.path(), "a.rae", &[1.0]);
        let mut other = spec();
        other.obs_dim = 3;
        let w = DatasetWriter::create(dir.path().join("c.rae"), &other, DatasetMeta::new("c", 0)).unwrap();
        let c = w.seal().unwrap();
        assert!(matches!(
            merge(&[a.view(), c.view()]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn stats_examples() {
        let dir = tempfile::tempdir().unwrap();
        let empty = build(dir.path(), "e.rae", &[]);
        let s = dataset_stats(&empty.view());
        assert_eq!(s.count, 0);
        assert_eq!(s.mean_return, None);
        let ds = build(dir.path(), "d.rae", &[1.0, 2.0, 3.0]);
        let s = dataset_stats(&ds.view());
        assert_eq!(s.mean_return, Some(2.0));
        assert_eq!(s.min_return, Some(1.0));
        assert_eq!(s.max_return, Some(3.0));
    }

    #[test]
    fn descriptor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = build(dir.path(), "a.rae", &[1.0, 2.0, 3.0]);
        let b = build(dir.path(), "b.rae", &[4.0, 5.0]);
        let view = subset(&merge(&[a.view(), b.view()]).unwrap(), &RegimeSpec::new(Regime::High, 3)).unwrap();
        let path = dir.path().join("v.json");
        view.to_descriptor(vec!["high 3".into()]).write(&path).unwrap();
        let back = load_view(&path).unwrap();
        assert_eq!(
            back.episode_refs().collect::<Vec<_>>(),
            view.episode_refs().collect::<Vec<_>>()
        );
        let eps = back.load_episodes().unwrap();
        assert_eq!(eps.len(), 3);
        assert!(load_view(dir.path().join("a.rae")).unwrap().len() == 3);
        assert!(matches!(load_view(dir.path().join("nope.rae")), Err(Error::Missing(_))));
    }
}
