//! Persistent episode storage.
//!
//! A dataset is a pair of files: the binary episode file (`*.rae`, see
//! [`format`]) and a JSON sidecar (`*.rae.json`) holding the per-episode index
//! and lineage metadata. Statistics and subsetting only ever read the sidecar.
//! A dataset is written by one [`DatasetWriter`] and becomes readable once it is
//! sealed; sealed datasets are never modified.

pub mod format;
mod manifest;
mod view;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use manifest::{ExperimentManifest, ParentDataset};
pub use view::{
    dataset_stats, load_view, merge, subset, DatasetStats, DatasetView, Regime, RegimeSpec,
    ViewDescriptor, ViewSource,
};

use crate::error::{Error, Result};
use crate::trajectory::{EnvSpec, Episode, EpisodeEnd};
use format::{encode_episode, FileHeader, FORMAT_VERSION};

/// One record of the sidecar index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub offset: u64,
    pub length: u64,
    pub steps: u32,
    pub undiscounted_return: f64,
    pub source_experiment: String,
    pub source_seed: u64,
    pub collection_index: u64,
    pub end: EpisodeEnd,
}

/// Lineage fields recorded alongside the index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub experiment_id: String,
    pub seed: u64,
    #[serde(default)]
    pub config_digest: String,
    pub created_at: String,
}

impl DatasetMeta {
    pub fn new(experiment_id: impl Into<String>, seed: u64) -> Self {
        Self {
            experiment_id: experiment_id.into(),
            seed,
            config_digest: String::new(),
            created_at: chrono::Utc::now().to_rfc3339(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    format_version: u16,
    sealed: bool,
    env_spec: EnvSpec,
    meta: DatasetMeta,
    episodes: Vec<IndexEntry>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".json");
    PathBuf::from(name)
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let bytes = serde_json::to_vec_pretty(value)?;
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Single writer for a new dataset file.
pub struct DatasetWriter {
    path: PathBuf,
    file: BufWriter<File>,
    offset: u64,
    sidecar: Sidecar,
    scratch: Vec<u8>,
}

impl DatasetWriter {
    /// Creates a new dataset. Refuses to overwrite an existing file.
    pub fn create(path: impl AsRef<Path>, env_spec: &EnvSpec, meta: DatasetMeta) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        env_spec.validate()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut file = BufWriter::new(file);
        let header = FileHeader {
            version: FORMAT_VERSION,
            obs_dim: env_spec.obs_dim as u32,
            act_dim: env_spec.act_dim as u32,
            gamma: env_spec.gamma,
            env_id: env_spec.env_id.clone(),
        }
        .encode();
        file.write_all(&header).map_err(|e| Error::io(&path, e))?;
        let sidecar = Sidecar {
            format_version: FORMAT_VERSION,
            sealed: false,
            env_spec: env_spec.clone(),
            meta,
            episodes: Vec::new(),
        };
        write_json_atomic(&sidecar_path(&path), &sidecar)?;
        Ok(Self {
            path,
            file,
            offset: header.len() as u64,
            sidecar,
            scratch: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn episode_count(&self) -> usize {
        self.sidecar.episodes.len()
    }

    /// Appends an episode and returns the collection index assigned to it.
    /// The episode's own provenance fields are kept in the index.
    pub fn append_episode(&mut self, episode: &Episode) -> Result<u64> {
        let spec = &self.sidecar.env_spec;
        if episode.obs_dim() != spec.obs_dim || episode.act_dim() != spec.act_dim {
            return Err(Error::DimensionMismatch {
                what: "episode and dataset".into(),
                detail: format!(
                    "episode obs/act dims {}/{}, dataset {}/{}",
                    episode.obs_dim(),
                    episode.act_dim(),
                    spec.obs_dim,
                    spec.act_dim
                ),
            });
        }
        let collection_index = self.sidecar.episodes.len() as u64;
        self.scratch.clear();
        encode_episode(episode, collection_index, &mut self.scratch);
        self.file
            .write_all(&self.scratch)
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        self.sidecar.episodes.push(IndexEntry {
            offset: self.offset,
            length: self.scratch.len() as u64,
            steps: episode.len() as u32,
            undiscounted_return: episode.undiscounted_return(),
            source_experiment: episode.source_experiment.clone(),
            source_seed: episode.source_seed,
            collection_index,
            end: episode.end(),
        });
        self.offset += self.scratch.len() as u64;
        Ok(collection_index)
    }

    /// Flushes everything to disk, writes the sealed sidecar and reopens the
    /// dataset read-only.
    pub fn seal(mut self) -> Result<Dataset> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        self.file
            .get_ref()
            .sync_all()
            .map_err(|e| Error::io(&self.path, e))?;
        self.sidecar.sealed = true;
        write_json_atomic(&sidecar_path(&self.path), &self.sidecar)?;
        Ok(Dataset {
            path: self.path,
            env_spec: self.sidecar.env_spec,
            meta: self.sidecar.meta,
            index: self.sidecar.episodes,
        })
    }
}

/// Read-only handle to a sealed dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    path: PathBuf,
    env_spec: EnvSpec,
    meta: DatasetMeta,
    index: Vec<IndexEntry>,
}

impl Dataset {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if !path.exists() {
            return Err(Error::Missing(path));
        }
        let side = sidecar_path(&path);
        let raw = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: Sidecar = serde_json::from_slice(&raw)?;
        if !sidecar.sealed {
            return Err(Error::NotSealed(path));
        }
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        if file_len < 26 {
            return Err(Error::Corrupt {
                path,
                reason: "truncated header".into(),
            });
        }
        let mut head = vec![0u8; 26];
        file.read_exact(&mut head).map_err(|e| Error::io(&path, e))?;
        let id_len = u32::from_le_bytes(head[22..26].try_into().expect("4 bytes")) as usize;
        if 26 + id_len as u64 > file_len {
            return Err(Error::Corrupt {
                path,
                reason: "truncated env id".into(),
            });
        }
        head.resize(26 + id_len, 0);
        file.read_exact(&mut head[26..]).map_err(|e| Error::io(&path, e))?;
        let (header, header_len) = FileHeader::decode(&head, &path)?;
        let spec = &sidecar.env_spec;
        let corrupt = |reason: String| Error::Corrupt {
            path: path.clone(),
            reason,
        };
        if header.obs_dim as usize != spec.obs_dim
            || header.act_dim as usize != spec.act_dim
            || header.gamma != spec.gamma
            || header.env_id != spec.env_id
        {
            return Err(corrupt("file header disagrees with sidecar env spec".into()));
        }
        let mut expected_offset = header_len as u64;
        for (k, entry) in sidecar.episodes.iter().enumerate() {
            let len =
                format::encoded_episode_len(entry.steps as usize, spec.obs_dim, spec.act_dim) as u64;
            if entry.offset != expected_offset || entry.length != len {
                return Err(corrupt(format!("index entry {k} does not match the record layout")));
            }
            expected_offset += len;
        }
        if expected_offset != file_len {
            return Err(corrupt(format!(
                "index covers {expected_offset} bytes, file has {file_len}"
            )));
        }
        Ok(Self {
            path,
            env_spec: sidecar.env_spec,
            meta: sidecar.meta,
            index: sidecar.episodes,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn env_spec(&self) -> &EnvSpec {
        &self.env_spec
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn index(&self) -> &[IndexEntry] {
        &self.index
    }

    pub fn episode_count(&self) -> usize {
        self.index.len()
    }

    fn finish(&self, mut episode: Episode, pos: usize) -> Episode {
        let entry = &self.index[pos];
        episode.source_experiment = entry.source_experiment.clone();
        episode.source_seed = entry.source_seed;
        episode
    }

    /// Decodes the episode at index position `pos`.
    pub fn read_episode(&self, pos: usize) -> Result<Episode> {
        let entry = self
            .index
            .get(pos)
            .ok_or_else(|| Error::InvalidArgument(format!("no episode at position {pos}")))?;
        let mut file = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        file.seek(SeekFrom::Start(entry.offset))
            .map_err(|e| Error::io(&self.path, e))?;
        let mut buf = vec![0u8; entry.length as usize];
        file.read_exact(&mut buf).map_err(|e| Error::io(&self.path, e))?;
        let ep = format::decode_episode(&buf, self.env_spec.obs_dim, self.env_spec.act_dim, &self.path)?;
        Ok(self.finish(ep, pos))
    }

    /// Decodes the episodes at `positions` with a single file read.
    pub fn read_episodes(&self, positions: &[usize]) -> Result<Vec<Episode>> {
        let bytes = fs::read(&self.path).map_err(|e| Error::io(&self.path, e))?;
        positions
            .iter()
            .map(|&pos| {
                let entry = self.index.get(pos).ok_or_else(|| {
                    Error::InvalidArgument(format!("no episode at position {pos}"))
                })?;
                let start = entry.offset as usize;
                let record = &bytes[start..start + entry.length as usize];
                let ep = format::decode_episode(
                    record,
                    self.env_spec.obs_dim,
                    self.env_spec.act_dim,
                    &self.path,
                )?;
                Ok(self.finish(ep, pos))
            })
            .collect()
    }

    pub fn read_all(&self) -> Result<Vec<Episode>> {
        let positions: Vec<usize> = (0..self.index.len()).collect();
        self.read_episodes(&positions)
    }

    pub fn view(&self) -> DatasetView {
        DatasetView::full(self.clone())
    }
}

/// Copies every episode of `source` into a new dataset at `dest`.
pub fn rewrite(source: &Dataset, dest: impl AsRef<Path>) -> Result<Dataset> {
    let mut writer = DatasetWriter::create(dest, source.env_spec(), source.meta().clone())?;
    for ep in source.read_all()? {
        writer.append_episode(&ep)?;
    }
    writer.seal()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::tests::random_episode;

    pub(crate) fn spec() -> EnvSpec {
        EnvSpec {
            env_id: "test-env".into(),
            obs_dim: 3,
            act_dim: 2,
            act_low: vec![-1.0; 2],
            act_high: vec![1.0; 2],
            gamma: 0.99,
            max_episode_steps: 50,
        }
    }

    #[test]
    fn append_assigns_monotone_indices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.rae");
        let mut w = DatasetWriter::create(&path, &spec(), DatasetMeta::new("exp", 1)).unwrap();
        let mut rng = crate::rng::seeded(0);
        for expected in 0..3u64 {
            let ep = random_episode(&mut rng, 5, 3, 2, EpisodeEnd::Truncated);
            assert_eq!(w.append_episode(&ep).unwrap(), expected);
        }
        let ds = w.seal().unwrap();
        let indices: Vec<u64> = ds.index().iter().map(|e| e.collection_index).collect();
        assert_eq!(indices, vec![0, 1, 2]);
    }

    #[test]
    fn first_append_gets_index_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.rae");
        let mut w = DatasetWriter::create(&path, &spec(), DatasetMeta::new("exp", 1)).unwrap();
        let mut rng = crate::rng::seeded(0);
        w.append_episode(&random_episode(&mut rng, 2, 3, 2, EpisodeEnd::Open))
            .unwrap();
        let ds = w.seal().unwrap();
        assert_eq!(ds.episode_count(), 1);
        assert_eq!(ds.index()[0].collection_index, 0);
    }

    #[test]
    fn reopened_episode_matches_every_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.rae");
        let mut w = DatasetWriter::create(&path, &spec(), DatasetMeta::new("exp", 1)).unwrap();
        let mut rng = crate::rng::seeded(4);
        let ep = random_episode(&mut rng, 7, 3, 2, EpisodeEnd::Terminal).with_provenance("src-a", 42);
        w.append_episode(&ep).unwrap();
        w.seal().unwrap();
        let ds = Dataset::open(&path).unwrap();
        let back = ds.read_episode(0).unwrap();
        assert_eq!(back.observations(), ep.observations());
        assert_eq!(back.actions(), ep.actions());
        assert_eq!(back.rewards(), ep.rewards());
        assert_eq!(back.end(), ep.end());
        assert_eq!(back.source_experiment, "src-a");
        assert_eq!(back.source_seed, 42);
        assert_eq!(back.collection_index, 0);
        assert_eq!(ds.index()[0].undiscounted_return, ep.undiscounted_return());
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = DatasetWriter::create(dir.path().join("d.rae"), &spec(), DatasetMeta::new("e", 0))
            .unwrap();
        let mut rng = crate::rng::seeded(0);
        let ep = random_episode(&mut rng, 3, 4, 2, EpisodeEnd::Open);
        assert!(matches!(
            w.append_episode(&ep),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn unsealed_dataset_cannot_be_opened() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.rae");
        let _w = DatasetWriter::create(&path, &spec(), DatasetMeta::new("e", 0)).unwrap();
        assert!(matches!(Dataset::open(&path), Err(Error::NotSealed(_))));
    }

    #[test]
    fn refuses_to_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.rae");
        DatasetWriter::create(&path, &spec(), DatasetMeta::new("e", 0))
            .unwrap()
            .seal()
            .unwrap();
        assert!(DatasetWriter::create(&path, &spec(), DatasetMeta::new("e", 0)).is_err());
    }

    #[test]
    fn truncated_file_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.rae");
        let mut w = DatasetWriter::create(&path, &spec(), DatasetMeta::new("e", 0)).unwrap();
        let mut rng = crate::rng::seeded(0);
        w.append_episode(&random_episode(&mut rng, 3, 3, 2, EpisodeEnd::Open))
            .unwrap();
        w.seal().unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(Dataset::open(&path), Err(Error::Corrupt { .. })));
    }
}
