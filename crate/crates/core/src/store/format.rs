//! Little-endian binary layout of `.rae` episode files.
//!
//! ```text
//! file header : "RAE1" | version u16 | obs_dim u32 | act_dim u32 | gamma f64
//!               | env_id length u32 | env_id UTF-8 bytes
//! per episode : collection_index u64 | steps T u32 | flags u8 (bit0 terminal, bit1 truncated)
//!               | observations f32[T+1][obs_dim] | actions f32[T][act_dim] | rewards f32[T]
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::trajectory::{Episode, EpisodeEnd};

pub const MAGIC: &[u8; 4] = b"RAE1";
pub const FORMAT_VERSION: u16 = 1;
pub const EPISODE_HEADER_LEN: usize = 8 + 4 + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FileHeader {
    pub version: u16,
    pub obs_dim: u32,
    pub act_dim: u32,
    pub gamma: f64,
    pub env_id: String,
}

impl FileHeader {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(26 + self.env_id.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.obs_dim.to_le_bytes());
        out.extend_from_slice(&self.act_dim.to_le_bytes());
        out.extend_from_slice(&self.gamma.to_le_bytes());
        out.extend_from_slice(&(self.env_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.env_id.as_bytes());
        out
    }

    /// Parses the header and returns it with its encoded length.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<(Self, usize)> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = Reader::new(bytes);
        let magic = r.take(4).ok_or_else(|| corrupt("truncated header"))?;
        if magic != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = r.u16().ok_or_else(|| corrupt("truncated header"))?;
        if version != FORMAT_VERSION {
            return Err(corrupt(&format!("unsupported format version {version}")));
        }
        let obs_dim = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        let act_dim = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        let gamma = r.f64().ok_or_else(|| corrupt("truncated header"))?;
        let id_len = r.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
        let id = r.take(id_len).ok_or_else(|| corrupt("truncated env id"))?;
        let env_id = String::from_utf8(id.to_vec()).map_err(|_| corrupt("env id is not UTF-8"))?;
        Ok((
            Self {
                version,
                obs_dim,
                act_dim,
                gamma,
                env_id,
            },
            r.pos,
        ))
    }
}

pub fn encoded_episode_len(steps: usize, obs_dim: usize, act_dim: usize) -> usize {
    EPISODE_HEADER_LEN + 4 * ((steps + 1) * obs_dim + steps * act_dim + steps)
}

pub fn encode_episode(episode: &Episode, collection_index: u64, out: &mut Vec<u8>) {
    let steps = episode.len();
    out.reserve(encoded_episode_len(steps, episode.obs_dim(), episode.act_dim()));
    out.extend_from_slice(&collection_index.to_le_bytes());
    out.extend_from_slice(&(steps as u32).to_le_bytes());
    out.push(episode.end().flags());
    for block in [episode.observations(), episode.actions(), episode.rewards()] {
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Decodes one episode record. Provenance fields other than the collection
/// index live in the sidecar and are left for the caller to fill in.
pub fn decode_episode(bytes: &[u8], obs_dim: usize, act_dim: usize, path: &Path) -> Result<Episode> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = Reader::new(bytes);
    let collection_index = r.u64().ok_or_else(|| corrupt("truncated episode header".into()))?;
    let steps = r.u32().ok_or_else(|| corrupt("truncated episode header".into()))? as usize;
    let flags = r.u8().ok_or_else(|| corrupt("truncated episode header".into()))?;
    let end = EpisodeEnd::from_flags(flags).map_err(|e| corrupt(e.to_string()))?;
    if bytes.len() != encoded_episode_len(steps, obs_dim, act_dim) {
        return Err(corrupt(format!(
            "episode record of {} bytes does not match {steps} steps",
            bytes.len()
        )));
    }
    let observations = r.f32s((steps + 1) * obs_dim);
    let actions = r.f32s(steps * act_dim);
    let rewards = r.f32s(steps);
    let mut episode = Episode::from_parts(obs_dim, act_dim, observations, actions, rewards, end)
        .map_err(|e| corrupt(e.to_string()))?;
    episode.collection_index = collection_index;
    Ok(episode)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let slice = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(slice)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().expect("slice length"))
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|s| s[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Option<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Option<u64> {
        self.array().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Option<f64> {
        self.array().map(f64::from_le_bytes)
    }

    // Callers check the total record length first.
    fn f32s(&mut self, n: usize) -> Vec<f32> {
        let raw = self.take(4 * n).expect("length checked");
        raw.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect()
    }
}
