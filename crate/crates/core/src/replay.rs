//! Online replay and the fixed-ratio offline/online batch sampler.
//!
//! Each batch is split deterministically: `round_half_up(p_online * batch_size)`
//! samples come from the online buffer and the rest from the offline source.
//! Within a source transitions are drawn uniformly, and every draw is expanded
//! into an N-step window of its episode.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::DatasetView;
use crate::trajectory::{nstep_sample_at, Episode, NStepSample};

/// Random access to transitions grouped by episode.
pub trait TransitionSource {
    fn transition_count(&self) -> usize;

    fn episode_count(&self) -> usize;

    /// Episode and step of the `i`-th stored transition.
    fn locate(&self, i: usize) -> (&Episode, usize);
}

/// FIFO replay of whole episodes, bounded in transitions.
#[derive(Debug, Clone)]
pub struct OnlineBuffer {
    capacity: usize,
    episodes: VecDeque<Arc<Episode>>,
    // Global transition counter at which each stored episode starts.
    starts: VecDeque<u64>,
    next_start: u64,
    size: usize,
}

impl OnlineBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            capacity,
            episodes: VecDeque::new(),
            starts: VecDeque::new(),
            next_start: 0,
            size: 0,
        }
    }

    /// Preloads episodes, e.g. the offline phase of a shared buffer.
    pub fn with_episodes(capacity: usize, episodes: impl IntoIterator<Item = Arc<Episode>>) -> Result<Self> {
        let mut buffer = Self::new(capacity);
        for ep in episodes {
            buffer.push_episode(ep)?;
        }
        Ok(buffer)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Arc<Episode>> + '_ {
        self.episodes.iter()
    }

    /// Inserts an episode, evicting the oldest whole episodes to make room.
    pub fn push_episode(&mut self, episode: Arc<Episode>) -> Result<()> {
        if let Some(first) = self.episodes.front() {
            if first.obs_dim() != episode.obs_dim() || first.act_dim() != episode.act_dim() {
                return Err(Error::DimensionMismatch {
                    what: "episode and online buffer".into(),
                    detail: format!(
                        "{}x{} vs {}x{}",
                        episode.obs_dim(),
                        episode.act_dim(),
                        first.obs_dim(),
                        first.act_dim()
                    ),
                });
            }
        }
        let len = episode.len();
        if len > self.capacity {
            return Err(Error::EpisodeTooLong {
                len,
                capacity: self.capacity,
            });
        }
        while self.size + len > self.capacity {
            let evicted = self.episodes.pop_front().expect("non-empty while over capacity");
            self.starts.pop_front();
            self.size -= evicted.len();
        }
        self.starts.push_back(self.next_start);
        self.next_start += len as u64;
        self.size += len;
        self.episodes.push_back(episode);
        Ok(())
    }
}

impl TransitionSource for OnlineBuffer {
    fn transition_count(&self) -> usize {
        self.size
    }

    fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    fn locate(&self, i: usize) -> (&Episode, usize) {
        debug_assert!(i < self.size);
        let global = self.starts[0] + i as u64;
        let k = self.starts.partition_point(|&s| s <= global) - 1;
        (&self.episodes[k], (global - self.starts[k]) as usize)
    }
}

/// Decoded episodes of an offline view, addressable by transition.
#[derive(Debug, Clone, Default)]
pub struct OfflineSource {
    episodes: Vec<Arc<Episode>>,
    starts: Vec<usize>,
    total: usize,
}

impl OfflineSource {
    pub fn from_episodes(episodes: impl IntoIterator<Item = Arc<Episode>>) -> Self {
        let mut source = Self::default();
        for ep in episodes {
            source.starts.push(source.total);
            source.total += ep.len();
            source.episodes.push(ep);
        }
        source
    }

    pub fn from_view(view: &DatasetView) -> Result<Self> {
        Ok(Self::from_episodes(
            view.load_episodes()?.into_iter().map(Arc::new),
        ))
    }

    pub fn episodes(&self) -> &[Arc<Episode>] {
        &self.episodes
    }
}

impl TransitionSource for OfflineSource {
    fn transition_count(&self) -> usize {
        self.total
    }

    fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    fn locate(&self, i: usize) -> (&Episode, usize) {
        let k = self.starts.partition_point(|&s| s <= i) - 1;
        (&self.episodes[k], i - self.starts[k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixConfig {
    /// Fraction of each batch drawn from the online buffer.
    pub p_online: f64,
    /// Online transitions required before any mixed batch is emitted.
    pub min_online_fill: usize,
    pub batch_size: usize,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            p_online: 0.5,
            min_online_fill: 64,
            batch_size: 64,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_online) {
            return Err(Error::InvalidArgument(format!(
                "p_online {} outside [0, 1]",
                self.p_online
            )));
        }
        if self.batch_size == 0 || self.min_online_fill == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and min_online_fill must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn online_count(&self) -> usize {
        online_count(self.p_online, self.batch_size)
    }
}

/// `round_half_up(p_online * batch_size)`. Products that equal `k + 0.5` up to
/// floating-point representation error round up.
pub fn online_count(p_online: f64, batch_size: usize) -> usize {
    let exact = p_online * batch_size as f64;
    let rounded = (exact + 0.5 + 1e-9 * exact.max(1.0)).floor();
    (rounded as usize).min(batch_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    Online,
    Offline,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub samples: Vec<NStepSample>,
    pub source_mask: Vec<SampleSource>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn online_count(&self) -> usize {
        self.source_mask
            .iter()
            .filter(|s| **s == SampleSource::Online)
            .count()
    }

    /// Concatenates batches, used to build synthetic batches in tests and
    /// offline tools.
    pub fn from_samples(samples: Vec<NStepSample>, source: SampleSource) -> Self {
        let source_mask = vec![source; samples.len()];
        Self {
            samples,
            source_mask,
        }
    }
}

/// N-step window parameters applied to every draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NStepParams {
    pub n: usize,
    pub gamma: f64,
}

fn draw(
    source: &impl TransitionSource,
    count: usize,
    nstep: NStepParams,
    rng: &mut impl Rng,
    tag: SampleSource,
    batch: &mut Batch,
) {
    let total = source.transition_count();
    for _ in 0..count {
        let (ep, t) = source.locate(rng.random_range(0..total));
        batch.samples.push(nstep_sample_at(ep, t, nstep.n, nstep.gamma));
        batch.source_mask.push(tag);
    }
}

/// Draws one batch with an exact online/offline split.
pub fn sample_mixed(
    online: &OnlineBuffer,
    offline: &impl TransitionSource,
    cfg: &MixConfig,
    nstep: NStepParams,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let n_online = cfg.online_count();
    let n_offline = cfg.batch_size - n_online;
    if n_online > 0 && online.len() < cfg.min_online_fill.max(1) {
        return Err(Error::BlockedUntilFill {
            have: online.len(),
            need: cfg.min_online_fill.max(1),
        });
    }
    if n_offline > 0 && offline.transition_count() == 0 {
        return Err(Error::EmptyOfflineSource {
            requested: n_offline,
        });
    }
    let mut batch = Batch {
        samples: Vec::with_capacity(cfg.batch_size),
        source_mask: Vec::with_capacity(cfg.batch_size),
    };
    draw(online, n_online, nstep, rng, SampleSource::Online, &mut batch);
    draw(offline, n_offline, nstep, rng, SampleSource::Offline, &mut batch);
    Ok(batch)
}

/// Uniform sampling over the union of both sources, with no fixed ratio.
/// This is the shared-buffer replay of the two-phase offline-then-online
/// baseline.
pub fn sample_union(
    online: &OnlineBuffer,
    offline: &impl TransitionSource,
    batch_size: usize,
    nstep: NStepParams,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let n_on = online.transition_count();
    let n_off = offline.transition_count();
    if n_on + n_off == 0 {
        return Err(Error::EmptyOfflineSource {
            requested: batch_size,
        });
    }
    let mut batch = Batch {
        samples: Vec::with_capacity(batch_size),
        source_mask: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let i = rng.random_range(0..n_on + n_off);
        let (ep, t, tag) = if i < n_off {
            let (ep, t) = offline.locate(i);
            (ep, t, SampleSource::Offline)
        } else {
            let (ep, t) = online.locate(i - n_off);
            (ep, t, SampleSource::Online)
        };
        batch.samples.push(nstep_sample_at(ep, t, nstep.n, nstep.gamma));
        batch.source_mask.push(tag);
    }
    Ok(batch)
}

/// Running audit of emitted batches against the advertised ratio.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RatioAudit {
    pub batches: u64,
    pub online_samples: u64,
    pub offline_samples: u64,
    /// Batches whose online count differed from the configured split.
    pub violations: u64,
}

impl RatioAudit {
    pub fn record(&mut self, batch: &Batch, expected_online: Option<usize>) {
        let online = batch.online_count();
        self.batches += 1;
        self.online_samples += online as u64;
        self.offline_samples += (batch.len() - online) as u64;
        if expected_online.is_some_and(|e| e != online) {
            self.violations += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::EpisodeEnd;
    use proptest::prelude::*;

    fn episode(len: usize, id: f32) -> Arc<Episode> {
        let observations = (0..=len).map(|k| id * 1000.0 + k as f32).collect();
        Arc::new(
            Episode::from_parts(1, 1, observations, vec![0.0; len], vec![1.0; len], EpisodeEnd::Truncated)
                .unwrap(),
        )
    }

    const NSTEP: NStepParams = NStepParams { n: 1, gamma: 0.9 };

    #[test]
    fn push_examples() {
        let mut b = OnlineBuffer::new(10);
        b.push_episode(episode(4, 0.0)).unwrap();
        assert_eq!(b.len(), 4);
        b.push_episode(episode(4, 1.0)).unwrap();
        b.push_episode(episode(4, 2.0)).unwrap();
        assert_eq!(b.len(), 8);
        assert_eq!(b.episode_count(), 2);
        assert_eq!(b.locate(0).0.obs(0)[0], 1000.0);
        assert!(matches!(
            b.push_episode(episode(11, 3.0)),
            Err(Error::EpisodeTooLong { len: 11, capacity: 10 })
        ));
    }

    #[test]
    fn locate_walks_every_transition_in_order() {
        let mut b = OnlineBuffer::new(12);
        for id in 0..6 {
            b.push_episode(episode(1 + id % 3, id as f32)).unwrap();
        }
        let mut seen = Vec::new();
        for i in 0..b.len() {
            let (ep, t) = b.locate(i);
            seen.push(ep.obs(t)[0]);
        }
        let expected: Vec<f32> = b
            .episodes()
            .flat_map(|ep| (0..ep.len()).map(move |t| ep.obs(t)[0]))
            .collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn ratio_arithmetic() {
        assert_eq!(online_count(0.5, 128), 64);
        assert_eq!(online_count(0.7, 10), 7);
        assert_eq!(online_count(0.7, 5), 4);
        assert_eq!(online_count(0.25, 2), 1);
        assert_eq!(online_count(1.0, 7), 7);
        assert_eq!(online_count(0.0, 7), 0);
        // Integer oracle for percentage ratios.
        for pct in [50usize, 70, 80, 90] {
            for batch in 1..2048 {
                let oracle = (pct * batch + 50) / 100;
                assert_eq!(online_count(pct as f64 / 100.0, batch), oracle, "{pct}% of {batch}");
            }
        }
    }

    #[test]
    fn mixed_batch_split_is_exact() {
        let mut online = OnlineBuffer::new(1000);
        for id in 0..10 {
            online.push_episode(episode(20, id as f32)).unwrap();
        }
        let offline = OfflineSource::from_episodes((10..20).map(|id| episode(20, id as f32)));
        let mut rng = crate::rng::seeded(1);
        let cfg = MixConfig {
            p_online: 0.5,
            min_online_fill: 64,
            batch_size: 128,
        };
        let batch = sample_mixed(&online, &offline, &cfg, NSTEP, &mut rng).unwrap();
        assert_eq!(batch.online_count(), 64);
        assert_eq!(batch.len(), 128);
        for (s, src) in batch.samples.iter().zip(&batch.source_mask) {
            let from_online = s.obs[0] < 10_000.0;
            assert_eq!(from_online, *src == SampleSource::Online);
        }
        let cfg = MixConfig {
            p_online: 0.7,
            min_online_fill: 1,
            batch_size: 10,
        };
        let batch = sample_mixed(&online, &offline, &cfg, NSTEP, &mut rng).unwrap();
        assert_eq!(batch.online_count(), 7);
    }

    #[test]
    fn blocks_until_fill_and_reports_empty_offline() {
        let mut online = OnlineBuffer::new(100);
        online.push_episode(episode(10, 0.0)).unwrap();
        let offline = OfflineSource::default();
        let mut rng = crate::rng::seeded(1);
        let cfg = MixConfig {
            p_online: 0.5,
            min_online_fill: 20,
            batch_size: 8,
        };
        assert!(matches!(
            sample_mixed(&online, &offline, &cfg, NSTEP, &mut rng),
            Err(Error::BlockedUntilFill { have: 10, need: 20 })
        ));
        let cfg = MixConfig {
            min_online_fill: 5,
            ..cfg
        };
        assert!(matches!(
            sample_mixed(&online, &offline, &cfg, NSTEP, &mut rng),
            Err(Error::EmptyOfflineSource { requested: 4 })
        ));
        // Pure online works without any offline data.
        let cfg = MixConfig { p_online: 1.0, ..cfg };
        assert_eq!(sample_mixed(&online, &offline, &cfg, NSTEP, &mut rng).unwrap().online_count(), 8);
        // Pure offline is never blocked by the fill rule.
        let offline = OfflineSource::from_episodes([episode(3, 5.0)]);
        let empty = OnlineBuffer::new(10);
        let cfg = MixConfig { p_online: 0.0, min_online_fill: 50, batch_size: 4 };
        assert_eq!(sample_mixed(&empty, &offline, &cfg, NSTEP, &mut rng).unwrap().online_count(), 0);
    }

    #[test]
    fn sampling_is_reproducible() {
        let mut online = OnlineBuffer::new(100);
        for id in 0..5 {
            online.push_episode(episode(10, id as f32)).unwrap();
        }
        let offline = OfflineSource::from_episodes([episode(7, 9.0)]);
        let cfg = MixConfig { min_online_fill: 10, ..MixConfig::default() };
        let nstep = NStepParams { n: 5, gamma: 0.99 };
        let a = sample_mixed(&online, &offline, &cfg, nstep, &mut crate::rng::seeded(3)).unwrap();
        let b = sample_mixed(&online, &offline, &cfg, nstep, &mut crate::rng::seeded(3)).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn union_sampling_covers_both_sources_proportionally() {
        let mut online = OnlineBuffer::new(1000);
        online.push_episode(episode(30, 0.0)).unwrap();
        let offline = OfflineSource::from_episodes([episode(70, 50.0)]);
        let mut rng = crate::rng::seeded(5);
        let mut on = 0;
        let draws = 20_000;
        for _ in 0..draws / 100 {
            on += sample_union(&online, &offline, 100, NSTEP, &mut rng).unwrap().online_count();
        }
        let frac = on as f64 / draws as f64;
        assert!((frac - 0.3).abs() < 0.02, "online fraction {frac}");
    }

    /// Reference eviction model: a plain list of episode lengths.
    fn simulate(capacity: usize, ops: &[usize]) -> Vec<usize> {
        let mut kept: Vec<usize> = Vec::new();
        let mut sizes = Vec::new();
        for &len in ops {
            if len <= capacity {
                kept.push(len);
                while kept.iter().sum::<usize>() > capacity {
                    kept.remove(0);
                }
            }
            sizes.push(kept.iter().sum());
        }
        sizes
    }

    proptest! {
        #[test]
        fn eviction_matches_reference(capacity in 1usize..60, ops in proptest::collection::vec(1usize..25, 1..40)) {
            let mut b = OnlineBuffer::new(capacity);
            let expected = simulate(capacity, &ops);
            for (k, &len) in ops.iter().enumerate() {
                let result = b.push_episode(episode(len, k as f32));
                prop_assert_eq!(result.is_err(), len > capacity);
                prop_assert_eq!(b.len(), expected[k]);
                prop_assert!(b.len() <= capacity);
            }
        }
    }
}
