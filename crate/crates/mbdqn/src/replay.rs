//! Episode-aware experience replay: a ring buffer of transitions with
//! variable-horizon n-step segment extraction and an optional λ-return cache.
//!
//! Segment extraction never crosses an episode boundary. Eviction is strictly
//! oldest-first; evicting a slot drops its cache entry with it.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::returns::{lambda_return, DiscountSpec, LambdaSpec, RewardSegment};

const DUMP_MAGIC: &[u8; 4] = b"MBQB";
const DUMP_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("cannot sample from an empty buffer")]
    EmptyBuffer,
    #[error("segment horizon must be >= 1")]
    InvalidHorizon,
    #[error("out-of-sequence append: {0}")]
    Sequencing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt buffer dump: {0}")]
    Corrupt(String),
}

/// One environment step as stored in the buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub terminal: bool,
    pub episode_id: u64,
    pub step_index: u64,
}

/// A sampled n-step segment: the start transition's (obs, action), the run of
/// consecutive rewards, and the observation to bootstrap from (absent when
/// the segment ends at a terminal).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSample {
    pub start_index: usize,
    pub obs: Vec<f64>,
    pub action: usize,
    pub rewards: Vec<f64>,
    pub terminated: bool,
    pub bootstrap_obs: Option<Vec<f64>>,
}

impl SegmentSample {
    pub fn reward_segment(&self, bootstrap_value: f64) -> RewardSegment {
        RewardSegment {
            rewards: self.rewards.clone(),
            bootstrap_value: if self.terminated { 0.0 } else { bootstrap_value },
            terminated: self.terminated,
        }
    }
}

struct LambdaCache {
    values: VecDeque<f64>, // NaN marks a slot appended after the last refresh
    epoch: u64,
}

pub struct ReplayBuffer {
    capacity: usize,
    storage: VecDeque<Transition>,
    lambda_cache: Option<LambdaCache>,
    last_key: Option<(u64, u64)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "capacity must be >= 1");
        Self {
            capacity,
            storage: VecDeque::with_capacity(capacity.min(1 << 16)),
            lambda_cache: None,
            last_key: None,
        }
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, index: usize) -> Option<&Transition> {
        self.storage.get(index)
    }

    /// Appends a transition, evicting the oldest when full. Within one
    /// episode, step indices must advance by exactly one.
    pub fn append(&mut self, t: Transition) -> Result<(), ReplayError> {
        if let Some((ep, step)) = self.last_key {
            if t.episode_id == ep && t.step_index != step + 1 {
                return Err(ReplayError::Sequencing(format!(
                    "episode {ep}: expected step {}, got {}",
                    step + 1,
                    t.step_index
                )));
            }
        }
        self.last_key = Some((t.episode_id, t.step_index));
        if self.storage.len() == self.capacity {
            self.storage.pop_front();
            if let Some(cache) = &mut self.lambda_cache {
                cache.values.pop_front();
            }
        }
        self.storage.push_back(t);
        if let Some(cache) = &mut self.lambda_cache {
            cache.values.push_back(f64::NAN);
        }
        Ok(())
    }

    /// Draws `batch_size` start indices uniformly (with replacement).
    pub fn sample_starts(
        &self,
        rng: &mut ChaCha8Rng,
        batch_size: usize,
    ) -> Result<Vec<usize>, ReplayError> {
        if self.storage.is_empty() {
            return Err(ReplayError::EmptyBuffer);
        }
        Ok((0..batch_size)
            .map(|_| rng.random_range(0..self.storage.len()))
            .collect())
    }

    /// Materializes the horizon-n segment starting at `start`. The segment
    /// truncates at the episode's terminal (no bootstrap) or at the last
    /// stored transition of the episode (bootstrap at its next observation).
    pub fn segment_at(&self, start: usize, n: usize) -> Result<SegmentSample, ReplayError> {
        if n < 1 {
            return Err(ReplayError::InvalidHorizon);
        }
        let first = self.storage.get(start).ok_or(ReplayError::EmptyBuffer)?;
        let mut rewards = Vec::with_capacity(n);
        let mut idx = start;
        loop {
            let t = &self.storage[idx];
            rewards.push(t.reward);
            if t.terminal {
                return Ok(SegmentSample {
                    start_index: start,
                    obs: first.obs.clone(),
                    action: first.action,
                    rewards,
                    terminated: true,
                    bootstrap_obs: None,
                });
            }
            let done = rewards.len() == n;
            let next_continues = self
                .storage
                .get(idx + 1)
                .map(|nx| nx.episode_id == t.episode_id)
                .unwrap_or(false);
            if done || !next_continues {
                return Ok(SegmentSample {
                    start_index: start,
                    obs: first.obs.clone(),
                    action: first.action,
                    rewards,
                    terminated: false,
                    bootstrap_obs: Some(t.next_obs.clone()),
                });
            }
            idx += 1;
        }
    }

    pub fn sample_segments(
        &self,
        rng: &mut ChaCha8Rng,
        batch_size: usize,
        horizon: usize,
    ) -> Result<Vec<SegmentSample>, ReplayError> {
        let starts = self.sample_starts(rng, batch_size)?;
        starts
            .into_iter()
            .map(|s| self.segment_at(s, horizon))
            .collect()
    }

    /// The remaining in-buffer episode suffix from `start`, capped at
    /// `max_len` transitions.
    fn suffix_len(&self, start: usize, max_len: usize) -> usize {
        let ep = self.storage[start].episode_id;
        let mut len = 0;
        for idx in start..self.storage.len() {
            let t = &self.storage[idx];
            if t.episode_id != ep {
                break;
            }
            len += 1;
            if t.terminal || len == max_len {
                break;
            }
        }
        len
    }

    /// λ-return over the in-buffer episode suffix at `start`, evaluated with
    /// the supplied greedy-value function.
    pub fn lambda_target_at(
        &self,
        start: usize,
        evaluator: &dyn Fn(&[f64]) -> f64,
        gamma: DiscountSpec,
        spec: LambdaSpec,
    ) -> Result<f64, ReplayError> {
        if start >= self.storage.len() {
            return Err(ReplayError::EmptyBuffer);
        }
        let len = self.suffix_len(start, spec.max_horizon());
        let mut rewards = Vec::with_capacity(len);
        let mut values = Vec::with_capacity(len);
        for idx in start..start + len {
            let t = &self.storage[idx];
            rewards.push(t.reward);
            values.push(if t.terminal {
                0.0
            } else {
                evaluator(&t.next_obs)
            });
        }
        lambda_return(&rewards, &values, gamma, spec)
            .map_err(|e| ReplayError::Corrupt(e.to_string()))
    }

    /// Recomputes the λ-return cache for every stored transition and stamps
    /// it with `epoch`.
    pub fn refresh_lambda_cache(
        &mut self,
        evaluator: &dyn Fn(&[f64]) -> f64,
        gamma: DiscountSpec,
        spec: LambdaSpec,
        epoch: u64,
    ) -> Result<(), ReplayError> {
        let mut values = VecDeque::with_capacity(self.storage.len());
        for start in 0..self.storage.len() {
            values.push_back(self.lambda_target_at(start, evaluator, gamma, spec)?);
        }
        self.lambda_cache = Some(LambdaCache { values, epoch });
        Ok(())
    }

    /// Cached λ-return for a slot, or None if the cache is stale for it
    /// (different epoch, or the slot was appended after the last refresh).
    pub fn cached_lambda(&self, index: usize, epoch: u64) -> Option<f64> {
        let cache = self.lambda_cache.as_ref()?;
        if cache.epoch != epoch {
            return None;
        }
        let v = *cache.values.get(index)?;
        if v.is_nan() {
            None
        } else {
            Some(v)
        }
    }

    pub fn cache_epoch(&self) -> Option<u64> {
        self.lambda_cache.as_ref().map(|c| c.epoch)
    }

    /// Writes the stored transitions in the versioned binary envelope.
    /// The λ-cache is derived data and is not persisted.
    pub fn dump(&self, path: &Path) -> Result<(), ReplayError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&(self.capacity as u64).to_le_bytes())?;
        w.write_all(&(self.storage.len() as u64).to_le_bytes())?;
        let obs_dim = self.storage.front().map(|t| t.obs.len()).unwrap_or(0);
        w.write_all(&(obs_dim as u32).to_le_bytes())?;
        for t in &self.storage {
            if t.obs.len() != obs_dim || t.next_obs.len() != obs_dim {
                return Err(ReplayError::Corrupt("inconsistent observation size".into()));
            }
            for v in &t.obs {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&(t.action as u32).to_le_bytes())?;
            w.write_all(&t.reward.to_le_bytes())?;
            for v in &t.next_obs {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&[t.terminal as u8])?;
            w.write_all(&t.episode_id.to_le_bytes())?;
            w.write_all(&t.step_index.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn restore(path: &Path) -> Result<Self, ReplayError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(ReplayError::Corrupt("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != DUMP_VERSION {
            return Err(ReplayError::Corrupt(format!("unsupported version {version}")));
        }
        let capacity = read_u64(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        if count > capacity {
            return Err(ReplayError::Corrupt("count exceeds capacity".into()));
        }
        let obs_dim = read_u32(&mut r)? as usize;
        let mut buf = ReplayBuffer::new(capacity.max(1));
        for _ in 0..count {
            let obs = read_f64_vec(&mut r, obs_dim)?;
            let action = read_u32(&mut r)? as usize;
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            let reward = f64::from_le_bytes(b);
            let next_obs = read_f64_vec(&mut r, obs_dim)?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let mut ep = [0u8; 8];
            r.read_exact(&mut ep)?;
            let mut step = [0u8; 8];
            r.read_exact(&mut step)?;
            buf.append(Transition {
                obs,
                action,
                reward,
                next_obs,
                terminal: flag[0] != 0,
                episode_id: u64::from_le_bytes(ep),
                step_index: u64::from_le_bytes(step),
            })?;
        }
        Ok(buf)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ReplayError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ReplayError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>, ReplayError> {
    let mut out = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn transition(ep: u64, step: u64, reward: f64, terminal: bool) -> Transition {
        Transition {
            obs: vec![ep as f64, step as f64],
            action: (step % 2) as usize,
            reward,
            next_obs: vec![ep as f64, step as f64 + 1.0],
            terminal,
            episode_id: ep,
            step_index: step,
        }
    }

    fn episode(buf: &mut ReplayBuffer, ep: u64, len: u64) {
        for s in 0..len {
            buf.append(transition(ep, s, s as f64, s == len - 1)).unwrap();
        }
    }

    #[test]
    fn ring_evicts_oldest_first() {
        let mut buf = ReplayBuffer::new(3);
        episode(&mut buf, 0, 4);
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.get(0).unwrap().step_index, 1);
    }

    #[test]
    fn single_transition_truncates_at_own_status() {
        let mut buf = ReplayBuffer::new(8);
        buf.append(transition(0, 0, 1.0, false)).unwrap();
        let seg = buf.segment_at(0, 5).unwrap();
        assert_eq!(seg.rewards, vec![1.0]);
        assert!(!seg.terminated);
        assert!(seg.bootstrap_obs.is_some());
    }

    #[test]
    fn terminal_segment_has_no_bootstrap() {
        let mut buf = ReplayBuffer::new(8);
        episode(&mut buf, 0, 5);
        let seg = buf.segment_at(4, 3).unwrap();
        assert_eq!(seg.rewards.len(), 1);
        assert!(seg.terminated);
        assert!(seg.bootstrap_obs.is_none());
    }

    #[test]
    fn segments_never_cross_episodes() {
        let mut buf = ReplayBuffer::new(32);
        episode(&mut buf, 0, 4);
        episode(&mut buf, 1, 5);
        for start in 0..buf.len() {
            for n in 1..=6 {
                let seg = buf.segment_at(start, n).unwrap();
                let ep = buf.get(start).unwrap().episode_id;
                for (j, _) in seg.rewards.iter().enumerate() {
                    assert_eq!(buf.get(start + j).unwrap().episode_id, ep);
                }
            }
        }
    }

    #[test]
    fn out_of_sequence_append_rejected() {
        let mut buf = ReplayBuffer::new(8);
        buf.append(transition(0, 0, 0.0, false)).unwrap();
        assert!(buf.append(transition(0, 2, 0.0, false)).is_err());
    }

    #[test]
    fn empty_buffer_sampling_errors() {
        let buf = ReplayBuffer::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            buf.sample_segments(&mut rng, 1, 1),
            Err(ReplayError::EmptyBuffer)
        ));
    }

    #[test]
    fn start_sampling_is_uniform() {
        let mut buf = ReplayBuffer::new(16);
        episode(&mut buf, 0, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let draws = 10_000;
        let mut counts = vec![0usize; 10];
        for s in buf.sample_starts(&mut rng, draws).unwrap() {
            counts[s] += 1;
        }
        let p = 0.1;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - mean).abs() < 4.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn lambda_cache_zero_collapses_to_one_step() {
        let mut buf = ReplayBuffer::new(16);
        episode(&mut buf, 0, 4);
        let gamma = DiscountSpec::new(0.9).unwrap();
        let spec = LambdaSpec::new(0.0, 100).unwrap();
        let evaluator = |obs: &[f64]| obs[1] * 10.0;
        buf.refresh_lambda_cache(&evaluator, gamma, spec, 1).unwrap();
        for i in 0..buf.len() {
            let t = buf.get(i).unwrap().clone();
            let want = if t.terminal {
                t.reward
            } else {
                t.reward + 0.9 * evaluator(&t.next_obs)
            };
            assert!((buf.cached_lambda(i, 1).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_cache_monte_carlo_with_zero_evaluator() {
        let mut buf = ReplayBuffer::new(16);
        episode(&mut buf, 0, 4);
        let gamma = DiscountSpec::new(0.5).unwrap();
        let spec = LambdaSpec::new(1.0, 100).unwrap();
        buf.refresh_lambda_cache(&|_| 0.0, gamma, spec, 3).unwrap();
        // rewards 0,1,2,3; suffix MC from 0: 0 + .5*1 + .25*2 + .125*3
        assert!((buf.cached_lambda(0, 3).unwrap() - 1.375).abs() < 1e-12);
    }

    #[test]
    fn stale_cache_not_served() {
        let mut buf = ReplayBuffer::new(16);
        episode(&mut buf, 0, 3);
        let gamma = DiscountSpec::new(0.9).unwrap();
        let spec = LambdaSpec::new(0.5, 100).unwrap();
        buf.refresh_lambda_cache(&|_| 0.0, gamma, spec, 1).unwrap();
        assert!(buf.cached_lambda(0, 2).is_none()); // wrong epoch
        buf.append(transition(1, 0, 1.0, true)).unwrap();
        assert!(buf.cached_lambda(buf.len() - 1, 1).is_none()); // post-refresh slot
        assert!(buf.cached_lambda(0, 1).is_some());
    }

    #[test]
    fn dump_restore_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buf.bin");
        let mut buf = ReplayBuffer::new(16);
        episode(&mut buf, 0, 4);
        episode(&mut buf, 1, 2);
        buf.dump(&path).unwrap();
        let restored = ReplayBuffer::restore(&path).unwrap();
        assert_eq!(restored.len(), buf.len());
        for i in 0..buf.len() {
            assert_eq!(restored.get(i), buf.get(i));
        }
    }
}
