//! The MB-DQN control and update loop: per-episode uniform head sampling,
//! ε-greedy acting on the sampled head, per-head multi-step targets with
//! double-Q bootstrap evaluation, and majority-vote greedy evaluation.
//!
//! Degenerate configurations give the baselines: homogeneous head specs are
//! plain bootstrapped DQN, and `LambdaSingleTarget` mode with one head is the
//! precomputed-λ-return DQN(λ) baseline.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::approximator::{
    ApproxError, Backend, EnsembleConfig, EnsembleQFunction, HeadSpec, Optimizer, TargetSnapshot,
};
use crate::envs::greedy_action;
use crate::replay::{ReplayBuffer, ReplayError};
use crate::returns::{per_head_target, DiscountSpec, LambdaSpec, ReturnError};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Returns(#[from] ReturnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentMode {
    Ensemble,
    LambdaSingleTarget,
}

/// Linear ε anneal from `start` to `end` over `decay_steps` environment steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl EpsilonSchedule {
    pub fn constant(eps: f64) -> Self {
        Self {
            start: eps,
            end: eps,
            decay_steps: 0,
        }
    }

    pub fn value(&self, step: u64) -> f64 {
        if self.decay_steps == 0 || step >= self.decay_steps {
            self.end
        } else {
            let frac = step as f64 / self.decay_steps as f64;
            self.start + (self.end - self.start) * frac
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub gamma: f64,
    pub head_specs: Vec<HeadSpec>,
    pub epsilon: EpsilonSchedule,
    pub learning_rate: f64,
    pub target_sync_period: u64,
    pub batch_size: usize,
    pub updates_per_env_step: f64,
    pub buffer_capacity: usize,
    pub mode: AgentMode,
    pub lambda_spec: Option<LambdaSpec>,
    pub backend: Backend,
    pub optimizer: Optimizer,
    pub trunk_grad_scale_by_heads: bool,
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.head_specs.is_empty() {
            return Err(AgentError::Config("need at least one head".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(AgentError::Config(format!("gamma {} out of (0, 1]", self.gamma)));
        }
        for eps in [self.epsilon.start, self.epsilon.end] {
            if !(0.0..=1.0).contains(&eps) {
                return Err(AgentError::Config(format!("epsilon {eps} out of [0, 1]")));
            }
        }
        if self.mode == AgentMode::LambdaSingleTarget {
            if self.lambda_spec.is_none() {
                return Err(AgentError::Config(
                    "lambda mode requires a lambda spec".into(),
                ));
            }
            if self.head_specs.len() != 1 {
                return Err(AgentError::Config(
                    "lambda mode requires exactly one head".into(),
                ));
            }
        }
        if self.target_sync_period == 0 {
            return Err(AgentError::Config("target sync period must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(AgentError::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_count(&self) -> usize {
        self.head_specs.len()
    }
}

/// K identical heads: plain bootstrapped DQN with backup length `n`.
pub fn homogeneous_heads(k: usize, n: usize) -> Vec<HeadSpec> {
    (0..k).map(|_| HeadSpec::new(n)).collect()
}

/// K heads split evenly over the given backup lengths, extra heads going to
/// the longest length (so 10 heads over {1, 2, 3} is a 3/3/4 split).
pub fn mixed_heads(k: usize, lengths: &[usize]) -> Vec<HeadSpec> {
    assert!(!lengths.is_empty());
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let per = k / sorted.len();
    let extra = k % sorted.len();
    let mut specs = Vec::with_capacity(k);
    for (i, &n) in sorted.iter().enumerate() {
        let count = per + if i >= sorted.len() - extra { 1 } else { 0 };
        for _ in 0..count {
            specs.push(HeadSpec::new(n));
        }
    }
    specs
}

/// Per-episode acting state: the sampled head stays fixed for the whole
/// episode.
#[derive(Debug, Clone)]
pub struct EpisodeContext {
    pub active_head: usize,
    pub episode_return: f64,
    pub step_count: u64,
}

pub struct Agent {
    cfg: AgentConfig,
    gamma: DiscountSpec,
    q: EnsembleQFunction,
    target: TargetSnapshot,
    sync_epoch: u64,
    env_steps: u64,
    update_accum: f64,
    #[cfg(test)]
    pub(crate) update_start_log: Vec<Vec<usize>>,
}

impl Agent {
    pub fn new(
        cfg: AgentConfig,
        obs_dim: usize,
        action_count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, AgentError> {
        cfg.validate()?;
        let gamma = DiscountSpec::new(cfg.gamma)?;
        let ensemble_cfg = EnsembleConfig {
            obs_dim,
            action_count,
            head_specs: cfg.head_specs.clone(),
            backend: cfg.backend,
            optimizer: cfg.optimizer,
            trunk_grad_scale_by_heads: cfg.trunk_grad_scale_by_heads,
        };
        let q = EnsembleQFunction::new(ensemble_cfg, rng);
        let target = q.sync_targets();
        Ok(Self {
            cfg,
            gamma,
            q,
            target,
            sync_epoch: 0,
            env_steps: 0,
            update_accum: 0.0,
            #[cfg(test)]
            update_start_log: Vec::new(),
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn q_function(&self) -> &EnsembleQFunction {
        &self.q
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn sync_epoch(&self) -> u64 {
        self.sync_epoch
    }

    pub fn current_epsilon(&self) -> f64 {
        self.cfg.epsilon.value(self.env_steps)
    }

    /// Samples the episode's acting head uniformly.
    pub fn begin_episode(&self, rng: &mut ChaCha8Rng) -> EpisodeContext {
        EpisodeContext {
            active_head: rng.random_range(0..self.cfg.head_count()),
            episode_return: 0.0,
            step_count: 0,
        }
    }

    /// ε-greedy action on the episode's active head. Greedy ties break to
    /// the lowest action index.
    pub fn act(
        &self,
        ctx: &EpisodeContext,
        obs: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<usize, AgentError> {
        let action_count = self.q.config().action_count;
        if rng.random::<f64>() < self.current_epsilon() {
            return Ok(rng.random_range(0..action_count));
        }
        self.act_greedy_head(ctx.active_head, obs)
    }

    pub fn act_greedy_head(&self, head: usize, obs: &[f64]) -> Result<usize, AgentError> {
        Ok(greedy_action(&self.q.forward_head(head, obs)?))
    }

    /// Each head votes its greedy action; the most-voted action wins, vote
    /// ties breaking to the lowest action index.
    pub fn act_majority(&self, obs: &[f64]) -> Result<usize, AgentError> {
        let mut votes = vec![0usize; self.q.config().action_count];
        for values in self.q.forward(obs)? {
            votes[greedy_action(&values)] += 1;
        }
        let mut best = 0;
        for (a, &v) in votes.iter().enumerate().skip(1) {
            if v > votes[best] {
                best = a;
            }
        }
        Ok(best)
    }

    /// Registers one environment step: advances the ε-schedule clock and
    /// accrues update credit per the configured cadence.
    pub fn note_env_step(&mut self) {
        self.env_steps += 1;
        self.update_accum += self.cfg.updates_per_env_step;
    }

    /// Number of gradient batches now due; resets the accumulator remainder.
    pub fn take_due_updates(&mut self) -> usize {
        let due = self.update_accum.floor();
        self.update_accum -= due;
        due as usize
    }

    /// Double-Q greedy value for head `k` at a bootstrap observation: the
    /// argmax action comes from the live head, its value from the head's
    /// target snapshot.
    fn double_q_value(&self, head: usize, obs: &[f64]) -> Result<f64, AgentError> {
        let live = self.q.forward_head(head, obs)?;
        let a = greedy_action(&live);
        Ok(self.target.forward_head(head, obs)?[a])
    }

    /// Builds the (obs, action, target) batch for one head from shared start
    /// indices, materializing horizon-n_k segments.
    fn build_head_batch(
        &self,
        head: usize,
        starts: &[usize],
        buf: &ReplayBuffer,
    ) -> Result<Vec<(Vec<f64>, usize, f64)>, AgentError> {
        let n_k = self.cfg.head_specs[head].backup_length;
        let mut batch = Vec::with_capacity(starts.len());
        for &s in starts {
            let seg = buf.segment_at(s, n_k)?;
            let greedy = match &seg.bootstrap_obs {
                Some(obs) => self.double_q_value(head, obs)?,
                None => 0.0,
            };
            let segment = seg.reward_segment(0.0);
            let y = per_head_target(&segment, self.gamma, n_k, greedy)?;
            batch.push((seg.obs, seg.action, y));
        }
        Ok(batch)
    }

    fn build_lambda_batch(
        &self,
        starts: &[usize],
        buf: &ReplayBuffer,
    ) -> Result<Vec<(Vec<f64>, usize, f64)>, AgentError> {
        let spec = self.cfg.lambda_spec.expect("validated in new");
        let mut batch = Vec::with_capacity(starts.len());
        for &s in starts {
            let y = match buf.cached_lambda(s, self.sync_epoch) {
                Some(v) => v,
                // Slot appended since the last refresh: compute against the
                // same target snapshot the cache was built from.
                None => {
                    let q = &self.q;
                    let target = &self.target;
                    let evaluator = |obs: &[f64]| {
                        let live = q.forward_head(0, obs).expect("obs shape checked");
                        let a = greedy_action(&live);
                        target.forward_head(0, obs).expect("obs shape checked")[a]
                    };
                    buf.lambda_target_at(s, &evaluator, self.gamma, spec)?
                }
            };
            let t = buf.get(s).ok_or(ReplayError::EmptyBuffer)?;
            batch.push((t.obs.clone(), t.action, y));
        }
        Ok(batch)
    }

    /// One update step: draws a batch of start indices and trains every head
    /// on its own horizon from the same starts. Returns the per-head pre-step
    /// losses, or None when the buffer is still under-filled.
    pub fn update_step(
        &mut self,
        buf: &ReplayBuffer,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Vec<f64>>, AgentError> {
        if buf.len() < self.cfg.batch_size {
            return Ok(None);
        }
        let starts = buf.sample_starts(rng, self.cfg.batch_size)?;
        #[cfg(test)]
        self.update_start_log.push(starts.clone());
        let mut losses = Vec::with_capacity(self.cfg.head_count());
        match self.cfg.mode {
            AgentMode::Ensemble => {
                for k in 0..self.cfg.head_count() {
                    let batch = self.build_head_batch(k, &starts, buf)?;
                    losses.push(self.q.head_update(k, &batch, self.cfg.learning_rate)?);
                }
            }
            AgentMode::LambdaSingleTarget => {
                let batch = self.build_lambda_batch(&starts, buf)?;
                losses.push(self.q.head_update(0, &batch, self.cfg.learning_rate)?);
            }
        }
        Ok(Some(losses))
    }

    /// Refreshes all target snapshots (and the λ-cache, in λ mode) when the
    /// step counter hits a sync boundary. Returns whether a sync occurred.
    pub fn maybe_sync(&mut self, buf: &mut ReplayBuffer) -> Result<bool, AgentError> {
        if self.env_steps == 0 || self.env_steps % self.cfg.target_sync_period != 0 {
            return Ok(false);
        }
        self.force_sync(buf)?;
        Ok(true)
    }

    pub fn force_sync(&mut self, buf: &mut ReplayBuffer) -> Result<(), AgentError> {
        self.target = self.q.sync_targets();
        self.sync_epoch += 1;
        if self.cfg.mode == AgentMode::LambdaSingleTarget {
            let spec = self.cfg.lambda_spec.expect("validated in new");
            let q = &self.q;
            let target = &self.target;
            let evaluator = |obs: &[f64]| {
                let live = q.forward_head(0, obs).expect("obs shape checked");
                let a = greedy_action(&live);
                target.forward_head(0, obs).expect("obs shape checked")[a]
            };
            buf.refresh_lambda_cache(&evaluator, self.gamma, spec, self.sync_epoch)?;
        }
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn head_batch_for_test(
        &self,
        head: usize,
        starts: &[usize],
        buf: &ReplayBuffer,
    ) -> Vec<(Vec<f64>, usize, f64)> {
        self.build_head_batch(head, starts, buf).unwrap()
    }
}
