//! Q-function representations: a tabular backend and a small fully-connected
//! neural backend, each with a shared trunk and K output heads.
//!
//! The neural backend is one hidden rectified-linear layer feeding K linear
//! heads. Parameters live in a single flat vector with a fixed layout, which
//! keeps checkpointing, target snapshots, and finite-difference checks simple.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

const CHECKPOINT_MAGIC: &[u8; 4] = b"MBQC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ApproxError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite target in batch")]
    PoisonedTarget,
    #[error("head index {0} out of range (K = {1})")]
    HeadIndex(usize, usize),
    #[error("operation not applicable to the tabular backend")]
    NotApplicable,
    #[error("tabular backend requires one-hot observations")]
    NotOneHot,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Per-head backup length n_k.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSpec {
    pub backup_length: usize,
}

impl HeadSpec {
    pub fn new(backup_length: usize) -> Self {
        assert!(backup_length >= 1, "backup length must be >= 1");
        Self { backup_length }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Backend {
    /// One value table per head, indexed by the one-hot observation.
    Tabular { init_value: f64 },
    /// Shared hidden layer with rectified-linear activation, K linear heads.
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam_default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub obs_dim: usize,
    pub action_count: usize,
    pub head_specs: Vec<HeadSpec>,
    pub backend: Backend,
    pub optimizer: Optimizer,
    /// Scale trunk gradients by 1/K so trunk learning speed is independent
    /// of the ensemble size.
    pub trunk_grad_scale_by_heads: bool,
}

impl EnsembleConfig {
    pub fn head_count(&self) -> usize {
        self.head_specs.len()
    }
}

/// Flat-vector layout of the parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    obs_dim: usize,
    action_count: usize,
    hidden: usize, // 0 for tabular
    k: usize,
}

impl Layout {
    fn from_config(cfg: &EnsembleConfig) -> Self {
        let hidden = match cfg.backend {
            Backend::Tabular { .. } => 0,
            Backend::Mlp { hidden } => hidden,
        };
        Self {
            obs_dim: cfg.obs_dim,
            action_count: cfg.action_count,
            hidden,
            k: cfg.head_count(),
        }
    }

    fn is_tabular(&self) -> bool {
        self.hidden == 0
    }

    fn head_size(&self) -> usize {
        if self.is_tabular() {
            self.obs_dim * self.action_count
        } else {
            self.action_count * self.hidden + self.action_count
        }
    }

    fn trunk_size(&self) -> usize {
        if self.is_tabular() {
            0
        } else {
            self.hidden * self.obs_dim + self.hidden
        }
    }

    fn head_offset(&self, head: usize) -> usize {
        self.trunk_size() + head * self.head_size()
    }

    fn total(&self) -> usize {
        self.trunk_size() + self.k * self.head_size()
    }
}

fn one_hot_index(obs: &[f64]) -> Result<usize, ApproxError> {
    let mut idx = None;
    for (i, &v) in obs.iter().enumerate() {
        if v == 1.0 {
            if idx.is_some() {
                return Err(ApproxError::NotOneHot);
            }
            idx = Some(i);
        } else if v != 0.0 {
            return Err(ApproxError::NotOneHot);
        }
    }
    idx.ok_or(ApproxError::NotOneHot)
}

fn check_obs(layout: &Layout, obs: &[f64]) -> Result<(), ApproxError> {
    if obs.len() != layout.obs_dim {
        return Err(ApproxError::Shape {
            expected: layout.obs_dim,
            got: obs.len(),
        });
    }
    if obs.iter().any(|v| !v.is_finite()) {
        return Err(ApproxError::Corrupt("non-finite observation".into()));
    }
    Ok(())
}

fn forward_hidden(layout: &Layout, params: &[f64], obs: &[f64], hidden_out: &mut [f64]) {
    let d = layout.obs_dim;
    for i in 0..layout.hidden {
        let mut z = params[layout.hidden * d + i]; // bias
        let row = &params[i * d..(i + 1) * d];
        for (w, x) in row.iter().zip(obs) {
            z += w * x;
        }
        hidden_out[i] = z.max(0.0);
    }
}

fn forward_head_values(layout: &Layout, params: &[f64], head: usize, obs: &[f64]) -> Vec<f64> {
    if layout.is_tabular() {
        let s = one_hot_index(obs).expect("tabular forward requires one-hot obs");
        let base = layout.head_offset(head) + s * layout.action_count;
        params[base..base + layout.action_count].to_vec()
    } else {
        let mut h = vec![0.0; layout.hidden];
        forward_hidden(layout, params, obs, &mut h);
        head_values_from_hidden(layout, params, head, &h)
    }
}

fn head_values_from_hidden(layout: &Layout, params: &[f64], head: usize, h: &[f64]) -> Vec<f64> {
    let base = layout.head_offset(head);
    let a_count = layout.action_count;
    let nh = layout.hidden;
    let mut out = vec![0.0; a_count];
    for (a, o) in out.iter_mut().enumerate() {
        let mut z = params[base + a_count * nh + a]; // bias
        let row = &params[base + a * nh..base + (a + 1) * nh];
        for (w, x) in row.iter().zip(h) {
            z += w * x;
        }
        *o = z;
    }
    out
}

fn forward_all(layout: &Layout, params: &[f64], obs: &[f64]) -> Vec<Vec<f64>> {
    if layout.is_tabular() {
        (0..layout.k)
            .map(|k| forward_head_values(layout, params, k, obs))
            .collect()
    } else {
        let mut h = vec![0.0; layout.hidden];
        forward_hidden(layout, params, obs, &mut h);
        (0..layout.k)
            .map(|k| head_values_from_hidden(layout, params, k, &h))
            .collect()
    }
}

/// Loss and gradient of the mean squared error for one head over a batch.
/// Gradients are unscaled; trunk normalization is applied by the caller.
fn mlp_loss_and_grad(
    layout: &Layout,
    params: &[f64],
    head: usize,
    batch: &[(Vec<f64>, usize, f64)],
    grad: &mut [f64],
) -> f64 {
    let d = layout.obs_dim;
    let nh = layout.hidden;
    let a_count = layout.action_count;
    let base = layout.head_offset(head);
    let b = batch.len() as f64;
    let mut loss = 0.0;
    let mut h = vec![0.0; nh];
    for (obs, action, target) in batch {
        forward_hidden(layout, params, obs, &mut h);
        let mut pred = params[base + a_count * nh + action];
        let row = &params[base + action * nh..base + (action + 1) * nh];
        for (w, x) in row.iter().zip(&h) {
            pred += w * x;
        }
        let err = pred - target;
        loss += err * err;
        let e = 2.0 * err / b;
        // head gradients
        grad[base + a_count * nh + action] += e;
        for i in 0..nh {
            grad[base + action * nh + i] += e * h[i];
        }
        // trunk gradients through the rectifier
        for i in 0..nh {
            if h[i] > 0.0 {
                let dpre = e * params[base + action * nh + i];
                grad[nh * d + i] += dpre;
                for (j, &x) in obs.iter().enumerate() {
                    grad[i * d + j] += dpre * x;
                }
            }
        }
    }
    loss / b
}

struct AdamState {
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// K value heads over a shared trunk, each head with its own backup length.
pub struct EnsembleQFunction {
    cfg: EnsembleConfig,
    layout: Layout,
    params: Vec<f64>,
    adam: Option<AdamState>,
}

/// Frozen copy of the ensemble's parameters, used inside TD targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSnapshot {
    layout: Layout,
    params: Vec<f64>,
}

impl TargetSnapshot {
    pub fn forward(&self, obs: &[f64]) -> Result<Vec<Vec<f64>>, ApproxError> {
        check_obs(&self.layout, obs)?;
        Ok(forward_all(&self.layout, &self.params, obs))
    }

    pub fn forward_head(&self, head: usize, obs: &[f64]) -> Result<Vec<f64>, ApproxError> {
        if head >= self.layout.k {
            return Err(ApproxError::HeadIndex(head, self.layout.k));
        }
        check_obs(&self.layout, obs)?;
        Ok(forward_head_values(&self.layout, &self.params, head, obs))
    }
}

impl EnsembleQFunction {
    /// Builds a freshly initialized ensemble. Neural weights are uniform in
    /// ±1/√fan_in per layer, heads initialized independently; the tabular
    /// backend starts at its configured constant.
    pub fn new(cfg: EnsembleConfig, rng: &mut ChaCha8Rng) -> Self {
        assert!(cfg.head_count() >= 1, "need at least one head");
        assert!(cfg.action_count >= 2, "need at least two actions");
        let layout = Layout::from_config(&cfg);
        let mut params = vec![0.0; layout.total()];
        match cfg.backend {
            Backend::Tabular { init_value } => {
                params.fill(init_value);
            }
            Backend::Mlp { hidden } => {
                let trunk_bound = 1.0 / (cfg.obs_dim as f64).sqrt();
                for p in params[..layout.trunk_size()].iter_mut() {
                    *p = rng.random_range(-trunk_bound..trunk_bound);
                }
                let head_bound = 1.0 / (hidden as f64).sqrt();
                for p in params[layout.trunk_size()..].iter_mut() {
                    *p = rng.random_range(-head_bound..head_bound);
                }
            }
        }
        Self {
            cfg,
            layout,
            params,
            adam: None,
        }
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.cfg
    }

    pub fn head_count(&self) -> usize {
        self.layout.k
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn forward(&self, obs: &[f64]) -> Result<Vec<Vec<f64>>, ApproxError> {
        check_obs(&self.layout, obs)?;
        Ok(forward_all(&self.layout, &self.params, obs))
    }

    pub fn forward_head(&self, head: usize, obs: &[f64]) -> Result<Vec<f64>, ApproxError> {
        if head >= self.layout.k {
            return Err(ApproxError::HeadIndex(head, self.layout.k));
        }
        check_obs(&self.layout, obs)?;
        Ok(forward_head_values(&self.layout, &self.params, head, obs))
    }

    /// One gradient step on the mean squared error between the head's
    /// predictions and the supplied targets. Returns the pre-step loss.
    ///
    /// The tabular backend applies the classic increment
    /// `q += lr * mean(target − q)` per touched entry, so lr = 1 with a
    /// single sample lands exactly on the target.
    pub fn head_update(
        &mut self,
        head: usize,
        batch: &[(Vec<f64>, usize, f64)],
        lr: f64,
    ) -> Result<f64, ApproxError> {
        if head >= self.layout.k {
            return Err(ApproxError::HeadIndex(head, self.layout.k));
        }
        if batch.is_empty() {
            return Ok(0.0);
        }
        if batch.iter().any(|(_, _, t)| !t.is_finite()) {
            return Err(ApproxError::PoisonedTarget);
        }
        for (obs, action, _) in batch {
            check_obs(&self.layout, obs)?;
            if *action >= self.layout.action_count {
                return Err(ApproxError::Shape {
                    expected: self.layout.action_count,
                    got: *action,
                });
            }
        }
        if self.layout.is_tabular() {
            self.tabular_update(head, batch, lr)
        } else {
            self.mlp_update(head, batch, lr)
        }
    }

    fn tabular_update(
        &mut self,
        head: usize,
        batch: &[(Vec<f64>, usize, f64)],
        lr: f64,
    ) -> Result<f64, ApproxError> {
        let a_count = self.layout.action_count;
        let base = self.layout.head_offset(head);
        // Residuals against pre-step values, averaged per touched entry.
        let mut residual: Vec<(usize, f64, usize)> = Vec::new(); // (index, sum, count)
        let mut loss = 0.0;
        for (obs, action, target) in batch {
            let s = one_hot_index(obs)?;
            let idx = base + s * a_count + action;
            let err = target - self.params[idx];
            loss += err * err;
            match residual.iter_mut().find(|(i, _, _)| *i == idx) {
                Some((_, sum, n)) => {
                    *sum += err;
                    *n += 1;
                }
                None => residual.push((idx, err, 1)),
            }
        }
        for (idx, sum, n) in residual {
            self.params[idx] += lr * sum / n as f64;
        }
        Ok(loss / batch.len() as f64)
    }

    fn mlp_update(
        &mut self,
        head: usize,
        batch: &[(Vec<f64>, usize, f64)],
        lr: f64,
    ) -> Result<f64, ApproxError> {
        let mut grad = vec![0.0; self.params.len()];
        let loss = mlp_loss_and_grad(&self.layout, &self.params, head, batch, &mut grad);
        if self.cfg.trunk_grad_scale_by_heads {
            let scale = 1.0 / self.layout.k as f64;
            for g in grad[..self.layout.trunk_size()].iter_mut() {
                *g *= scale;
            }
        }
        match self.cfg.optimizer {
            Optimizer::Sgd => {
                for (p, g) in self.params.iter_mut().zip(&grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let state = self.adam.get_or_insert_with(|| AdamState {
                    t: 0,
                    m: vec![0.0; grad.len()],
                    v: vec![0.0; grad.len()],
                });
                state.t += 1;
                let t = state.t as f64;
                let bc1 = 1.0 - beta1.powf(t);
                let bc2 = 1.0 - beta2.powf(t);
                for i in 0..grad.len() {
                    if grad[i] == 0.0 && state.m[i] == 0.0 && state.v[i] == 0.0 {
                        continue;
                    }
                    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad[i];
                    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let m_hat = state.m[i] / bc1;
                    let v_hat = state.v[i] / bc2;
                    self.params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(loss)
    }

    pub fn sync_targets(&self) -> TargetSnapshot {
        TargetSnapshot {
            layout: self.layout,
            params: self.params.clone(),
        }
    }

    /// Compares the analytic loss gradient against central finite differences
    /// over every parameter and returns the worst relative deviation.
    pub fn gradient_check(
        &self,
        head: usize,
        sample: &(Vec<f64>, usize, f64),
    ) -> Result<f64, ApproxError> {
        if self.layout.is_tabular() {
            return Err(ApproxError::NotApplicable);
        }
        if head >= self.layout.k {
            return Err(ApproxError::HeadIndex(head, self.layout.k));
        }
        let batch = std::slice::from_ref(sample);
        let mut grad = vec![0.0; self.params.len()];
        mlp_loss_and_grad(&self.layout, &self.params, head, batch, &mut grad);
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        let mut perturbed = self.params.clone();
        for i in 0..perturbed.len() {
            let orig = perturbed[i];
            perturbed[i] = orig + eps;
            let lp = loss_only(&self.layout, &perturbed, head, batch);
            perturbed[i] = orig - eps;
            let lm = loss_only(&self.layout, &perturbed, head, batch);
            perturbed[i] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let diff = (grad[i] - numeric).abs();
            if diff < 1e-9 {
                continue;
            }
            let denom = grad[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(diff / denom);
        }
        Ok(worst)
    }

    /// Writes a versioned little-endian checkpoint of the parameters.
    pub fn save(&self, path: &Path) -> Result<(), ApproxError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let backend_tag: u8 = if self.layout.is_tabular() { 0 } else { 1 };
        w.write_all(&[backend_tag])?;
        w.write_all(&(self.layout.obs_dim as u32).to_le_bytes())?;
        w.write_all(&(self.layout.action_count as u32).to_le_bytes())?;
        w.write_all(&(self.layout.hidden as u32).to_le_bytes())?;
        w.write_all(&(self.layout.k as u32).to_le_bytes())?;
        for spec in &self.cfg.head_specs {
            w.write_all(&(spec.backup_length as u32).to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a checkpoint, rejecting anything whose declared shapes do not
    /// match its payload. Optimizer state is not persisted.
    pub fn load(path: &Path, backend: Backend, optimizer: Optimizer) -> Result<Self, ApproxError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ApproxError::Corrupt("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ApproxError::Corrupt(format!(
                "unsupported version {version}"
            )));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let obs_dim = read_u32(&mut r)? as usize;
        let action_count = read_u32(&mut r)? as usize;
        let hidden = read_u32(&mut r)? as usize;
        let k = read_u32(&mut r)? as usize;
        let backend_matches = match (tag[0], backend) {
            (0, Backend::Tabular { .. }) => hidden == 0,
            (1, Backend::Mlp { hidden: h }) => hidden == h,
            _ => false,
        };
        if !backend_matches {
            return Err(ApproxError::Corrupt("backend mismatch".into()));
        }
        let mut head_specs = Vec::with_capacity(k);
        for _ in 0..k {
            head_specs.push(HeadSpec::new(read_u32(&mut r)? as usize));
        }
        let layout = Layout {
            obs_dim,
            action_count,
            hidden,
            k,
        };
        let declared = read_u64(&mut r)? as usize;
        if declared != layout.total() {
            return Err(ApproxError::Shape {
                expected: layout.total(),
                got: declared,
            });
        }
        let mut params = vec![0.0; declared];
        let mut buf = [0u8; 8];
        for p in params.iter_mut() {
            r.read_exact(&mut buf)?;
            *p = f64::from_le_bytes(buf);
        }
        let cfg = EnsembleConfig {
            obs_dim,
            action_count,
            head_specs,
            backend,
            optimizer,
            trunk_grad_scale_by_heads: true,
        };
        Ok(Self {
            cfg,
            layout,
            params,
            adam: None,
        })
    }

    #[cfg(test)]
    pub(crate) fn params_slice(&self) -> &[f64] {
        &self.params
    }

    #[cfg(test)]
    pub(crate) fn head_params(&self, head: usize) -> &[f64] {
        let start = self.layout.head_offset(head);
        &self.params[start..start + self.layout.head_size()]
    }
}

fn loss_only(layout: &Layout, params: &[f64], head: usize, batch: &[(Vec<f64>, usize, f64)]) -> f64 {
    let mut loss = 0.0;
    for (obs, action, target) in batch {
        let values = forward_head_values(layout, params, head, obs);
        let err = values[*action] - target;
        loss += err * err;
    }
    loss / batch.len() as f64
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ApproxError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ApproxError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn mlp_config(obs_dim: usize, actions: usize, k: usize, hidden: usize) -> EnsembleConfig {
        EnsembleConfig {
            obs_dim,
            action_count: actions,
            head_specs: (0..k).map(|_| HeadSpec::new(1)).collect(),
            backend: Backend::Mlp { hidden },
            optimizer: Optimizer::Sgd,
            trunk_grad_scale_by_heads: true,
        }
    }

    fn tabular_config(states: usize, actions: usize, k: usize, init: f64) -> EnsembleConfig {
        EnsembleConfig {
            obs_dim: states,
            action_count: actions,
            head_specs: (0..k).map(|_| HeadSpec::new(1)).collect(),
            backend: Backend::Tabular { init_value: init },
            optimizer: Optimizer::Sgd,
            trunk_grad_scale_by_heads: true,
        }
    }

    fn one_hot(dim: usize, idx: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[idx] = 1.0;
        v
    }

    #[test]
    fn tabular_constant_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = EnsembleQFunction::new(tabular_config(4, 2, 3, 0.5), &mut rng);
        for k in 0..3 {
            for s in 0..4 {
                let vals = q.forward_head(k, &one_hot(4, s)).unwrap();
                assert!(vals.iter().all(|&v| v == 0.5));
            }
        }
    }

    #[test]
    fn tabular_full_step_hits_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut q = EnsembleQFunction::new(tabular_config(3, 2, 1, 0.0), &mut rng);
        let batch = vec![(one_hot(3, 1), 1usize, 4.5)];
        q.head_update(0, &batch, 1.0).unwrap();
        assert_eq!(q.forward_head(0, &one_hot(3, 1)).unwrap()[1], 4.5);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut q = EnsembleQFunction::new(mlp_config(3, 2, 2, 8), &mut rng);
        let obs = vec![0.2, -0.1, 0.4];
        let pred = q.forward_head(0, &obs).unwrap()[1];
        let before = q.params_slice().to_vec();
        let loss = q.head_update(0, &[(obs, 1, pred)], 0.1).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(q.params_slice(), &before[..]);
    }

    #[test]
    fn head_isolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut q = EnsembleQFunction::new(mlp_config(4, 3, 3, 8), &mut rng);
        let other_before: Vec<Vec<f64>> = [0, 2].iter().map(|&k| q.head_params(k).to_vec()).collect();
        let batch = vec![(vec![0.1, 0.9, -0.3, 0.5], 2usize, 1.0)];
        q.head_update(1, &batch, 0.05).unwrap();
        assert_eq!(q.head_params(0), &other_before[0][..]);
        assert_eq!(q.head_params(2), &other_before[1][..]);
    }

    #[test]
    fn snapshot_isolated_from_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut q = EnsembleQFunction::new(mlp_config(3, 2, 2, 6), &mut rng);
        let obs = vec![0.3, 0.3, -0.2];
        let snap = q.sync_targets();
        let snap_before = snap.forward_head(0, &obs).unwrap();
        assert_eq!(snap_before, q.forward_head(0, &obs).unwrap());
        q.head_update(0, &[(obs.clone(), 0, 5.0)], 0.5).unwrap();
        assert_eq!(snap.forward_head(0, &obs).unwrap(), snap_before);
        assert_ne!(q.forward_head(0, &obs).unwrap(), snap_before);
    }

    #[test]
    fn consecutive_syncs_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = EnsembleQFunction::new(mlp_config(3, 2, 1, 6), &mut rng);
        assert_eq!(q.sync_targets(), q.sync_targets());
    }

    #[test]
    fn gradient_check_small_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = EnsembleQFunction::new(mlp_config(5, 3, 2, 8), &mut rng);
        let obs: Vec<f64> = (0..5).map(|i| (i as f64 - 2.0) * 0.3).collect();
        let dev = q.gradient_check(1, &(obs, 1, 0.7)).unwrap();
        assert!(dev < 1e-4, "deviation {dev}");
    }

    #[test]
    fn gradient_check_tabular_not_applicable() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = EnsembleQFunction::new(tabular_config(3, 2, 1, 0.0), &mut rng);
        assert!(matches!(
            q.gradient_check(0, &(one_hot(3, 0), 0, 1.0)),
            Err(ApproxError::NotApplicable)
        ));
    }

    #[test]
    fn poisoned_target_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut q = EnsembleQFunction::new(mlp_config(2, 2, 1, 4), &mut rng);
        let err = q.head_update(0, &[(vec![0.1, 0.2], 0, f64::NAN)], 0.1);
        assert!(matches!(err, Err(ApproxError::PoisonedTarget)));
    }

    #[test]
    fn deterministic_initialization() {
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        let qa = EnsembleQFunction::new(mlp_config(4, 2, 3, 8), &mut a);
        let qb = EnsembleQFunction::new(mlp_config(4, 2, 3, 8), &mut b);
        assert_eq!(qa.params_slice(), qb.params_slice());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = EnsembleQFunction::new(mlp_config(4, 3, 2, 6), &mut rng);
        q.save(&path).unwrap();
        let loaded =
            EnsembleQFunction::load(&path, Backend::Mlp { hidden: 6 }, Optimizer::Sgd).unwrap();
        assert_eq!(loaded.params_slice(), q.params_slice());
        assert_eq!(loaded.config().head_specs, q.config().head_specs);
    }

    #[test]
    fn checkpoint_rejects_backend_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = EnsembleQFunction::new(mlp_config(4, 3, 2, 6), &mut rng);
        q.save(&path).unwrap();
        assert!(
            EnsembleQFunction::load(&path, Backend::Mlp { hidden: 12 }, Optimizer::Sgd).is_err()
        );
    }

    #[test]
    fn linear_case_matches_hand_gradient() {
        // Single hidden unit forced linear by a large positive bias would
        // change the loss surface; instead check the head layer directly:
        // pred = w·h + b, grad_w = 2(pred-target)·h.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut q = EnsembleQFunction::new(mlp_config(2, 2, 1, 4), &mut rng);
        let obs = vec![0.5, -0.25];
        let pred = q.forward_head(0, &obs).unwrap()[0];
        let target = pred + 1.0; // err = -1
        // Hidden activations at the current parameters.
        let before = q.forward_head(0, &obs).unwrap()[0];
        let lr = 0.01;
        q.head_update(0, &[(obs.clone(), 0, target)], lr).unwrap();
        let after = q.forward_head(0, &obs).unwrap()[0];
        // A gradient step against err = -1 must increase the prediction.
        assert!(after > before);
    }
}
