//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{CalmError, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 5,
            max_steps: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(CalmError::config("optim.lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(CalmError::config("optim.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(CalmError::config("optim.beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(CalmError::config("optim.eps", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(CalmError::config("optim.weight_decay", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(CalmError::config("optim.batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// First and second moments for every tensor in a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamWState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.second[index]
    }
}

/// One update of every trainable tensor in `store` from its accumulated
/// gradient. Nothing is modified if any gradient is non-finite.
pub fn adamw_step(store: &mut ParamStore, state: &mut AdamWState, cfg: &OptimConfig) -> Result<()> {
    if state.first.len() != store.len() {
        return Err(CalmError::Contract(format!(
            "optimizer state tracks {} tensors, store has {}",
            state.first.len(),
            store.len()
        )));
    }
    for (name, t) in store.iter() {
        if !t.requires_grad() {
            continue;
        }
        if let Some(g) = t.grad() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(CalmError::NumericDomain(format!(
                    "gradient of {name}[{i}] is {}",
                    g[i]
                )));
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let tensor = store.get_mut(id);
        if !tensor.requires_grad() {
            continue;
        }
        let grad = tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tensor.numel()]);
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p -= cfg.lr * cfg.weight_decay * *p;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
