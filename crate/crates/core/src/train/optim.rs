//! AdamW with linear warmup and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HybridModel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only (tensors with ≥ 2 dims).
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 3e-4, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01, warmup_steps: 100, clip_norm: 1.0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Learning rate for 0-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Moment estimates, one tensor per model tensor in
/// [`HybridModel::tensors`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
}

impl OptimState {
    pub fn new(model: &HybridModel) -> Self {
        let zeros: Vec<Tensor<f64>> = model.tensors().iter().map(|(_, t)| t.zeros_like()).collect();
        OptimState { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// Outcome of one parameter update.
#[derive(Debug, Clone, Copy)]
pub struct UpdateInfo {
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Clips `grads` in place and applies one AdamW update to `model`.
pub fn adamw_update(cfg: &OptimConfig, model: &mut HybridModel, grads: &mut HybridModel, state: &mut OptimState) -> Result<UpdateInfo> {
    let grad_norm = grads.global_norm();
    if !grad_norm.is_finite() {
        grads.check_finite("gradient")?;
    }
    if cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm {
        grads.scale(cfg.clip_norm / grad_norm);
    }
    let lr = cfg.lr_at(state.step);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let params = model.tensors_mut();
    if params.len() != state.m.len() {
        return Err(Error::Checkpoint("optimizer state does not match the model".into()));
    }
    for (((p, (_, g)), m), v) in params.into_iter().zip(grads.tensors()).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        let decay = if p.shape.len() >= 2 { cfg.weight_decay } else { 0.0 };
        for n in 0..p.data.len() {
            let gn = g.data[n];
            m.data[n] = cfg.beta1 * m.data[n] + (1.0 - cfg.beta1) * gn;
            v.data[n] = cfg.beta2 * v.data[n] + (1.0 - cfg.beta2) * gn * gn;
            let mh = m.data[n] / bc1;
            let vh = v.data[n] / bc2;
            p.data[n] -= lr * (mh / (vh.sqrt() + cfg.eps) + decay * p.data[n]);
        }
    }
    Ok(UpdateInfo { lr, grad_norm })
}
