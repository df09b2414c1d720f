//! Supervised training of the hybrid model on synthetic tasks.

pub mod bench;
pub mod optim;
pub mod tasks;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HybridModel;
use crate::tensor::log_softmax;
use crate::verify::{central_differences, relative_error, GradCheckReport, TensorGradCheck};
pub use optim::{adamw_update, OptimConfig, OptimState, UpdateInfo};
pub use tasks::{make_batch, make_eval_batch, Batch, TaskKind, TaskSpec};

/// Weighted cross-entropy of one sequence, divided by `norm`.
///
/// Returns the loss contribution, the number of weighted positions whose
/// arg-max equals the target, and `∂loss/∂logits`.
pub fn sequence_loss(logits: &[f64], targets: &[usize], weights: &[f64], vocab: usize, norm: f64) -> (f64, usize, Vec<f64>) {
    let mut loss = 0.0;
    let mut correct = 0;
    let mut dlogits = vec![0.0; logits.len()];
    for (t, (&target, &w)) in targets.iter().zip(weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let row = &logits[t * vocab..(t + 1) * vocab];
        let logp = log_softmax(row);
        loss -= w * logp[target] / norm;
        let argmax = row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
        if argmax == target {
            correct += 1;
        }
        for (c, d) in dlogits[t * vocab..(t + 1) * vocab].iter_mut().enumerate() {
            let onehot = if c == target { 1.0 } else { 0.0 };
            *d = w * (logp[c].exp() - onehot) / norm;
        }
    }
    (loss, correct, dlogits)
}

/// Loss, accuracy and summed gradients over a batch.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    /// Masked mean cross-entropy in nats.
    pub loss: f64,
    pub correct: usize,
    pub scored: usize,
    pub grads: HybridModel,
}

impl BatchGrad {
    pub fn accuracy(&self) -> f64 {
        if self.scored == 0 {
            0.0
        } else {
            self.correct as f64 / self.scored as f64
        }
    }
}

/// Masked mean cross-entropy and its gradient. Sequences are processed in
/// parallel and reduced in index order, so the result does not depend on
/// the thread count.
pub fn batch_loss_and_grad(model: &HybridModel, batch: &Batch) -> Result<BatchGrad> {
    let norm: f64 = batch.mask.iter().sum();
    if norm <= 0.0 {
        return Err(Error::Input("batch has no scored positions".into()));
    }
    let vocab = model.cfg.vocab_size;
    let parts: Vec<(f64, usize, HybridModel)> = (0..batch.batch)
        .into_par_iter()
        .map(|b| -> Result<_> {
            let (ids, targets, mask) = batch.row(b);
            let trace = model.forward_traced(ids)?;
            let (loss, correct, dlogits) = sequence_loss(&trace.logits, targets, mask, vocab, norm);
            if !loss.is_finite() {
                let norms: Vec<String> = trace.activation_norms().iter().map(|(n, v)| format!("{n}={v:.3e}")).collect();
                return Err(Error::NonFinite { path: format!("loss (sequence {b})"), detail: format!("activation rms: {}", norms.join(", ")) });
            }
            let mut g = model.zeros_like();
            model.backward(&trace, &dlogits, &mut g)?;
            Ok((loss, correct, g))
        })
        .collect::<Result<_>>()?;
    let mut grads = model.zeros_like();
    let mut loss = 0.0;
    let mut correct = 0;
    for (l, c, g) in parts {
        loss += l;
        correct += c;
        grads.add_assign(&g);
    }
    Ok(BatchGrad { loss, correct, scored: batch.mask.iter().filter(|&&m| m > 0.0).count(), grads })
}

/// Masked loss and accuracy without gradients.
pub fn evaluate(model: &HybridModel, batch: &Batch) -> Result<(f64, f64)> {
    let norm: f64 = batch.mask.iter().sum();
    let vocab = model.cfg.vocab_size;
    let parts: Vec<(f64, usize)> = (0..batch.batch)
        .into_par_iter()
        .map(|b| -> Result<_> {
            let (ids, targets, mask) = batch.row(b);
            let logits = model.lm_forward(ids)?;
            let (loss, correct, _) = sequence_loss(&logits, targets, mask, vocab, norm.max(1.0));
            Ok((loss, correct))
        })
        .collect::<Result<_>>()?;
    let scored = batch.mask.iter().filter(|&&m| m > 0.0).count().max(1);
    let loss = parts.iter().map(|p| p.0).sum();
    let correct: usize = parts.iter().map(|p| p.1).sum();
    Ok((loss, correct as f64 / scored as f64))
}

#[derive(Debug, Clone, Copy)]
pub struct StepResult {
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// One optimizer step on `batch`. The reported loss and accuracy are those
/// of the parameters before the update.
pub fn train_step(model: &mut HybridModel, batch: &Batch, cfg: &OptimConfig, state: &mut OptimState) -> Result<StepResult> {
    model.check_finite("parameter")?;
    let mut bg = batch_loss_and_grad(model, batch)?;
    let info = adamw_update(cfg, model, &mut bg.grads, state)?;
    Ok(StepResult { loss: bg.loss, accuracy: bg.accuracy(), lr: info.lr, grad_norm: info.grad_norm })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskSpec,
    pub batch_size: usize,
    pub steps: u64,
    #[serde(default)]
    pub optim: OptimConfig,
    /// Train on batch 0 at every step instead of a fresh batch.
    #[serde(default)]
    pub fixed_batch: bool,
    /// Checkpoint period in steps; `0` writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Record wall-clock time per step. Off, the metrics file is
    /// byte-identical across runs.
    #[serde(default = "default_true")]
    pub timing: bool,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.optim.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One metrics row as streamed to CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Trains from `state.step` up to `cfg.steps`, calling `on_step` after
/// every update (for streaming metrics and periodic checkpoints).
pub fn run_training(
    model: &mut HybridModel,
    state: &mut OptimState,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&MetricsRow, &HybridModel, &OptimState) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    if cfg.task.vocab_size > model.cfg.vocab_size {
        return Err(Error::Config(format!("task vocabulary {} exceeds the model's {}", cfg.task.vocab_size, model.cfg.vocab_size)));
    }
    if cfg.task.seq_len > model.cfg.max_len {
        return Err(Error::Config(format!("task seq_len {} exceeds the context length {}", cfg.task.seq_len, model.cfg.max_len)));
    }
    let fixed = cfg.fixed_batch.then(|| make_batch(&cfg.task, cfg.batch_size, 0)).transpose()?;
    let mut rows = Vec::new();
    while state.step < cfg.steps {
        let step = state.step;
        let started = Instant::now();
        let batch = match &fixed {
            Some(b) => b.clone(),
            None => make_batch(&cfg.task, cfg.batch_size, step)?,
        };
        let r = train_step(model, &batch, &cfg.optim, state)?;
        let wall_ms = if cfg.timing { started.elapsed().as_millis() as u64 } else { 0 };
        let row = MetricsRow { step, loss: r.loss, accuracy: r.accuracy, lr: r.lr, wall_ms };
        on_step(&row, model, state)?;
        rows.push(row);
    }
    Ok(rows)
}

/// Central-difference check of the full model's cross-entropy gradient on
/// one batch, tensor by tensor.
pub fn model_gradcheck(model: &HybridModel, batch: &Batch, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let bg = batch_loss_and_grad(model, batch)?;
    bg.grads.check_finite("gradient")?;
    let loss_of = |m: &HybridModel| -> f64 {
        let norm: f64 = batch.mask.iter().sum();
        (0..batch.batch)
            .map(|b| {
                let (ids, targets, mask) = batch.row(b);
                match m.lm_forward(ids) {
                    Ok(logits) => sequence_loss(&logits, targets, mask, m.cfg.vocab_size, norm).0,
                    Err(_) => f64::NAN,
                }
            })
            .sum()
    };
    let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = bg.grads.tensors().into_iter().map(|(_, t)| t.data.clone()).collect();
    let tensors: Vec<TensorGradCheck> = (0..names.len())
        .into_par_iter()
        .map(|ti| {
            let mut probe = model.clone();
            let mut values = probe.tensors_mut()[ti].data.clone();
            let fd = central_differences(&mut values, step, |v| {
                probe.tensors_mut()[ti].data.copy_from_slice(v);
                loss_of(&probe)
            });
            let max_abs = fd.iter().zip(&analytic[ti]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            TensorGradCheck { name: names[ti].clone(), entries: fd.len(), rel_error: relative_error(&fd, &analytic[ti]), max_abs_error: max_abs }
        })
        .collect();
    let max_rel = if tensors.iter().any(|t| t.rel_error.is_nan()) {
        f64::NAN
    } else {
        tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    };
    Ok(GradCheckReport { step, tolerance, tensors, max_rel_error: max_rel, pass: max_rel <= tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_loss_of_uniform_logits_is_log_vocab() {
        let v = 8;
        let logits = vec![0.0; 3 * v];
        let (loss, _, d) = sequence_loss(&logits, &[1, 2, 3], &[1.0, 0.0, 1.0], v, 2.0);
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
        assert!(d[v..2 * v].iter().all(|&x| x == 0.0));
        assert!((d[1] - (1.0 / 8.0 - 1.0) / 2.0).abs() < 1e-15);
        let row_sum: f64 = d[..v].iter().sum();
        assert!(row_sum.abs() < 1e-15);
    }

    #[test]
    fn sequence_loss_gradient() {
        let v = 5;
        let logits: Vec<f64> = (0..2 * v).map(|i| (i as f64 * 0.7).sin()).collect();
        let (_, _, d) = sequence_loss(&logits, &[3, 0], &[0.5, 2.0], v, 1.5);
        let fd = central_differences(&mut logits.clone(), 1e-6, |l| sequence_loss(l, &[3, 0], &[0.5, 2.0], v, 1.5).0);
        assert!(relative_error(&fd, &d) < 1e-8);
    }
}
