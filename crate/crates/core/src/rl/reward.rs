//! Reward mixing, group-relative advantages and the gradient algebra of
//! the RL stages.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::l2_norm;

/// One judge verdict: three criteria on `[1, 5]` and an overall score on
/// `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub s_reason: f64,
    pub s_answer: f64,
    pub s_follow: f64,
    pub s_overall: f64,
    #[serde(default)]
    pub overlong: bool,
}

impl JudgeScore {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("s_reason", self.s_reason), ("s_answer", self.s_answer), ("s_follow", self.s_follow)] {
            if !(1.0..=5.0).contains(&v) {
                return Err(Error::Input(format!("{name} = {v} is outside [1, 5]")));
            }
        }
        if !(0.0..=100.0).contains(&self.s_overall) {
            return Err(Error::Input(format!("s_overall = {} is outside [0, 100]", self.s_overall)));
        }
        Ok(())
    }
}

/// `0.5·(0.30 s_reason + 0.55 s_answer + 0.15 s_follow)/5 + 0.5·s_overall/100`,
/// minus `overlong_penalty` for overlong completions.
pub fn mix_reward(score: &JudgeScore, overlong_penalty: f64) -> Result<f64> {
    score.validate()?;
    let criteria = 0.30 * score.s_reason + 0.55 * score.s_answer + 0.15 * score.s_follow;
    let r = 0.5 * criteria / 5.0 + 0.5 * score.s_overall / 100.0;
    Ok(if score.overlong { r - overlong_penalty } else { r })
}

/// `A_i = r_i − r̄`, without standard-deviation scaling.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Input(format!("a group needs at least 2 completions, got {}", rewards.len())));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

/// A group counts as mastered when its mean overall score exceeds
/// `mean_above` and its minimum exceeds `min_above`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkipRule {
    pub mean_above: f64,
    pub min_above: f64,
}

impl Default for SkipRule {
    fn default() -> Self {
        SkipRule { mean_above: 90.0, min_above: 85.0 }
    }
}

pub fn skip_mastered(scores: &[JudgeScore], rule: &SkipRule) -> bool {
    if scores.is_empty() {
        return false;
    }
    let overall: Vec<f64> = scores.iter().map(|s| s.s_overall).collect();
    let mean = overall.iter().sum::<f64>() / overall.len() as f64;
    let min = overall.iter().cloned().fold(f64::INFINITY, f64::min);
    mean > rule.mean_above && min > rule.min_above
}

/// Token-level normalization: completion `i` carries `len_i / Σ len`.
pub fn token_weights(lengths: &[usize]) -> Vec<f64> {
    let total: usize = lengths.iter().sum();
    if total == 0 {
        return vec![0.0; lengths.len()];
    }
    lengths.iter().map(|&l| l as f64 / total as f64).collect()
}

/// Self-distillation trace weights: the advantage for positive-advantage
/// traces, zero otherwise.
pub fn distill_weights(rewards: &[f64]) -> Result<Vec<f64>> {
    Ok(compute_advantages(rewards)?.into_iter().map(|a| if a > 0.0 { a } else { 0.0 }).collect())
}

/// Result of combining the positive- and negative-advantage gradients.
#[derive(Debug, Clone)]
pub struct Balanced {
    pub grad: Vec<f64>,
    /// `‖g⁺‖ / (‖g⁻‖ + ε)`.
    pub scale: f64,
    pub pos_norm: f64,
    pub neg_norm: f64,
    /// `scale·‖g⁻‖`.
    pub scaled_neg_norm: f64,
}

/// `g = g⁺ + ‖g⁺‖/(‖g⁻‖ + ε) · g⁻`.
pub fn balanced_gradient(g_plus: &[f64], g_minus: &[f64], eps: f64) -> Result<Balanced> {
    if g_plus.len() != g_minus.len() {
        return shape_err(format!("g⁺ has {} entries, g⁻ has {}", g_plus.len(), g_minus.len()));
    }
    if !(eps > 0.0) {
        return Err(Error::Config("balance eps must be positive".into()));
    }
    let pos_norm = l2_norm(g_plus);
    let neg_norm = l2_norm(g_minus);
    let scale = pos_norm / (neg_norm + eps);
    let grad = g_plus.iter().zip(g_minus).map(|(p, n)| p + scale * n).collect();
    Ok(Balanced { grad, scale, pos_norm, neg_norm, scaled_neg_norm: scale * neg_norm })
}

/// Exact `KL(p ‖ q)` between two categorical distributions given as
/// log-probabilities.
pub fn categorical_kl(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter().zip(logq).map(|(&lp, &lq)| lp.exp() * (lp - lq)).sum()
}

/// `∂KL(softmax(z) ‖ q)/∂z_k = p_k (log p_k − log q_k − KL)`.
pub fn categorical_kl_grad(logp: &[f64], logq: &[f64]) -> Vec<f64> {
    let kl = categorical_kl(logp, logq);
    logp.iter().zip(logq).map(|(&lp, &lq)| lp.exp() * (lp - lq - kl)).collect()
}
