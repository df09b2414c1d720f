//! Autoregressive sampling with temperature and top-k.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::HybridModel;
use crate::tensor::softmax;
use crate::train::tasks::EOS;

/// Draws one token from `logits`. `temperature = 0` is greedy; `top_k = 0`
/// keeps the whole vocabulary.
pub fn sample_token<R: Rng>(logits: &[f64], temperature: f64, top_k: usize, rng: &mut R) -> usize {
    let argmax = logits.iter().enumerate().fold(0, |best, (i, &v)| if v > logits[best] { i } else { best });
    if temperature <= 0.0 {
        return argmax;
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    if top_k > 0 && top_k < logits.len() {
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        order.truncate(top_k);
    }
    let scaled: Vec<f64> = order.iter().map(|&i| logits[i] / temperature).collect();
    let probs = softmax(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (&i, p) in order.iter().zip(&probs) {
        acc += p;
        if u < acc {
            return i;
        }
    }
    *order.last().expect("non-empty vocabulary")
}

/// A sampled continuation of a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub tokens: Vec<usize>,
    /// Budget exhausted before the terminator.
    pub overlong: bool,
}

/// Samples up to `max_new` tokens after `prompt`, stopping at the
/// terminator.
pub fn generate<R: Rng>(model: &HybridModel, prompt: &[usize], max_new: usize, temperature: f64, top_k: usize, rng: &mut R) -> Result<Completion> {
    if max_new == 0 {
        return Err(Error::Config("max_new_tokens must be positive".into()));
    }
    if prompt.len() + max_new > model.cfg.max_len {
        return Err(Error::Config(format!("prompt plus {max_new} new tokens exceeds the context length {}", model.cfg.max_len)));
    }
    let v = model.cfg.vocab_size;
    let mut seq = prompt.to_vec();
    let mut tokens = Vec::new();
    for _ in 0..max_new {
        let logits = model.lm_forward(&seq)?;
        let last = &logits[(seq.len() - 1) * v..];
        let tok = sample_token(last, temperature, top_k, rng);
        tokens.push(tok);
        seq.push(tok);
        if tok == EOS {
            return Ok(Completion { tokens, overlong: false });
        }
    }
    Ok(Completion { tokens, overlong: true })
}
