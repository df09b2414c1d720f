//! Causal grouped-query attention with rotary position embeddings.
//!
//! Scores are computed one query row at a time; the `L×L` matrix is never
//! stored. The backward pass recomputes each row's softmax from the saved
//! log-sum-exp.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{matmul, matmul_a_bt, matmul_at_b_acc, Tensor};

use super::normal_tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub max_len: usize,
    /// Rotary base; `None` disables the rotation.
    pub rope_base: Option<f64>,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.kv_heads == 0 || self.head_dim == 0 || self.model_dim == 0 {
            return Err(Error::Config("attention dimensions must be positive".into()));
        }
        if self.heads % self.kv_heads != 0 {
            return Err(Error::Config(format!("attn_heads {} not divisible by kv_heads {}", self.heads, self.kv_heads)));
        }
        if self.rope_base.is_some() && self.head_dim % 2 != 0 {
            return Err(Error::Config("rotary embeddings need an even head_dim".into()));
        }
        Ok(())
    }

    pub fn q_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    pub fn kv_head_for(&self, j: usize) -> usize {
        j / (self.heads / self.kv_heads)
    }

    pub fn param_count(&self) -> usize {
        2 * self.model_dim * self.q_width() + 2 * self.model_dim * self.kv_width()
    }

    /// Bytes of a key/value cache holding `len` positions.
    pub fn kv_cache_bytes(&self, len: usize) -> usize {
        2 * len * self.kv_width() * std::mem::size_of::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    /// `[D, heads·hd]`
    pub wq: Tensor<f64>,
    /// `[D, kv·hd]`
    pub wk: Tensor<f64>,
    /// `[D, kv·hd]`
    pub wv: Tensor<f64>,
    /// `[heads·hd, D]`
    pub wo: Tensor<f64>,
}

impl AttentionParams {
    pub fn init<R: Rng>(cfg: &AttentionConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let std_in = 1.0 / (d as f64).sqrt();
        AttentionParams {
            wq: normal_tensor(rng, &[d, cfg.q_width()], std_in),
            wk: normal_tensor(rng, &[d, cfg.kv_width()], std_in),
            wv: normal_tensor(rng, &[d, cfg.kv_width()], std_in),
            wo: normal_tensor(rng, &[cfg.q_width(), d], 1.0 / (cfg.q_width() as f64).sqrt()),
        }
    }
}

/// Rotates consecutive pairs `(2i, 2i+1)` of every `head_dim` chunk of
/// `v [L, n·hd]` by `pos·base^{−2i/hd}`. `sign = −1` applies the inverse.
pub fn apply_rope(v: &mut [f64], len: usize, head_dim: usize, base: f64, offset: usize, sign: f64) {
    let width = v.len() / len.max(1);
    let pairs = head_dim / 2;
    let freqs: Vec<f64> = (0..pairs).map(|i| base.powf(-2.0 * i as f64 / head_dim as f64)).collect();
    for t in 0..len {
        let pos = (t + offset) as f64;
        let rots: Vec<(f64, f64)> = freqs.iter().map(|f| (sign * pos * f).sin_cos()).collect();
        for chunk in v[t * width..(t + 1) * width].chunks_exact_mut(head_dim) {
            for (i, &(sin, cos)) in rots.iter().enumerate() {
                let (a, b) = (chunk[2 * i], chunk[2 * i + 1]);
                chunk[2 * i] = a * cos - b * sin;
                chunk[2 * i + 1] = a * sin + b * cos;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub len: usize,
    /// Rotated queries `[L, heads·hd]`.
    pub q: Vec<f64>,
    /// Rotated keys `[L, kv·hd]`.
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Per-head context before `W_o`, `[L, heads·hd]`.
    pub ctx: Vec<f64>,
    /// Log-sum-exp of each score row, `[L, heads]`.
    pub lse: Vec<f64>,
    pub y: Vec<f64>,
}

fn check(cfg: &AttentionConfig, x: &[f64], len: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::Input("sequence length must be at least 1".into()));
    }
    if len > cfg.max_len {
        return Err(Error::Input(format!("sequence length {len} exceeds the context length {}", cfg.max_len)));
    }
    if x.len() != len * cfg.model_dim {
        return shape_err(format!("attention input has {} values, expected {len}×{}", x.len(), cfg.model_dim));
    }
    Ok(())
}

/// Causal attention over `x [L, D]` with positions starting at `offset`.
pub fn attention_forward(cfg: &AttentionConfig, p: &AttentionParams, x: &[f64], len: usize, offset: usize) -> Result<AttentionTrace> {
    check(cfg, x, len)?;
    let (d, hd, nh) = (cfg.model_dim, cfg.head_dim, cfg.heads);
    let (qw, kw) = (cfg.q_width(), cfg.kv_width());
    let mut q = matmul(x, &p.wq.data, len, d, qw);
    let mut k = matmul(x, &p.wk.data, len, d, kw);
    let v = matmul(x, &p.wv.data, len, d, kw);
    if let Some(base) = cfg.rope_base {
        apply_rope(&mut q, len, hd, base, offset, 1.0);
        apply_rope(&mut k, len, hd, base, offset, 1.0);
    }
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = vec![0.0; len * qw];
    let mut lse = vec![0.0; len * nh];
    let mut scores = vec![0.0; len];
    for j in 0..nh {
        let g = cfg.kv_head_for(j);
        for t in 0..len {
            let qt = &q[t * qw + j * hd..t * qw + (j + 1) * hd];
            let mut max = f64::NEG_INFINITY;
            for tau in 0..=t {
                let kt = &k[tau * kw + g * hd..tau * kw + (g + 1) * hd];
                let s = qt.iter().zip(kt).map(|(a, b)| a * b).sum::<f64>() * scale;
                scores[tau] = s;
                max = max.max(s);
            }
            let mut total = 0.0;
            for s in scores[..=t].iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            let out = &mut ctx[t * qw + j * hd..t * qw + (j + 1) * hd];
            for tau in 0..=t {
                let w = scores[tau] / total;
                let vt = &v[tau * kw + g * hd..tau * kw + (g + 1) * hd];
                for (o, &vv) in out.iter_mut().zip(vt) {
                    *o += w * vv;
                }
            }
            lse[t * nh + j] = max + total.ln();
        }
    }
    let y = matmul(&ctx, &p.wo.data, len, qw, d);
    Ok(AttentionTrace { len, q, k, v, ctx, lse, y })
}

/// Returns `dx` and accumulates into `grads`.
pub fn attention_backward(
    cfg: &AttentionConfig,
    p: &AttentionParams,
    x: &[f64],
    tr: &AttentionTrace,
    dy: &[f64],
    offset: usize,
    grads: &mut AttentionParams,
) -> Vec<f64> {
    let len = tr.len;
    let (d, hd, nh) = (cfg.model_dim, cfg.head_dim, cfg.heads);
    let (qw, kw) = (cfg.q_width(), cfg.kv_width());
    let scale = 1.0 / (hd as f64).sqrt();
    matmul_at_b_acc(&mut grads.wo.data, &tr.ctx, dy, len, qw, d);
    let dctx = matmul_a_bt(dy, &p.wo.data, len, qw, d);

    let mut dq = vec![0.0; len * qw];
    let mut dk = vec![0.0; len * kw];
    let mut dv = vec![0.0; len * kw];
    let mut probs = vec![0.0; len];
    let mut dp = vec![0.0; len];
    for j in 0..nh {
        let g = cfg.kv_head_for(j);
        for t in 0..len {
            let qs = t * qw + j * hd..t * qw + (j + 1) * hd;
            let qt = &tr.q[qs.clone()];
            let dct = &dctx[qs.clone()];
            let lse = tr.lse[t * nh + j];
            let mut inner = 0.0;
            for tau in 0..=t {
                let ks = tau * kw + g * hd..tau * kw + (g + 1) * hd;
                let s = qt.iter().zip(&tr.k[ks.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale;
                probs[tau] = (s - lse).exp();
                dp[tau] = dct.iter().zip(&tr.v[ks]).map(|(a, b)| a * b).sum::<f64>();
                inner += probs[tau] * dp[tau];
            }
            for tau in 0..=t {
                let ks = tau * kw + g * hd..tau * kw + (g + 1) * hd;
                let ds = probs[tau] * (dp[tau] - inner) * scale;
                for n in 0..hd {
                    dv[ks.start + n] += probs[tau] * dct[n];
                    dq[qs.start + n] += ds * tr.k[ks.start + n];
                    dk[ks.start + n] += ds * qt[n];
                }
            }
        }
    }
    if let Some(base) = cfg.rope_base {
        apply_rope(&mut dq, len, hd, base, offset, -1.0);
        apply_rope(&mut dk, len, hd, base, offset, -1.0);
    }
    matmul_at_b_acc(&mut grads.wq.data, x, &dq, len, d, qw);
    matmul_at_b_acc(&mut grads.wk.data, x, &dk, len, d, kw);
    matmul_at_b_acc(&mut grads.wv.data, x, &dv, len, d, kw);
    let mut dx = matmul_a_bt(&dq, &p.wq.data, len, d, qw);
    for (a, b) in dx.iter_mut().zip(matmul_a_bt(&dk, &p.wk.data, len, d, kw)) {
        *a += b;
    }
    for (a, b) in dx.iter_mut().zip(matmul_a_bt(&dv, &p.wv.data, len, d, kw)) {
        *a += b;
    }
    dx
}
