//! Decoder-only hybrid language model.
//!
//! The stack repeats a motif of layer kinds, by default `SSA`: two SCA
//! layers then one transformer layer. Every layer is pre-norm residual:
//!
//! * SCA layer: `x + SCA(RMSNorm(x))`
//! * transformer layer: `x' = x + Attn(RMSNorm(x))`, then
//!   `x' + FFN(RMSNorm(x'))`
//!
//! A final RMSNorm feeds the LM head, which by default reuses the
//! embedding matrix.

pub mod attention;
pub mod nn;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::sca::{ForwardOptions, ScaConfig, ScaLayer, ScaTrace};
use crate::tensor::{add_assign, matmul, matmul_a_bt, matmul_at_b_acc, Tensor};
use attention::{attention_backward, attention_forward, AttentionConfig, AttentionParams, AttentionTrace};
use nn::{rms_norm, rms_norm_backward, swiglu, swiglu_backward, FfnGrads, FfnTrace};

pub(crate) fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Sca,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    /// Number of motif repetitions.
    pub n_blocks: usize,
    pub ffn_dim: usize,
    pub attn_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    /// Context length `L_max`.
    pub max_len: usize,
    /// Layer kinds of one block, bottom first: `S` for SCA, `A` for a
    /// transformer layer.
    pub motif: String,
    pub tie_embeddings: bool,
    pub rope_base: f64,
    pub sca: ScaConfig,
}

fn ffn_dim_for(d: usize) -> usize {
    (8.0 * d as f64 / 3.0).round() as usize
}

impl ModelConfig {
    /// Desk-scale default: `D = 64`, two `SSA` blocks, 64 symbols.
    pub fn toy() -> Self {
        let d = 64;
        let mut sca = ScaConfig::desk(d);
        sca.seq_len_max = 256;
        ModelConfig {
            vocab_size: 64,
            model_dim: d,
            n_blocks: 2,
            ffn_dim: ffn_dim_for(d),
            attn_heads: 4,
            kv_heads: 2,
            head_dim: 16,
            max_len: 256,
            motif: "SSA".into(),
            tie_embeddings: true,
            rope_base: 10000.0,
            sca,
        }
    }

    /// The smallest useful stack (`D = 16`, one block), used for full-model
    /// gradient checks and overfitting smoke tests.
    pub fn micro() -> Self {
        let d = 16;
        ModelConfig {
            vocab_size: 16,
            model_dim: d,
            n_blocks: 1,
            ffn_dim: ffn_dim_for(d),
            attn_heads: 2,
            kv_heads: 1,
            head_dim: 8,
            max_len: 16,
            motif: "SSA".into(),
            tie_embeddings: true,
            rope_base: 10000.0,
            sca: ScaConfig {
                model_dim: d,
                mem_heads: 2,
                query_heads: 2,
                head_dim: 4,
                spectral_samples: 2,
                conv_kernel: 3,
                expand_factor: 2,
                swiglu_expansion: 3,
                seq_len_max: 16,
                precision: crate::Precision::F64,
            },
        }
    }

    /// The reference configuration (`cl100k_base` vocabulary, 24 layers).
    /// Only used for parameter arithmetic.
    pub fn full_scale() -> Self {
        ModelConfig {
            vocab_size: 100_277,
            model_dim: 1024,
            n_blocks: 8,
            ffn_dim: 2730,
            attn_heads: 16,
            kv_heads: 4,
            head_dim: 64,
            max_len: 1024,
            motif: "SSA".into(),
            tie_embeddings: true,
            rope_base: 10000.0,
            sca: ScaConfig::full_scale(),
        }
    }

    pub fn layer_kinds(&self) -> Result<Vec<LayerKind>> {
        let block: Vec<LayerKind> = self
            .motif
            .chars()
            .map(|c| match c {
                'S' => Ok(LayerKind::Sca),
                'A' => Ok(LayerKind::Attention),
                other => Err(Error::Config(format!("motif symbol {other:?} is not S or A"))),
            })
            .collect::<Result<_>>()?;
        if block.is_empty() {
            return Err(Error::Config("motif must not be empty".into()));
        }
        Ok((0..self.n_blocks).flat_map(|_| block.iter().copied()).collect())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.model_dim,
            heads: self.attn_heads,
            kv_heads: self.kv_heads,
            head_dim: self.head_dim,
            max_len: self.max_len,
            rope_base: Some(self.rope_base),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("n_blocks", self.n_blocks),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        self.layer_kinds()?;
        self.attention().validate()?;
        self.sca.validate()?;
        if self.sca.model_dim != self.model_dim {
            return Err(Error::Config(format!("sca.model_dim {} differs from model_dim {}", self.sca.model_dim, self.model_dim)));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::Config("rope_base must exceed 1".into()));
        }
        Ok(())
    }

    /// Parameter count from the config alone.
    pub fn param_count(&self) -> Result<usize> {
        let (v, d) = (self.vocab_size, self.model_dim);
        let mut total = v * d + d;
        if !self.tie_embeddings {
            total += d * v;
        }
        for kind in self.layer_kinds()? {
            total += match kind {
                LayerKind::Sca => d + self.sca.param_count(),
                LayerKind::Attention => 2 * d + self.attention().param_count() + 3 * d * self.ffn_dim,
            };
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaBlock {
    pub norm: Tensor<f64>,
    pub sca: ScaLayer<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub attn_norm: Tensor<f64>,
    pub attn: AttentionParams,
    pub ffn_norm: Tensor<f64>,
    /// `[D, D_ff]`
    pub w_gate: Tensor<f64>,
    /// `[D, D_ff]`
    pub w_up: Tensor<f64>,
    /// `[D_ff, D]`
    pub w_down: Tensor<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Sca(ScaBlock),
    Attention(AttentionBlock),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridModel {
    pub cfg: ModelConfig,
    /// `[V, D]`
    pub embed: Tensor<f64>,
    pub layers: Vec<Layer>,
    pub final_norm: Tensor<f64>,
    /// `[D, V]`, present only without weight tying.
    pub lm_head: Option<Tensor<f64>>,
}

/// Intermediates of one sequence's forward pass.
#[derive(Debug, Clone)]
pub struct ModelTrace {
    pub ids: Vec<usize>,
    /// Input to each layer, then the input to the final norm.
    pub hidden: Vec<Vec<f64>>,
    pub layers: Vec<LayerTrace>,
    pub final_inv: Vec<f64>,
    pub final_out: Vec<f64>,
    /// `[L, V]`
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum LayerTrace {
    Sca {
        normed: Vec<f64>,
        inv: Vec<f64>,
        trace: Box<ScaTrace<f64>>,
    },
    Attention {
        normed: Vec<f64>,
        inv: Vec<f64>,
        attn: AttentionTrace,
        mid: Vec<f64>,
        ffn_normed: Vec<f64>,
        ffn_inv: Vec<f64>,
        ffn: FfnTrace,
    },
}

impl HybridModel {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let embed = normal_tensor(rng, &[cfg.vocab_size, d], 1.0 / (d as f64).sqrt());
        let mut layers = Vec::new();
        for kind in cfg.layer_kinds()? {
            layers.push(match kind {
                LayerKind::Sca => Layer::Sca(ScaBlock { norm: Tensor::filled(&[d], 1.0), sca: ScaLayer::init(&cfg.sca, rng)? }),
                LayerKind::Attention => Layer::Attention(AttentionBlock {
                    attn_norm: Tensor::filled(&[d], 1.0),
                    attn: AttentionParams::init(&cfg.attention(), rng),
                    ffn_norm: Tensor::filled(&[d], 1.0),
                    w_gate: normal_tensor(rng, &[d, cfg.ffn_dim], 1.0 / (d as f64).sqrt()),
                    w_up: normal_tensor(rng, &[d, cfg.ffn_dim], 1.0 / (d as f64).sqrt()),
                    w_down: normal_tensor(rng, &[cfg.ffn_dim, d], 1.0 / (cfg.ffn_dim as f64).sqrt()),
                }),
            });
        }
        let lm_head = (!cfg.tie_embeddings).then(|| normal_tensor(rng, &[d, cfg.vocab_size], 1.0 / (d as f64).sqrt()));
        Ok(HybridModel { cfg: cfg.clone(), embed, layers, final_norm: Tensor::filled(&[d], 1.0), lm_head })
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<f64>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (n, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Sca(b) => {
                    out.push((format!("layers.{n}.norm"), &b.norm));
                    for (name, t) in b.sca.tensors() {
                        out.push((format!("layers.{n}.sca.{name}"), t));
                    }
                }
                Layer::Attention(b) => {
                    out.push((format!("layers.{n}.attn_norm"), &b.attn_norm));
                    out.push((format!("layers.{n}.attn.wq"), &b.attn.wq));
                    out.push((format!("layers.{n}.attn.wk"), &b.attn.wk));
                    out.push((format!("layers.{n}.attn.wv"), &b.attn.wv));
                    out.push((format!("layers.{n}.attn.wo"), &b.attn.wo));
                    out.push((format!("layers.{n}.ffn_norm"), &b.ffn_norm));
                    out.push((format!("layers.{n}.ffn.w_gate"), &b.w_gate));
                    out.push((format!("layers.{n}.ffn.w_up"), &b.w_up));
                    out.push((format!("layers.{n}.ffn.w_down"), &b.w_down));
                }
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        if let Some(head) = &self.lm_head {
            out.push(("lm_head".into(), head));
        }
        out
    }

    /// Same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut out = vec![&mut self.embed];
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Sca(b) => {
                    out.push(&mut b.norm);
                    out.extend(b.sca.tensors_mut());
                }
                Layer::Attention(b) => {
                    out.push(&mut b.attn_norm);
                    out.push(&mut b.attn.wq);
                    out.push(&mut b.attn.wk);
                    out.push(&mut b.attn.wv);
                    out.push(&mut b.attn.wo);
                    out.push(&mut b.ffn_norm);
                    out.push(&mut b.w_gate);
                    out.push(&mut b.w_up);
                    out.push(&mut b.w_down);
                }
            }
        }
        out.push(&mut self.final_norm);
        if let Some(head) = &mut self.lm_head {
            out.push(head);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &HybridModel) {
        for (a, (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            add_assign(&mut a.data, &b.data);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|(_, t)| t.data.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Flattened copy of every parameter in [`Self::tensors`] order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t)| t.data.iter().copied()).collect()
    }

    /// Inverse of [`Self::flat`].
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return shape_err(format!("flat vector has {} values, model has {}", values.len(), self.param_count()));
        }
        let mut at = 0;
        for t in self.tensors_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Fails with the offending tensor's name on the first NaN or infinity.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        for (name, t) in self.tensors() {
            if !t.all_finite() {
                return Err(Error::NonFinite { path: name, detail: what.into() });
            }
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if ids.len() > self.cfg.max_len {
            return Err(Error::Input(format!("sequence length {} exceeds the context length {}", ids.len(), self.cfg.max_len)));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(Error::Input(format!("token id {bad} out of range for vocabulary {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    /// Applies layer `n` to `x [L, D]`, residual included.
    pub fn layer_forward(&self, n: usize, x: &[f64], len: usize) -> Result<Vec<f64>> {
        Ok(self.layer_traced(n, x, len)?.0)
    }

    /// Applies every layer of block `b` in order.
    pub fn block_forward(&self, b: usize, x: &[f64], len: usize) -> Result<Vec<f64>> {
        let per = self.cfg.motif.len();
        if b >= self.cfg.n_blocks {
            return Err(Error::Input(format!("block {b} out of range")));
        }
        let mut h = x.to_vec();
        for n in b * per..(b + 1) * per {
            h = self.layer_forward(n, &h, len)?;
        }
        Ok(h)
    }

    fn layer_traced(&self, n: usize, x: &[f64], len: usize) -> Result<(Vec<f64>, LayerTrace)> {
        let d = self.cfg.model_dim;
        if x.len() != len * d {
            return shape_err(format!("layer input has {} values, expected {len}×{d}", x.len()));
        }
        match &self.layers[n] {
            Layer::Sca(b) => {
                let (normed, inv) = rms_norm(x, &b.norm.data, len);
                let trace = b.sca.forward_traced(&normed, len, ForwardOptions::default())?;
                let mut y = x.to_vec();
                add_assign(&mut y, &trace.fused.y);
                Ok((y, LayerTrace::Sca { normed, inv, trace: Box::new(trace) }))
            }
            Layer::Attention(b) => {
                let (normed, inv) = rms_norm(x, &b.attn_norm.data, len);
                let attn = attention_forward(&self.cfg.attention(), &b.attn, &normed, len, 0)?;
                let mut mid = x.to_vec();
                add_assign(&mut mid, &attn.y);
                let (ffn_normed, ffn_inv) = rms_norm(&mid, &b.ffn_norm.data, len);
                let (f_out, ffn) = swiglu(&ffn_normed, &b.w_gate.data, &b.w_up.data, &b.w_down.data, len, d, self.cfg.ffn_dim);
                let mut y = mid.clone();
                add_assign(&mut y, &f_out);
                Ok((y, LayerTrace::Attention { normed, inv, attn, mid, ffn_normed, ffn_inv, ffn }))
            }
        }
    }

    /// Token embeddings of `ids`.
    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Vec<f64>> {
        self.check_ids(ids)?;
        let d = self.cfg.model_dim;
        Ok(ids.iter().flat_map(|&id| self.embed.data[id * d..(id + 1) * d].iter().copied()).collect())
    }

    pub fn forward_traced(&self, ids: &[usize]) -> Result<ModelTrace> {
        let len = ids.len();
        let (d, v) = (self.cfg.model_dim, self.cfg.vocab_size);
        let mut h = self.embed_tokens(ids)?;
        let mut hidden = Vec::with_capacity(self.layers.len() + 1);
        let mut layers = Vec::with_capacity(self.layers.len());
        for n in 0..self.layers.len() {
            let (next, tr) = self.layer_traced(n, &h, len)?;
            hidden.push(std::mem::replace(&mut h, next));
            layers.push(tr);
        }
        let (final_out, final_inv) = rms_norm(&h, &self.final_norm.data, len);
        hidden.push(h);
        let logits = match &self.lm_head {
            None => matmul_a_bt(&final_out, &self.embed.data, len, v, d),
            Some(head) => matmul(&final_out, &head.data, len, d, v),
        };
        Ok(ModelTrace { ids: ids.to_vec(), hidden, layers, final_inv, final_out, logits })
    }

    /// `ids [L] -> logits [L, V]`.
    pub fn lm_forward(&self, ids: &[usize]) -> Result<Vec<f64>> {
        Ok(self.forward_traced(ids)?.logits)
    }

    /// Back-propagates `dlogits [L, V]` through a recorded pass and adds the
    /// parameter gradients into `grads`.
    pub fn backward(&self, tr: &ModelTrace, dlogits: &[f64], grads: &mut HybridModel) -> Result<()> {
        let len = tr.ids.len();
        let (d, v) = (self.cfg.model_dim, self.cfg.vocab_size);
        if dlogits.len() != len * v {
            return shape_err(format!("dlogits has {} values, expected {len}×{v}", dlogits.len()));
        }
        let dfinal = match (&self.lm_head, &mut grads.lm_head) {
            (Some(head), Some(g)) => {
                matmul_at_b_acc(&mut g.data, &tr.final_out, dlogits, len, d, v);
                matmul_a_bt(dlogits, &head.data, len, d, v)
            }
            (None, None) => {
                matmul_at_b_acc(&mut grads.embed.data, dlogits, &tr.final_out, len, v, d);
                matmul(dlogits, &self.embed.data, len, v, d)
            }
            _ => return shape_err("gradient container does not match the model's head"),
        };
        let mut dh = rms_norm_backward(&tr.hidden[self.layers.len()], &self.final_norm.data, &tr.final_inv, &dfinal, &mut grads.final_norm.data);

        for n in (0..self.layers.len()).rev() {
            let x = &tr.hidden[n];
            match (&self.layers[n], &tr.layers[n], &mut grads.layers[n]) {
                (Layer::Sca(b), LayerTrace::Sca { normed, inv, trace }, Layer::Sca(g)) => {
                    let sg = b.sca.backward_from_trace(normed, trace, &dh, 1.0)?;
                    for (acc, (_, t)) in g.sca.tensors_mut().into_iter().zip(sg.params.tensors()) {
                        add_assign(&mut acc.data, &t.data);
                    }
                    let dx = rms_norm_backward(x, &b.norm.data, inv, &sg.x, &mut g.norm.data);
                    add_assign(&mut dh, &dx);
                }
                (Layer::Attention(b), LayerTrace::Attention { normed, inv, attn, mid, ffn_normed, ffn_inv, ffn }, Layer::Attention(g)) => {
                    let f = self.cfg.ffn_dim;
                    let grads_ffn = FfnGrads { w_gate: &mut g.w_gate.data, w_up: &mut g.w_up.data, w_down: &mut g.w_down.data };
                    let dn2 = swiglu_backward(ffn_normed, &b.w_gate.data, &b.w_up.data, &b.w_down.data, ffn, &dh, grads_ffn, len, d, f);
                    let dmid = rms_norm_backward(mid, &b.ffn_norm.data, ffn_inv, &dn2, &mut g.ffn_norm.data);
                    add_assign(&mut dh, &dmid);
                    let dn1 = attention_backward(&self.cfg.attention(), &b.attn, normed, attn, &dh, 0, &mut g.attn);
                    let dx = rms_norm_backward(x, &b.attn_norm.data, inv, &dn1, &mut g.attn_norm.data);
                    add_assign(&mut dh, &dx);
                }
                _ => return shape_err(format!("layer {n}: trace or gradient kind mismatch")),
            }
        }
        for (t, &id) in tr.ids.iter().enumerate() {
            add_assign(&mut grads.embed.data[id * d..(id + 1) * d], &dh[t * d..(t + 1) * d]);
        }
        Ok(())
    }
}

impl ModelTrace {
    /// Root-mean-square of the residual stream entering each layer and the
    /// final norm; used to diagnose divergence.
    pub fn activation_norms(&self) -> Vec<(String, f64)> {
        let n = self.hidden.len();
        self.hidden
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let name = if i + 1 == n { "final_norm.input".to_string() } else { format!("layers.{i}.input") };
                let rms = (h.iter().map(|v| v * v).sum::<f64>() / h.len().max(1) as f64).sqrt();
                (name, rms)
            })
            .collect()
    }
}
