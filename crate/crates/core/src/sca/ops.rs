//! The six forward stages of the SCA layer and their parallel composition.
//!
//! Shapes use `L` for sequence length and the config letters `D, K, K', H,
//! M`. All buffers are flat and row-major in the order written.

use super::{ScaConfig, ScaLayer, ScaParams, SpectralGrid};
use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::{matmul, silu, softplus, softsign};

/// Output of projection, causal convolution and SiLU, split into branches.
#[derive(Debug, Clone)]
pub struct Mixed<T> {
    /// `W_in·x`, `[L, C]`.
    pub u: Vec<T>,
    /// After the depthwise convolution, before SiLU, `[L, C]`.
    pub v: Vec<T>,
    /// Keys `[L, K, H]`.
    pub k: Vec<T>,
    /// Scores `[L, K]`.
    pub s: Vec<T>,
    /// `[L, K', H, M]`
    pub q_re: Vec<T>,
    /// `[L, K', H, M]`
    pub q_im: Vec<T>,
}

/// Contribution weights and the pre-activation of their content gate.
#[derive(Debug, Clone)]
pub struct Alpha<T> {
    /// `γ·s + β`, `[L, K]`.
    pub pre: Vec<T>,
    /// `[L, K]`, strictly positive.
    pub alpha: Vec<T>,
}

/// Normalized running state.
#[derive(Debug, Clone)]
pub struct Scan<T> {
    /// `[L, K, H, M]`
    pub r_hat: Vec<T>,
    pub i_hat: Vec<T>,
    /// Running mass `Z_t`, `[L, K]`.
    pub z: Vec<T>,
}

/// Which accumulation kernel computes the prefix sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanBackend {
    /// Running sum, `O(L)`.
    Cumsum,
    /// Lower-triangular masked matmul, `O(L²)`.
    MaskedMatmul,
    /// Masked matmul up to [`SHORT_SEQUENCE`] positions, cumsum beyond.
    #[default]
    Auto,
}

pub const SHORT_SEQUENCE: usize = 64;

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub backend: ScanBackend,
    /// Common factor applied to every `α`; the output must not depend on it.
    pub alpha_scale: f64,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { backend: ScanBackend::Auto, alpha_scale: 1.0 }
    }
}

/// Caches of the output fusion, one row per position.
#[derive(Debug, Clone)]
pub struct Fused<T> {
    pub y: Vec<T>,
    /// `[o_re ; o_im]`, `[L, P]`.
    pub u2: Vec<T>,
    /// `[L]`
    pub inv_rms: Vec<T>,
    /// `W_gate·x`, `[L, P]`.
    pub gate: Vec<T>,
    /// Gated, normalized readout, `[L, P]`.
    pub y1: Vec<T>,
    /// SwiGLU pre-activations `[L, K', 2F]`.
    pub gu: Vec<T>,
    /// SwiGLU hidden `[L, K', F]`.
    pub hsw: Vec<T>,
    /// Per-head SwiGLU outputs `[L, P]`.
    pub out2: Vec<T>,
}

/// Every intermediate of one parallel forward pass.
#[derive(Debug, Clone)]
pub struct ScaTrace<T> {
    pub len: usize,
    pub mixed: Mixed<T>,
    pub alpha: Alpha<T>,
    pub r: Vec<T>,
    pub i: Vec<T>,
    pub scan: Scan<T>,
    pub o_re: Vec<T>,
    pub o_im: Vec<T>,
    pub fused: Fused<T>,
}

pub(crate) fn check_input<T>(cfg: &ScaConfig, x: &[T], len: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::Input("sequence length must be at least 1".into()));
    }
    if x.len() != len * cfg.model_dim {
        return shape_err(format!("input has {} values, expected {len}×{}", x.len(), cfg.model_dim));
    }
    Ok(())
}

/// Splits one post-SiLU row `z [C]` into keys, scores and query coordinates.
pub(crate) fn split_row<T: Real>(cfg: &ScaConfig, z: &[T], k: &mut [T], s: &mut [T], q_re: &mut [T], q_im: &mut [T]) {
    let kh = cfg.mem_heads * cfg.head_dim;
    k.copy_from_slice(&z[..kh]);
    s.copy_from_slice(&z[kh..kh + cfg.mem_heads]);
    let q = &z[cfg.mem_width()..];
    for (n, pair) in q.chunks_exact(2).enumerate() {
        q_re[n] = pair[0];
        q_im[n] = pair[1];
    }
}

/// Step 1: `SiLU(DWConv(W_in·x))` with `c−1` left zero padding, split into
/// the memory and query branches.
pub fn project_and_mix<T: Real>(cfg: &ScaConfig, params: &ScaParams<T>, x: &[T], len: usize) -> Result<Mixed<T>> {
    check_input(cfg, x, len)?;
    let d = cfg.model_dim;
    let c = cfg.channels();
    let taps = cfg.conv_kernel;
    let u = matmul(x, &params.w_in.data, len, d, c);
    let mut v = vec![T::zero(); len * c];
    for t in 0..len {
        for j in 0..taps {
            // tap j reads position t − (taps−1) + j
            let Some(src) = (t + j).checked_sub(taps - 1) else { continue };
            let urow = &u[src * c..(src + 1) * c];
            let vrow = &mut v[t * c..(t + 1) * c];
            for ch in 0..c {
                vrow[ch] += params.conv.data[ch * taps + j] * urow[ch];
            }
        }
    }
    let (kh, k, km) = (cfg.mem_heads * cfg.head_dim, cfg.mem_heads, cfg.query_heads * cfg.head_dim * cfg.spectral_samples);
    let mut mixed = Mixed {
        u,
        v: Vec::new(),
        k: vec![T::zero(); len * kh],
        s: vec![T::zero(); len * k],
        q_re: vec![T::zero(); len * km],
        q_im: vec![T::zero(); len * km],
    };
    let mut z = vec![T::zero(); c];
    for t in 0..len {
        for (zc, &vc) in z.iter_mut().zip(&v[t * c..(t + 1) * c]) {
            *zc = silu(vc);
        }
        split_row(
            cfg,
            &z,
            &mut mixed.k[t * kh..(t + 1) * kh],
            &mut mixed.s[t * k..(t + 1) * k],
            &mut mixed.q_re[t * km..(t + 1) * km],
            &mut mixed.q_im[t * km..(t + 1) * km],
        );
    }
    mixed.v = v;
    Ok(mixed)
}

/// Step 2: `α_t = softplus(γ·s_t + β)·exp(−λ·d(t))` with `d(t) = L−1−t`,
/// the distance to the right edge of the window.
pub fn contribution_weights<T: Real>(cfg: &ScaConfig, params: &ScaParams<T>, s: &[T], len: usize, alpha_scale: f64) -> Alpha<T> {
    let k = cfg.mem_heads;
    let lambdas = params.lambdas();
    let scale = T::lit(alpha_scale);
    let mut pre = vec![T::zero(); len * k];
    let mut alpha = vec![T::zero(); len * k];
    for t in 0..len {
        let dist = T::lit((len - 1 - t) as f64);
        for hk in 0..k {
            let a = params.gamma.data[hk] * s[t * k + hk] + params.beta.data[hk];
            pre[t * k + hk] = a;
            alpha[t * k + hk] = softplus(a) * (-lambdas[hk] * dist).exp() * scale;
        }
    }
    Alpha { pre, alpha }
}

/// Complex contribution of one position: `α·k·e^{iφ}`,
/// `φ = softsign(η·k)·θ`. Writes `[K, H, M]` rows.
pub(crate) fn encode_row<T: Real>(cfg: &ScaConfig, grid: &SpectralGrid<T>, eta: &[T], k: &[T], alpha: &[T], r: &mut [T], i: &mut [T]) {
    let (h, m) = (cfg.head_dim, cfg.spectral_samples);
    for hk in 0..cfg.mem_heads {
        for hd in 0..h {
            let kv = k[hk * h + hd];
            let ss = softsign(eta[hk] * kv);
            let amp = alpha[hk] * kv;
            for mm in 0..m {
                let idx = (hk * h + hd) * m + mm;
                let phi = ss * grid.theta.data[idx];
                let (sin, cos) = phi.sin_cos();
                r[idx] = amp * cos;
                i[idx] = amp * sin;
            }
        }
    }
}

/// Step 3 over all positions: `(r, i)` each `[L, K, H, M]`.
pub fn encode_complex<T: Real>(cfg: &ScaConfig, k: &[T], alpha: &[T], grid: &SpectralGrid<T>, params: &ScaParams<T>, len: usize) -> (Vec<T>, Vec<T>) {
    let khm = cfg.mem_heads * cfg.head_dim * cfg.spectral_samples;
    let kh = cfg.mem_heads * cfg.head_dim;
    let nk = cfg.mem_heads;
    let mut r = vec![T::zero(); len * khm];
    let mut i = vec![T::zero(); len * khm];
    for t in 0..len {
        let (rr, ir) = (&mut r[t * khm..(t + 1) * khm], &mut i[t * khm..(t + 1) * khm]);
        encode_row(cfg, grid, &params.eta.data, &k[t * kh..(t + 1) * kh], &alpha[t * nk..(t + 1) * nk], rr, ir);
    }
    (r, i)
}

/// Step 4: causal prefix sums normalized by the running mass,
/// `R̂_t = Σ_{τ≤t} r_τ / Σ_{τ≤t} α_τ` (same for `Î`).
pub fn scan_accumulate<T: Real>(cfg: &ScaConfig, r: &[T], i: &[T], alpha: &[T], len: usize, backend: ScanBackend) -> Result<Scan<T>> {
    let nk = cfg.mem_heads;
    let hm = cfg.head_dim * cfg.spectral_samples;
    let khm = nk * hm;
    let use_matmul = match backend {
        ScanBackend::Cumsum => false,
        ScanBackend::MaskedMatmul => true,
        ScanBackend::Auto => len <= SHORT_SEQUENCE,
    };
    let (mut big_r, mut big_i, mut z) = if use_matmul {
        // mask[t, τ] = [τ ≤ t]
        let mask: Vec<T> = (0..len * len)
            .map(|n| if n % len <= n / len { T::one() } else { T::zero() })
            .collect();
        (matmul(&mask, r, len, len, khm), matmul(&mask, i, len, len, khm), matmul(&mask, alpha, len, len, nk))
    } else {
        let mut big_r = r.to_vec();
        let mut big_i = i.to_vec();
        let mut z = alpha.to_vec();
        for t in 1..len {
            for n in 0..khm {
                let prev_r = big_r[(t - 1) * khm + n];
                let prev_i = big_i[(t - 1) * khm + n];
                big_r[t * khm + n] += prev_r;
                big_i[t * khm + n] += prev_i;
            }
            for n in 0..nk {
                let prev = z[(t - 1) * nk + n];
                z[t * nk + n] += prev;
            }
        }
        (big_r, big_i, z)
    };
    for t in 0..len {
        for hk in 0..nk {
            let mass = z[t * nk + hk];
            if !(mass > T::zero()) {
                return Err(Error::NumericalIntegrity(format!(
                    "running mass Z[{t}, {hk}] = {mass} is not strictly positive"
                )));
            }
            let base = t * khm + hk * hm;
            for n in base..base + hm {
                big_r[n] /= mass;
                big_i[n] /= mass;
            }
        }
    }
    z.shrink_to_fit();
    Ok(Scan { r_hat: big_r, i_hat: big_i, z })
}

/// One position of the Hermitian readout. `r_hat`/`i_hat` are `[K,H,M]`,
/// queries `[K',H,M]`, outputs `[K',H]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn readout_row<T: Real>(
    cfg: &ScaConfig,
    omega: &[T],
    r_hat: &[T],
    i_hat: &[T],
    q_re: &[T],
    q_im: &[T],
    o_re: &mut [T],
    o_im: &mut [T],
) {
    let (h, m) = (cfg.head_dim, cfg.spectral_samples);
    let inv_sqrt_h = T::one() / T::lit(h as f64).sqrt();
    for j in 0..cfg.query_heads {
        let mk = cfg.mem_head_for(j);
        for hd in 0..h {
            let mut acc_re = T::zero();
            let mut acc_im = T::zero();
            for mm in 0..m {
                let qi = (j * h + hd) * m + mm;
                let si = (mk * h + hd) * m + mm;
                let w = omega[qi];
                acc_re += w * (r_hat[si] * q_re[qi] + i_hat[si] * q_im[qi]);
                acc_im += w * (i_hat[si] * q_re[qi] - r_hat[si] * q_im[qi]);
            }
            o_re[j * h + hd] = acc_re * inv_sqrt_h;
            o_im[j * h + hd] = acc_im * inv_sqrt_h;
        }
    }
}

/// Step 5 over all positions: `(o_re, o_im)` each `[L, K', H]`.
pub fn spectral_readout<T: Real>(cfg: &ScaConfig, r_hat: &[T], i_hat: &[T], q_re: &[T], q_im: &[T], omega: &[T], len: usize) -> (Vec<T>, Vec<T>) {
    let khm = cfg.mem_heads * cfg.head_dim * cfg.spectral_samples;
    let qhm = cfg.query_heads * cfg.head_dim * cfg.spectral_samples;
    let qh = cfg.query_heads * cfg.head_dim;
    let mut o_re = vec![T::zero(); len * qh];
    let mut o_im = vec![T::zero(); len * qh];
    for t in 0..len {
        readout_row(
            cfg,
            omega,
            &r_hat[t * khm..(t + 1) * khm],
            &i_hat[t * khm..(t + 1) * khm],
            &q_re[t * qhm..(t + 1) * qhm],
            &q_im[t * qhm..(t + 1) * qhm],
            &mut o_re[t * qh..(t + 1) * qh],
            &mut o_im[t * qh..(t + 1) * qh],
        );
    }
    (o_re, o_im)
}

pub const RMS_EPS: f64 = 1e-6;

/// Caches of one fused row.
pub(crate) struct FusedRow<T> {
    pub y: Vec<T>,
    pub u2: Vec<T>,
    pub inv_rms: T,
    pub gate: Vec<T>,
    pub y1: Vec<T>,
    pub gu: Vec<T>,
    pub hsw: Vec<T>,
    pub out2: Vec<T>,
}

/// Step 6 for one position: gated RMS norm, per-head SwiGLU, `W_out`.
pub(crate) fn fuse_row<T: Real>(cfg: &ScaConfig, params: &ScaParams<T>, o_re: &[T], o_im: &[T], x: &[T]) -> FusedRow<T> {
    let d = cfg.model_dim;
    let h = cfg.head_dim;
    let qh = cfg.query_heads * h;
    let p = cfg.readout_width();
    let f = cfg.swiglu_hidden();

    let mut u2 = Vec::with_capacity(p);
    u2.extend_from_slice(o_re);
    u2.extend_from_slice(o_im);
    let ms = u2.iter().map(|&v| v * v).sum::<T>() / T::lit(p as f64);
    let inv_rms = T::one() / (ms + T::lit(RMS_EPS)).sqrt();
    let gate = matmul(x, &params.w_gate.data, 1, d, p);
    let y1: Vec<T> = (0..p)
        .map(|n| u2[n] * inv_rms * params.norm_scale.data[n] * silu(gate[n]))
        .collect();

    let mut gu = vec![T::zero(); cfg.query_heads * 2 * f];
    let mut hsw = vec![T::zero(); cfg.query_heads * f];
    let mut out2 = vec![T::zero(); p];
    let mut head_in = vec![T::zero(); 2 * h];
    for j in 0..cfg.query_heads {
        head_in[..h].copy_from_slice(&y1[j * h..(j + 1) * h]);
        head_in[h..].copy_from_slice(&y1[qh + j * h..qh + (j + 1) * h]);
        let w_read = &params.w_read.data[j * 2 * h * 2 * f..(j + 1) * 2 * h * 2 * f];
        let g = matmul(&head_in, w_read, 1, 2 * h, 2 * f);
        let hidden: Vec<T> = (0..f).map(|n| silu(g[n]) * g[f + n]).collect();
        let w_down = &params.w_down.data[j * f * 2 * h..(j + 1) * f * 2 * h];
        let down = matmul(&hidden, w_down, 1, f, 2 * h);
        out2[j * 2 * h..(j + 1) * 2 * h].copy_from_slice(&down);
        gu[j * 2 * f..(j + 1) * 2 * f].copy_from_slice(&g);
        hsw[j * f..(j + 1) * f].copy_from_slice(&hidden);
    }
    let y = matmul(&out2, &params.w_out.data, 1, p, d);
    FusedRow { y, u2, inv_rms, gate, y1, gu, hsw, out2 }
}

/// Step 6 over all positions. The residual connection is the caller's.
pub fn fuse_output<T: Real>(cfg: &ScaConfig, params: &ScaParams<T>, o_re: &[T], o_im: &[T], x: &[T], len: usize) -> Fused<T> {
    let d = cfg.model_dim;
    let qh = cfg.query_heads * cfg.head_dim;
    let p = cfg.readout_width();
    let f = cfg.swiglu_hidden();
    let mut out = Fused {
        y: Vec::with_capacity(len * d),
        u2: Vec::with_capacity(len * p),
        inv_rms: Vec::with_capacity(len),
        gate: Vec::with_capacity(len * p),
        y1: Vec::with_capacity(len * p),
        gu: Vec::with_capacity(len * cfg.query_heads * 2 * f),
        hsw: Vec::with_capacity(len * cfg.query_heads * f),
        out2: Vec::with_capacity(len * p),
    };
    for t in 0..len {
        let row = fuse_row(cfg, params, &o_re[t * qh..(t + 1) * qh], &o_im[t * qh..(t + 1) * qh], &x[t * d..(t + 1) * d]);
        out.y.extend(row.y);
        out.u2.extend(row.u2);
        out.inv_rms.push(row.inv_rms);
        out.gate.extend(row.gate);
        out.y1.extend(row.y1);
        out.gu.extend(row.gu);
        out.hsw.extend(row.hsw);
        out.out2.extend(row.out2);
    }
    out
}

impl<T: Real> ScaLayer<T> {
    /// Parallel forward pass keeping every intermediate.
    pub fn forward_traced(&self, x: &[T], len: usize, opts: ForwardOptions) -> Result<ScaTrace<T>> {
        let cfg = &self.cfg;
        let mixed = project_and_mix(cfg, &self.params, x, len)?;
        let alpha = contribution_weights(cfg, &self.params, &mixed.s, len, opts.alpha_scale);
        let (r, i) = encode_complex(cfg, &mixed.k, &alpha.alpha, &self.grid, &self.params, len);
        let scan = scan_accumulate(cfg, &r, &i, &alpha.alpha, len, opts.backend)?;
        let (o_re, o_im) = spectral_readout(cfg, &scan.r_hat, &scan.i_hat, &mixed.q_re, &mixed.q_im, &self.grid.omega.data, len);
        let fused = fuse_output(cfg, &self.params, &o_re, &o_im, x, len);
        Ok(ScaTrace { len, mixed, alpha, r, i, scan, o_re, o_im, fused })
    }

    /// Parallel (training-mode) forward: `x [L, D] -> y [L, D]`.
    pub fn forward_parallel(&self, x: &[T], len: usize) -> Result<Vec<T>> {
        self.forward_with(x, len, ForwardOptions::default())
    }

    pub fn forward_with(&self, x: &[T], len: usize, opts: ForwardOptions) -> Result<Vec<T>> {
        Ok(self.forward_traced(x, len, opts)?.fused.y)
    }
}
