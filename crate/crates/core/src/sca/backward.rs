//! Reverse-mode gradients of the parallel SCA forward pass (double
//! precision). Intermediates come from [`ScaTrace`]; the pass walks the six
//! stages backwards.

use super::ops::{ForwardOptions, ScaTrace};
use super::ScaLayer;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{matmul_a_bt, matmul_at_b_acc, sigmoid, silu, silu_grad, softsign, softsign_grad};

/// Gradients of a scalar loss with respect to every tensor of the layer
/// (stored in a layer-shaped container) and to the input.
#[derive(Debug, Clone)]
pub struct ScaGrads {
    pub params: ScaLayer<f64>,
    pub x: Vec<f64>,
}

impl ScaGrads {
    pub fn check_finite(&self, prefix: &str) -> Result<()> {
        for (name, t) in self.params.tensors() {
            if !t.all_finite() {
                return Err(Error::NonFinite { path: format!("{prefix}{name}"), detail: "gradient".into() });
            }
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { path: format!("{prefix}input"), detail: "gradient".into() });
        }
        Ok(())
    }
}

impl ScaLayer<f64> {
    /// Recomputes the forward pass and back-propagates `dy [L, D]`.
    pub fn backward(&self, x: &[f64], len: usize, dy: &[f64]) -> Result<ScaGrads> {
        let trace = self.forward_traced(x, len, ForwardOptions::default())?;
        self.backward_from_trace(x, &trace, dy, 1.0)
    }

    /// Back-propagates through a recorded forward pass. `alpha_scale` must
    /// match the one used for the trace.
    pub fn backward_from_trace(&self, x: &[f64], tr: &ScaTrace<f64>, dy: &[f64], alpha_scale: f64) -> Result<ScaGrads> {
        let cfg = &self.cfg;
        let p = &self.params;
        let len = tr.len;
        let d = cfg.model_dim;
        if dy.len() != len * d || x.len() != len * d {
            return shape_err(format!("backward expects {len}×{d} input and upstream gradient"));
        }
        let (nk, nq, h, m) = (cfg.mem_heads, cfg.query_heads, cfg.head_dim, cfg.spectral_samples);
        let c = cfg.channels();
        let taps = cfg.conv_kernel;
        let pw = cfg.readout_width();
        let f = cfg.swiglu_hidden();
        let qh = nq * h;
        let qhm = qh * m;
        let kh = nk * h;
        let khm = kh * m;

        let mut g = self.zeros_like();
        let mut dx = vec![0.0; len * d];

        // ---- Step 6: output fusion -------------------------------------
        let fu = &tr.fused;
        matmul_at_b_acc(&mut g.params.w_out.data, &fu.out2, dy, len, pw, d);
        let d_out2 = matmul_a_bt(dy, &p.w_out.data, len, pw, d);

        let mut d_y1 = vec![0.0; len * pw];
        let mut head_in = vec![0.0; 2 * h];
        for t in 0..len {
            for j in 0..nq {
                let d_down = &d_out2[t * pw + j * 2 * h..t * pw + (j + 1) * 2 * h];
                let hidden = &fu.hsw[(t * nq + j) * f..(t * nq + j + 1) * f];
                let w_down = &p.w_down.data[j * f * 2 * h..(j + 1) * f * 2 * h];
                matmul_at_b_acc(&mut g.params.w_down.data[j * f * 2 * h..(j + 1) * f * 2 * h], hidden, d_down, 1, f, 2 * h);
                let d_hidden = matmul_a_bt(d_down, w_down, 1, f, 2 * h);

                let gu = &fu.gu[(t * nq + j) * 2 * f..(t * nq + j + 1) * 2 * f];
                let mut dg = vec![0.0; 2 * f];
                for n in 0..f {
                    let (a, b) = (gu[n], gu[f + n]);
                    dg[n] = d_hidden[n] * b * silu_grad(a);
                    dg[f + n] = d_hidden[n] * silu(a);
                }
                let y1 = &fu.y1[t * pw..(t + 1) * pw];
                head_in[..h].copy_from_slice(&y1[j * h..(j + 1) * h]);
                head_in[h..].copy_from_slice(&y1[qh + j * h..qh + (j + 1) * h]);
                let rs = j * 2 * h * 2 * f..(j + 1) * 2 * h * 2 * f;
                matmul_at_b_acc(&mut g.params.w_read.data[rs.clone()], &head_in, &dg, 1, 2 * h, 2 * f);
                let d_in = matmul_a_bt(&dg, &p.w_read.data[rs], 1, 2 * h, 2 * f);
                for n in 0..h {
                    d_y1[t * pw + j * h + n] += d_in[n];
                    d_y1[t * pw + qh + j * h + n] += d_in[h + n];
                }
            }
        }

        let mut d_gate = vec![0.0; len * pw];
        let mut d_u2 = vec![0.0; len * pw];
        for t in 0..len {
            let r = fu.inv_rms[t];
            let row = t * pw..(t + 1) * pw;
            let (u2, gate, dy1) = (&fu.u2[row.clone()], &fu.gate[row.clone()], &d_y1[row.clone()]);
            let mut d_uhat = vec![0.0; pw];
            let mut dot = 0.0;
            for n in 0..pw {
                let uhat = u2[n] * r;
                let sg = silu(gate[n]);
                let scale = p.norm_scale.data[n];
                d_gate[t * pw + n] = dy1[n] * uhat * scale * silu_grad(gate[n]);
                g.params.norm_scale.data[n] += dy1[n] * uhat * sg;
                d_uhat[n] = dy1[n] * scale * sg;
                dot += d_uhat[n] * uhat;
            }
            dot /= pw as f64;
            for n in 0..pw {
                d_u2[t * pw + n] = r * (d_uhat[n] - u2[n] * r * dot);
            }
        }
        matmul_at_b_acc(&mut g.params.w_gate.data, x, &d_gate, len, d, pw);
        for (a, b) in dx.iter_mut().zip(matmul_a_bt(&d_gate, &p.w_gate.data, len, d, pw)) {
            *a += b;
        }

        // ---- Step 5: spectral readout ----------------------------------
        let mx = &tr.mixed;
        let sc = &tr.scan;
        let inv_sqrt_h = 1.0 / (h as f64).sqrt();
        let mut d_r_hat = vec![0.0; len * khm];
        let mut d_i_hat = vec![0.0; len * khm];
        let mut d_q_re = vec![0.0; len * qhm];
        let mut d_q_im = vec![0.0; len * qhm];
        for t in 0..len {
            for j in 0..nq {
                let mk = cfg.mem_head_for(j);
                for hd in 0..h {
                    let gre = d_u2[t * pw + j * h + hd] * inv_sqrt_h;
                    let gim = d_u2[t * pw + qh + j * h + hd] * inv_sqrt_h;
                    for mm in 0..m {
                        let qi = (j * h + hd) * m + mm;
                        let si = (mk * h + hd) * m + mm;
                        let (rh, ih) = (sc.r_hat[t * khm + si], sc.i_hat[t * khm + si]);
                        let (qr, qm) = (mx.q_re[t * qhm + qi], mx.q_im[t * qhm + qi]);
                        let w = self.grid.omega.data[qi];
                        g.grid.omega.data[qi] += gre * (rh * qr + ih * qm) + gim * (ih * qr - rh * qm);
                        d_r_hat[t * khm + si] += w * (gre * qr - gim * qm);
                        d_i_hat[t * khm + si] += w * (gre * qm + gim * qr);
                        d_q_re[t * qhm + qi] = w * (gre * rh + gim * ih);
                        d_q_im[t * qhm + qi] = w * (gre * ih - gim * rh);
                    }
                }
            }
        }

        // ---- Step 4: normalization and prefix sums ---------------------
        let hm = h * m;
        let mut d_big_r = vec![0.0; len * khm];
        let mut d_big_i = vec![0.0; len * khm];
        let mut d_z = vec![0.0; len * nk];
        for t in 0..len {
            for hk in 0..nk {
                let mass = sc.z[t * nk + hk];
                let mut acc = 0.0;
                for n in t * khm + hk * hm..t * khm + (hk + 1) * hm {
                    d_big_r[n] = d_r_hat[n] / mass;
                    d_big_i[n] = d_i_hat[n] / mass;
                    acc += d_r_hat[n] * sc.r_hat[n] + d_i_hat[n] * sc.i_hat[n];
                }
                d_z[t * nk + hk] = -acc / mass;
            }
        }
        // transpose of a prefix sum is a suffix sum
        for t in (0..len.saturating_sub(1)).rev() {
            for n in 0..khm {
                d_big_r[t * khm + n] += d_big_r[(t + 1) * khm + n];
                d_big_i[t * khm + n] += d_big_i[(t + 1) * khm + n];
            }
            for n in 0..nk {
                d_z[t * nk + n] += d_z[(t + 1) * nk + n];
            }
        }
        let (d_r, d_i) = (d_big_r, d_big_i);
        let mut d_alpha = d_z;

        // ---- Step 3: complex encoding ----------------------------------
        let mut d_k = vec![0.0; len * kh];
        for t in 0..len {
            for hk in 0..nk {
                let alpha = tr.alpha.alpha[t * nk + hk];
                let eta = p.eta.data[hk];
                for hd in 0..h {
                    let kv = mx.k[t * kh + hk * h + hd];
                    let ss = softsign(eta * kv);
                    let amp = alpha * kv;
                    let mut d_amp_total = 0.0;
                    let mut d_ss = 0.0;
                    for mm in 0..m {
                        let idx = (hk * h + hd) * m + mm;
                        let theta = self.grid.theta.data[idx];
                        let (sin, cos) = (ss * theta).sin_cos();
                        let (dr, di) = (d_r[t * khm + idx], d_i[t * khm + idx]);
                        d_amp_total += dr * cos + di * sin;
                        let d_phi = amp * (di * cos - dr * sin);
                        g.grid.theta.data[idx] += d_phi * ss;
                        d_ss += d_phi * theta;
                    }
                    d_alpha[t * nk + hk] += d_amp_total * kv;
                    let d_pre_phase = d_ss * softsign_grad(eta * kv);
                    g.params.eta.data[hk] += d_pre_phase * kv;
                    d_k[t * kh + hk * h + hd] += d_amp_total * alpha + d_pre_phase * eta;
                }
            }
        }

        // ---- Step 2: contribution weights ------------------------------
        let lambdas = p.lambdas();
        let mut d_s = vec![0.0; len * nk];
        for t in 0..len {
            let dist = (len - 1 - t) as f64;
            for hk in 0..nk {
                let da = d_alpha[t * nk + hk];
                let alpha = tr.alpha.alpha[t * nk + hk];
                let pre = tr.alpha.pre[t * nk + hk];
                let decay = (-lambdas[hk] * dist).exp() * alpha_scale;
                let d_pre = da * sigmoid(pre) * decay;
                let d_lambda = -da * alpha * dist;
                g.params.decay.data[hk] += d_lambda * sigmoid(p.decay.data[hk]);
                g.params.gamma.data[hk] += d_pre * mx.s[t * nk + hk];
                g.params.beta.data[hk] += d_pre;
                d_s[t * nk + hk] = d_pre * p.gamma.data[hk];
            }
        }

        // ---- Step 1: split, SiLU, convolution, projection --------------
        let mut d_v = vec![0.0; len * c];
        for t in 0..len {
            let row = &mut d_v[t * c..(t + 1) * c];
            row[..kh].copy_from_slice(&d_k[t * kh..(t + 1) * kh]);
            row[kh..kh + nk].copy_from_slice(&d_s[t * nk..(t + 1) * nk]);
            let q = &mut row[cfg.mem_width()..];
            for n in 0..qhm {
                q[2 * n] = d_q_re[t * qhm + n];
                q[2 * n + 1] = d_q_im[t * qhm + n];
            }
            for (dv, &v) in row.iter_mut().zip(&mx.v[t * c..(t + 1) * c]) {
                *dv *= silu_grad(v);
            }
        }
        let mut d_u = vec![0.0; len * c];
        for t in 0..len {
            for j in 0..taps {
                let Some(src) = (t + j).checked_sub(taps - 1) else { continue };
                for ch in 0..c {
                    let dv = d_v[t * c + ch];
                    g.params.conv.data[ch * taps + j] += dv * mx.u[src * c + ch];
                    d_u[src * c + ch] += dv * p.conv.data[ch * taps + j];
                }
            }
        }
        matmul_at_b_acc(&mut g.params.w_in.data, x, &d_u, len, d, c);
        for (a, b) in dx.iter_mut().zip(matmul_a_bt(&d_u, &p.w_in.data, len, d, c)) {
            *a += b;
        }

        let grads = ScaGrads { params: g, x: dx };
        grads.check_finite("sca.")?;
        Ok(grads)
    }
}
