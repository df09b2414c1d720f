//! Constant-cost decoding.
//!
//! The parallel pass anchors the decay at the right edge of the window,
//! `α_τ ∝ e^{−λ(L−1−τ)}`. Every term contributing to position `t` then
//! carries the common factor `e^{−λ(L−1−t)}`, which cancels in `R/Z`. The
//! recurrence below keeps the state relative to the current position
//! instead (`R ← e^{−λ}R + r_t`), which needs no knowledge of `L` and yields
//! the same normalized state.

use super::ops::{fuse_row, readout_row, split_row};
use super::ScaLayer;
use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::{matmul, silu, softplus, softsign};

/// Decode state owned by one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaState<T> {
    /// `[K, H, M]`
    pub r: Vec<T>,
    /// `[K, H, M]`
    pub i: Vec<T>,
    /// Accumulated contribution mass, `[K]`.
    pub z: Vec<T>,
    /// Positions consumed so far.
    pub t: usize,
    /// Last `c−1` projected inputs `W_in·x`, oldest first, `[c−1, C]`.
    pub conv_tail: Vec<T>,
}

impl<T: Real> ScaState<T> {
    pub fn new<U>(layer: &ScaLayer<U>) -> Self {
        let c = &layer.cfg;
        let khm = c.mem_heads * c.head_dim * c.spectral_samples;
        ScaState {
            r: vec![T::zero(); khm],
            i: vec![T::zero(); khm],
            z: vec![T::zero(); c.mem_heads],
            t: 0,
            conv_tail: vec![T::zero(); (c.conv_kernel - 1) * c.channels()],
        }
    }

    /// Bytes held by the state; independent of how many steps were taken.
    pub fn size_bytes(&self) -> usize {
        (self.r.len() + self.i.len() + self.z.len() + self.conv_tail.len()) * std::mem::size_of::<T>()
    }
}

impl<T: Real> ScaLayer<T> {
    /// Consumes `x_t [D]`, updates `state` in place and returns `y_t [D]`.
    pub fn step_streaming(&self, x_t: &[T], state: &mut ScaState<T>) -> Result<Vec<T>> {
        let cfg = &self.cfg;
        let d = cfg.model_dim;
        let c = cfg.channels();
        let taps = cfg.conv_kernel;
        let (nk, h, m) = (cfg.mem_heads, cfg.head_dim, cfg.spectral_samples);
        let khm = nk * h * m;
        if x_t.len() != d {
            return shape_err(format!("step input has {} values, expected {d}", x_t.len()));
        }
        if state.r.len() != khm || state.i.len() != khm || state.z.len() != nk || state.conv_tail.len() != (taps - 1) * c {
            return shape_err("decode state does not match the layer config");
        }

        let u = matmul(x_t, &self.params.w_in.data, 1, d, c);
        let mut z = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = self.params.conv.data[ch * taps + taps - 1] * u[ch];
            for j in 0..taps - 1 {
                acc += self.params.conv.data[ch * taps + j] * state.conv_tail[j * c + ch];
            }
            z[ch] = silu(acc);
        }
        let qhm = cfg.query_heads * h * m;
        let mut k = vec![T::zero(); nk * h];
        let mut s = vec![T::zero(); nk];
        let mut q_re = vec![T::zero(); qhm];
        let mut q_im = vec![T::zero(); qhm];
        split_row(cfg, &z, &mut k, &mut s, &mut q_re, &mut q_im);

        let lambdas = self.params.lambdas();
        for hk in 0..nk {
            let gate = softplus(self.params.gamma.data[hk] * s[hk] + self.params.beta.data[hk]);
            let keep = (-lambdas[hk]).exp();
            state.z[hk] = keep * state.z[hk] + gate;
            for hd in 0..h {
                let kv = k[hk * h + hd];
                let ss = softsign(self.params.eta.data[hk] * kv);
                let amp = gate * kv;
                for mm in 0..m {
                    let idx = (hk * h + hd) * m + mm;
                    let (sin, cos) = (ss * self.grid.theta.data[idx]).sin_cos();
                    state.r[idx] = keep * state.r[idx] + amp * cos;
                    state.i[idx] = keep * state.i[idx] + amp * sin;
                }
            }
        }

        let mut r_hat = state.r.clone();
        let mut i_hat = state.i.clone();
        for hk in 0..nk {
            let mass = state.z[hk];
            if !(mass > T::zero()) {
                return Err(Error::NumericalIntegrity(format!("decode mass Z[{hk}] = {mass} is not positive")));
            }
            for n in hk * h * m..(hk + 1) * h * m {
                r_hat[n] /= mass;
                i_hat[n] /= mass;
            }
        }
        let qh = cfg.query_heads * h;
        let mut o_re = vec![T::zero(); qh];
        let mut o_im = vec![T::zero(); qh];
        readout_row(cfg, &self.grid.omega.data, &r_hat, &i_hat, &q_re, &q_im, &mut o_re, &mut o_im);
        let y = fuse_row(cfg, &self.params, &o_re, &o_im, x_t).y;

        if taps > 1 {
            state.conv_tail.drain(..c);
            state.conv_tail.extend_from_slice(&u);
        }
        state.t += 1;
        Ok(y)
    }

    /// Runs [`Self::step_streaming`] over a whole sequence from an empty state.
    pub fn decode_sequence(&self, x: &[T], len: usize) -> Result<Vec<T>> {
        super::ops::check_input(&self.cfg, x, len)?;
        let d = self.cfg.model_dim;
        let mut state = ScaState::new(self);
        let mut y = Vec::with_capacity(len * d);
        for t in 0..len {
            y.extend(self.step_streaming(&x[t * d..(t + 1) * d], &mut state)?);
        }
        Ok(y)
    }
}
