//! Row-wise building blocks shared by the transformer layer and the stack.

use crate::tensor::{matmul, matmul_a_bt, matmul_at_b_acc, silu, silu_grad};

pub const NORM_EPS: f64 = 1e-6;

/// `x [L, D] -> (x·inv_rms·scale, inv_rms [L])`.
pub fn rms_norm(x: &[f64], scale: &[f64], len: usize) -> (Vec<f64>, Vec<f64>) {
    let d = scale.len();
    let mut out = vec![0.0; len * d];
    let mut inv = vec![0.0; len];
    for t in 0..len {
        let row = &x[t * d..(t + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + NORM_EPS).sqrt();
        inv[t] = r;
        for n in 0..d {
            out[t * d + n] = row[n] * r * scale[n];
        }
    }
    (out, inv)
}

/// Returns `dx` and accumulates into `dscale`.
pub fn rms_norm_backward(x: &[f64], scale: &[f64], inv: &[f64], dy: &[f64], dscale: &mut [f64]) -> Vec<f64> {
    let d = scale.len();
    let len = inv.len();
    let mut dx = vec![0.0; len * d];
    for t in 0..len {
        let row = &x[t * d..(t + 1) * d];
        let drow = &dy[t * d..(t + 1) * d];
        let r = inv[t];
        let mut dot = 0.0;
        for n in 0..d {
            dscale[n] += drow[n] * row[n] * r;
            dot += drow[n] * scale[n] * row[n];
        }
        let coef = r * r * r * dot / d as f64;
        for n in 0..d {
            dx[t * d + n] = r * drow[n] * scale[n] - coef * row[n];
        }
    }
    dx
}

/// Cached pre-activations of a SwiGLU feed-forward pass.
#[derive(Debug, Clone)]
pub struct FfnTrace {
    pub gate: Vec<f64>,
    pub up: Vec<f64>,
    pub hidden: Vec<f64>,
}

/// `silu(x·W_gate) ⊙ (x·W_up) · W_down` with `W_gate, W_up [D, F]`,
/// `W_down [F, D]`.
pub fn swiglu(x: &[f64], w_gate: &[f64], w_up: &[f64], w_down: &[f64], len: usize, d: usize, f: usize) -> (Vec<f64>, FfnTrace) {
    let gate = matmul(x, w_gate, len, d, f);
    let up = matmul(x, w_up, len, d, f);
    let hidden: Vec<f64> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
    let y = matmul(&hidden, w_down, len, f, d);
    (y, FfnTrace { gate, up, hidden })
}

/// Weight gradients for one SwiGLU block, in `(gate, up, down)` order.
pub struct FfnGrads<'a> {
    pub w_gate: &'a mut [f64],
    pub w_up: &'a mut [f64],
    pub w_down: &'a mut [f64],
}

#[allow(clippy::too_many_arguments)]
pub fn swiglu_backward(
    x: &[f64],
    w_gate: &[f64],
    w_up: &[f64],
    w_down: &[f64],
    tr: &FfnTrace,
    dy: &[f64],
    grads: FfnGrads<'_>,
    len: usize,
    d: usize,
    f: usize,
) -> Vec<f64> {
    matmul_at_b_acc(grads.w_down, &tr.hidden, dy, len, f, d);
    let dh = matmul_a_bt(dy, w_down, len, f, d);
    let mut dg = vec![0.0; len * f];
    let mut du = vec![0.0; len * f];
    for n in 0..len * f {
        dg[n] = dh[n] * tr.up[n] * silu_grad(tr.gate[n]);
        du[n] = dh[n] * silu(tr.gate[n]);
    }
    matmul_at_b_acc(grads.w_gate, x, &dg, len, d, f);
    matmul_at_b_acc(grads.w_up, x, &du, len, d, f);
    let mut dx = matmul_a_bt(&dg, w_gate, len, d, f);
    let dx_up = matmul_a_bt(&du, w_up, len, d, f);
    for (a, b) in dx.iter_mut().zip(dx_up) {
        *a += b;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::{central_differences, relative_error};

    fn vals(n: usize, a: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * a).sin()).collect()
    }

    #[test]
    fn rms_norm_of_constant_row_is_scale() {
        let (y, inv) = rms_norm(&[2.0; 4], &[1.0, 2.0, 3.0, 4.0], 1);
        assert!((inv[0] - 1.0 / (4.0 + NORM_EPS).sqrt()).abs() < 1e-15);
        for (n, v) in y.iter().enumerate() {
            assert!((v - (n + 1) as f64 * 2.0 * inv[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn rms_norm_gradient() {
        let (len, d) = (3, 5);
        let x = vals(len * d, 0.7);
        let scale = vals(d, 1.3);
        let w = vals(len * d, 0.31);
        let (_, inv) = rms_norm(&x, &scale, len);
        let mut ds = vec![0.0; d];
        let dx = rms_norm_backward(&x, &scale, &inv, &w, &mut ds);
        let loss = |x: &[f64], s: &[f64]| rms_norm(x, s, len).0.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let fd_x = central_differences(&mut x.clone(), 1e-6, |v| loss(v, &scale));
        let fd_s = central_differences(&mut scale.clone(), 1e-6, |v| loss(&x, v));
        assert!(relative_error(&fd_x, &dx) < 1e-8);
        assert!(relative_error(&fd_s, &ds) < 1e-8);
    }

    #[test]
    fn swiglu_gradient() {
        let (len, d, f) = (2, 3, 4);
        let x = vals(len * d, 0.9);
        let wg = vals(d * f, 0.4);
        let wu = vals(d * f, 0.55);
        let wd = vals(f * d, 0.21);
        let w = vals(len * d, 1.7);
        let loss = |x: &[f64], wg: &[f64], wu: &[f64], wd: &[f64]| {
            swiglu(x, wg, wu, wd, len, d, f).0.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, tr) = swiglu(&x, &wg, &wu, &wd, len, d, f);
        let (mut gg, mut gu, mut gd) = (vec![0.0; d * f], vec![0.0; d * f], vec![0.0; f * d]);
        let dx = swiglu_backward(&x, &wg, &wu, &wd, &tr, &w, FfnGrads { w_gate: &mut gg, w_up: &mut gu, w_down: &mut gd }, len, d, f);
        assert!(relative_error(&central_differences(&mut x.clone(), 1e-6, |v| loss(v, &wg, &wu, &wd)), &dx) < 1e-8);
        assert!(relative_error(&central_differences(&mut wg.clone(), 1e-6, |v| loss(&x, v, &wu, &wd)), &gg) < 1e-8);
        assert!(relative_error(&central_differences(&mut wu.clone(), 1e-6, |v| loss(&x, &wg, v, &wd)), &gu) < 1e-8);
        assert!(relative_error(&central_differences(&mut wd.clone(), 1e-6, |v| loss(&x, &wg, &wu, v)), &gd) < 1e-8);
    }
}
