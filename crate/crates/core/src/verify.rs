//! Numerical checks of the SCA layer: parallel/streaming equivalence,
//! finite-difference gradients and invariance to a global rescaling of the
//! contribution weights.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::real::{Precision, Real};
use crate::rng;
use crate::sca::{ForwardOptions, ScaConfig, ScaLayer, ScanBackend};

/// Draws a small random layer config. Dimensions stay small so a whole
/// suite runs in seconds.
pub fn random_config<R: Rng>(rng: &mut R, max_dim: usize, seq_len_max: usize) -> ScaConfig {
    let heads = [1usize, 2, 4];
    let mem_heads = heads[rng.random_range(0..heads.len())];
    let query_heads = heads[rng.random_range(0..heads.len())];
    ScaConfig {
        model_dim: rng.random_range(4..=max_dim.max(4)),
        mem_heads,
        query_heads,
        head_dim: rng.random_range(1..=4),
        spectral_samples: rng.random_range(1..=3),
        conv_kernel: rng.random_range(1..=4),
        expand_factor: 2,
        swiglu_expansion: rng.random_range(1..=3),
        seq_len_max,
        precision: Precision::F64,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceCase {
    pub config: ScaConfig,
    pub len: usize,
    pub max_lambda: f64,
    pub backend: String,
    pub max_abs_dev: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub precision: Precision,
    pub tolerance: f64,
    pub cases: Vec<EquivalenceCase>,
    pub max_abs_dev: f64,
    pub pass: bool,
}

fn max_abs_dev<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max)
}

fn equivalence_case<T: Real>(layer: &ScaLayer<f64>, x: &[f64], len: usize, backend: ScanBackend) -> Result<f64> {
    let layer_t: ScaLayer<T> = layer.cast();
    let x_t: Vec<T> = x.iter().map(|&v| T::lit(v)).collect();
    let par = layer_t.forward_with(&x_t, len, ForwardOptions { backend, ..Default::default() })?;
    let seq = layer_t.decode_sequence(&x_t, len)?;
    Ok(max_abs_dev(&par, &seq))
}

/// Compares every parallel scan backend against step-by-step decoding on
/// `configs` random layers with random lengths up to `max_len`.
///
/// In single precision the decay is capped so that `λ(L−1) ≤ 60`: the
/// parallel pass weights the first position by `e^{−λ(L−1)}`, which must
/// stay representable.
pub fn layer_equivalence(seed: u64, configs: usize, max_len: usize, precision: Precision) -> Result<EquivalenceReport> {
    let tolerance = match precision {
        Precision::F64 => 1e-11,
        Precision::F32 => 1e-5,
    };
    let cases: Vec<Vec<EquivalenceCase>> = (0..configs)
        .into_par_iter()
        .map(|idx| -> Result<Vec<EquivalenceCase>> {
            let mut r = rng::stream(seed, rng::VERIFY, idx as u64);
            let len = if idx == 0 { max_len } else { r.random_range(1..=max_len) };
            let cfg = random_config(&mut r, 32, max_len);
            let max_lambda = match precision {
                Precision::F64 => 0.5,
                Precision::F32 => (60.0 / len.saturating_sub(1).max(1) as f64).min(0.5),
            };
            let layer = ScaLayer::<f64>::randomized(&cfg, &mut r, max_lambda)?;
            let x: Vec<f64> = (0..len * cfg.model_dim).map(|_| r.random_range(-1.0..1.0)).collect();
            let mut out = Vec::new();
            for backend in [ScanBackend::Cumsum, ScanBackend::MaskedMatmul, ScanBackend::Auto] {
                let dev = match precision {
                    Precision::F64 => equivalence_case::<f64>(&layer, &x, len, backend)?,
                    Precision::F32 => equivalence_case::<f32>(&layer, &x, len, backend)?,
                };
                out.push(EquivalenceCase { config: cfg.clone(), len, max_lambda, backend: format!("{backend:?}"), max_abs_dev: dev });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let cases: Vec<EquivalenceCase> = cases.into_iter().flatten().collect();
    let max = cases.iter().map(|c| c.max_abs_dev).fold(0.0, f64::max);
    Ok(EquivalenceReport { precision, tolerance, cases, max_abs_dev: max, pass: max <= tolerance })
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorGradCheck {
    pub name: String,
    pub entries: usize,
    /// `‖g_fd − g‖ / max(‖g_fd‖, ‖g‖)`.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorGradCheck>,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Norm-relative error between two gradient vectors; zero when both vanish.
pub fn relative_error(fd: &[f64], analytic: &[f64]) -> f64 {
    let diff: f64 = fd.iter().zip(analytic).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale = crate::tensor::l2_norm(fd).max(crate::tensor::l2_norm(analytic));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every entry of `v`.
pub fn central_differences(v: &mut [f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..v.len())
        .map(|n| {
            let orig = v[n];
            v[n] = orig + step;
            let up = f(v);
            v[n] = orig - step;
            let down = f(v);
            v[n] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks the hand-written backward pass of `layer` on input `x` against
/// central differences for every parameter tensor and the input, using the
/// scalar loss `⟨y, w⟩` for a fixed random `w`.
pub fn layer_gradcheck(layer: &ScaLayer<f64>, x: &[f64], len: usize, seed: u64, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let mut r = rng::stream(seed, rng::VERIFY, u64::MAX);
    let w: Vec<f64> = (0..len * layer.cfg.model_dim).map(|_| r.random_range(-1.0..1.0)).collect();
    let grads = layer.backward(x, len, &w)?;
    grads.check_finite("sca.")?;

    let names: Vec<&'static str> = layer.tensors().iter().map(|(n, _)| *n).collect();
    let analytic: Vec<Vec<f64>> = grads.params.tensors().iter().map(|(_, t)| t.data.clone()).collect();
    let mut tensors: Vec<TensorGradCheck> = (0..names.len())
        .into_par_iter()
        .map(|ti| {
            let mut probe = layer.clone();
            let mut values = probe.tensors_mut()[ti].data.clone();
            let fd = central_differences(&mut values, step, |v| {
                probe.tensors_mut()[ti].data.copy_from_slice(v);
                probe.forward_parallel(x, len).map(|y| dot(&y, &w)).unwrap_or(f64::NAN)
            });
            let max_abs = fd.iter().zip(&analytic[ti]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            TensorGradCheck { name: names[ti].into(), entries: fd.len(), rel_error: relative_error(&fd, &analytic[ti]), max_abs_error: max_abs }
        })
        .collect();

    let mut xv = x.to_vec();
    let fd = central_differences(&mut xv, step, |v| layer.forward_parallel(v, len).map(|y| dot(&y, &w)).unwrap_or(f64::NAN));
    let max_abs = fd.iter().zip(&grads.x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    tensors.push(TensorGradCheck { name: "input".into(), entries: fd.len(), rel_error: relative_error(&fd, &grads.x), max_abs_error: max_abs });

    let max_rel = if tensors.iter().any(|t| t.rel_error.is_nan()) {
        f64::NAN
    } else {
        tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    };
    Ok(GradCheckReport { step, tolerance, tensors, max_rel_error: max_rel, pass: max_rel <= tolerance })
}

/// Largest parallel-vs-streaming deviation over the SCA layers of a
/// trained model, on one random input of length `len`. Returns the number
/// of layers checked and the deviation.
pub fn model_sca_equivalence(model: &crate::model::HybridModel, seed: u64, len: usize) -> Result<(usize, f64)> {
    let mut count = 0;
    let mut max = 0.0f64;
    for (n, layer) in model.layers.iter().enumerate() {
        if let crate::model::Layer::Sca(block) = layer {
            let mut r = rng::stream(seed, rng::VERIFY, (3 << 20) + n as u64);
            let len = len.min(block.sca.cfg.seq_len_max);
            let x: Vec<f64> = (0..len * block.sca.cfg.model_dim).map(|_| r.random_range(-1.0..1.0)).collect();
            for backend in [ScanBackend::Cumsum, ScanBackend::MaskedMatmul, ScanBackend::Auto] {
                max = max.max(equivalence_case::<f64>(&block.sca, &x, len, backend)?);
            }
            count += 1;
        }
    }
    Ok((count, max))
}

/// [`layer_gradcheck`] over `configs` random small layers.
pub fn gradcheck_suite(seed: u64, configs: usize, step: f64, tolerance: f64) -> Result<Vec<GradCheckReport>> {
    (0..configs)
        .map(|idx| {
            let mut r = rng::stream(seed, rng::VERIFY, (2 << 20) + idx as u64);
            let cfg = random_config(&mut r, 16, 16);
            let len = r.random_range(2..=16);
            let layer = ScaLayer::<f64>::randomized(&cfg, &mut r, 0.4)?;
            let x: Vec<f64> = (0..len * cfg.model_dim).map(|_| r.random_range(-1.0..1.0)).collect();
            layer_gradcheck(&layer, &x, len, seed.wrapping_add(idx as u64), step, tolerance)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CancellationReport {
    pub scales: Vec<f64>,
    pub max_abs_dev: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Multiplies every contribution weight by a common factor and measures the
/// change in layer output.
pub fn normalization_cancellation(seed: u64, configs: usize) -> Result<CancellationReport> {
    let scales = vec![1e-6, 1e-3, 0.37, 2.0, 1e3, 1e6];
    let mut max = 0.0f64;
    for idx in 0..configs {
        let mut r = rng::stream(seed, rng::VERIFY, (1 << 20) + idx as u64);
        let cfg = random_config(&mut r, 24, 64);
        let len = r.random_range(1..=64);
        let layer = ScaLayer::<f64>::randomized(&cfg, &mut r, 0.3)?;
        let x: Vec<f64> = (0..len * cfg.model_dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let base = layer.forward_parallel(&x, len)?;
        for &alpha_scale in &scales {
            let scaled = layer.forward_with(&x, len, ForwardOptions { alpha_scale, ..Default::default() })?;
            max = max.max(max_abs_dev(&base, &scaled));
        }
    }
    let tolerance = 1e-12;
    Ok(CancellationReport { scales, max_abs_dev: max, tolerance, pass: max <= tolerance })
}
