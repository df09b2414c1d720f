use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ScaConfig;
use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::{softplus, softplus_inv, Tensor};

/// Learned spectral nodes `θ [K,H,M]` and quadrature weights `ω [K',H,M]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralGrid<T> {
    pub theta: Tensor<T>,
    pub omega: Tensor<T>,
}

/// Everything else an SCA layer learns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaParams<T> {
    /// `[D, channels]`
    pub w_in: Tensor<T>,
    /// Depthwise causal kernel `[channels, c]`; tap `c-1` sees the current
    /// position.
    pub conv: Tensor<T>,
    /// Score scale `γ [K]`.
    pub gamma: Tensor<T>,
    /// Score bias `β [K]`.
    pub beta: Tensor<T>,
    /// Pre-softplus decay slope; `λ = softplus(decay)`.
    pub decay: Tensor<T>,
    /// Phase scale `η [K]`.
    pub eta: Tensor<T>,
    /// `[D, 2K'H]`
    pub w_gate: Tensor<T>,
    /// RMS norm gain `[2K'H]`.
    pub norm_scale: Tensor<T>,
    /// Per-head SwiGLU input projection `[K', 2H, 2F]` (gate then up).
    pub w_read: Tensor<T>,
    /// Per-head SwiGLU down projection `[K', F, 2H]`.
    pub w_down: Tensor<T>,
    /// `[2K'H, D]`
    pub w_out: Tensor<T>,
}

/// One SCA layer: its config and all learned tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaLayer<T> {
    pub cfg: ScaConfig,
    pub params: ScaParams<T>,
    pub grid: SpectralGrid<T>,
}

fn normal_tensor<R: Rng, T: Real>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(dist.sample(rng))).collect())
}

impl<T: Real> SpectralGrid<T> {
    /// `θ` magnitudes log-spaced over `[0.1, π]` with alternating signs
    /// inside each head; `ω = 1/M`.
    pub fn init(cfg: &ScaConfig) -> Self {
        let (k, h, m) = (cfg.mem_heads, cfg.head_dim, cfg.spectral_samples);
        let n = h * m;
        let (lo, hi) = (0.1f64, std::f64::consts::PI);
        let per_head: Vec<f64> = (0..n)
            .map(|i| {
                let frac = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                let mag = lo * (hi / lo).powf(frac);
                if i % 2 == 0 {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let theta = (0..k).flat_map(|_| per_head.iter().map(|&v| T::lit(v))).collect();
        SpectralGrid {
            theta: Tensor::from_vec(&[k, h, m], theta),
            omega: Tensor::filled(&[cfg.query_heads, h, m], T::lit(1.0 / m as f64)),
        }
    }

    pub fn cast<U: Real>(&self) -> SpectralGrid<U> {
        SpectralGrid { theta: self.theta.cast(), omega: self.omega.cast() }
    }
}

impl<T: Real> ScaParams<T> {
    /// Near-neutral initialization: identity conv tap, slow decay
    /// (`e^{-λ} ≈ 0.99`), unit score/phase scales, fan-in scaled projections.
    pub fn init<R: Rng>(cfg: &ScaConfig, rng: &mut R) -> Self {
        let (d, k, kq, h) = (cfg.model_dim, cfg.mem_heads, cfg.query_heads, cfg.head_dim);
        let c = cfg.channels();
        let p = cfg.readout_width();
        let f = cfg.swiglu_hidden();
        let mut conv = Tensor::zeros(&[c, cfg.conv_kernel]);
        for ch in 0..c {
            conv.data[ch * cfg.conv_kernel + cfg.conv_kernel - 1] = T::one();
        }
        let lambda0 = -(0.99f64).ln();
        ScaParams {
            w_in: normal_tensor(rng, &[d, c], 1.0 / (d as f64).sqrt()),
            conv,
            gamma: Tensor::filled(&[k], T::one()),
            beta: Tensor::zeros(&[k]),
            decay: Tensor::filled(&[k], T::lit(softplus_inv(lambda0))),
            eta: Tensor::filled(&[k], T::one()),
            w_gate: normal_tensor(rng, &[d, p], 1.0 / (d as f64).sqrt()),
            norm_scale: Tensor::filled(&[p], T::one()),
            w_read: normal_tensor(rng, &[kq, 2 * h, 2 * f], 1.0 / ((2 * h) as f64).sqrt()),
            w_down: normal_tensor(rng, &[kq, f, 2 * h], 1.0 / (f as f64).sqrt()),
            w_out: normal_tensor(rng, &[p, d], 1.0 / (p as f64).sqrt()),
        }
    }

    pub fn cast<U: Real>(&self) -> ScaParams<U> {
        ScaParams {
            w_in: self.w_in.cast(),
            conv: self.conv.cast(),
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            decay: self.decay.cast(),
            eta: self.eta.cast(),
            w_gate: self.w_gate.cast(),
            norm_scale: self.norm_scale.cast(),
            w_read: self.w_read.cast(),
            w_down: self.w_down.cast(),
            w_out: self.w_out.cast(),
        }
    }

    /// Decay slopes `λ = softplus(decay) > 0`.
    pub fn lambdas(&self) -> Vec<T> {
        self.decay.data.iter().map(|&v| softplus(v)).collect()
    }
}

impl<T: Real> ScaLayer<T> {
    pub fn init<R: Rng>(cfg: &ScaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(ScaLayer { cfg: cfg.clone(), params: ScaParams::init(cfg, rng), grid: SpectralGrid::init(cfg) })
    }

    pub fn cast<U: Real>(&self) -> ScaLayer<U> {
        ScaLayer { cfg: self.cfg.clone(), params: self.params.cast(), grid: self.grid.cast() }
    }

    /// Named tensors in a fixed order (grid first).
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let p = &self.params;
        vec![
            ("theta", &self.grid.theta),
            ("omega", &self.grid.omega),
            ("w_in", &p.w_in),
            ("conv", &p.conv),
            ("gamma", &p.gamma),
            ("beta", &p.beta),
            ("decay", &p.decay),
            ("eta", &p.eta),
            ("w_gate", &p.w_gate),
            ("norm_scale", &p.norm_scale),
            ("w_read", &p.w_read),
            ("w_down", &p.w_down),
            ("w_out", &p.w_out),
        ]
    }

    /// Same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let p = &mut self.params;
        vec![
            &mut self.grid.theta,
            &mut self.grid.omega,
            &mut p.w_in,
            &mut p.conv,
            &mut p.gamma,
            &mut p.beta,
            &mut p.decay,
            &mut p.eta,
            &mut p.w_gate,
            &mut p.norm_scale,
            &mut p.w_read,
            &mut p.w_down,
            &mut p.w_out,
        ]
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
        out
    }

    /// Checks every tensor shape against the config.
    pub fn check_shapes(&self) -> Result<()> {
        let c = &self.cfg;
        let (d, k, kq, h, m) = (c.model_dim, c.mem_heads, c.query_heads, c.head_dim, c.spectral_samples);
        let ch = c.channels();
        let p = c.readout_width();
        let f = c.swiglu_hidden();
        let expect: Vec<Vec<usize>> = vec![
            vec![k, h, m],
            vec![kq, h, m],
            vec![d, ch],
            vec![ch, c.conv_kernel],
            vec![k],
            vec![k],
            vec![k],
            vec![k],
            vec![d, p],
            vec![p],
            vec![kq, 2 * h, 2 * f],
            vec![kq, f, 2 * h],
            vec![p, d],
        ];
        for ((name, t), shape) in self.tensors().into_iter().zip(expect) {
            if t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return shape_err(format!("sca.{name}: expected {shape:?}, found {:?}", t.shape));
            }
        }
        Ok(())
    }
}

impl ScaLayer<f64> {
    /// A layer with every scalar parameter moved off its neutral init, for
    /// verification suites: random `γ, β, η`, decay slopes with
    /// `λ ∈ [0.01, max_lambda]`, jittered grid and conv taps.
    pub fn randomized<R: Rng>(cfg: &ScaConfig, rng: &mut R, max_lambda: f64) -> Result<Self> {
        let mut layer = ScaLayer::<f64>::init(cfg, rng)?;
        let p = &mut layer.params;
        for v in p.gamma.data.iter_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        for v in p.beta.data.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        for v in p.eta.data.iter_mut() {
            *v = rng.random_range(0.5..2.0);
        }
        for v in p.decay.data.iter_mut() {
            let hi = max_lambda.max(0.011);
            *v = softplus_inv(rng.random_range(0.01..hi));
        }
        for v in p.conv.data.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        for v in p.norm_scale.data.iter_mut() {
            *v = rng.random_range(0.7..1.3);
        }
        for v in layer.grid.theta.data.iter_mut() {
            *v *= rng.random_range(0.8..1.2);
        }
        for v in layer.grid.omega.data.iter_mut() {
            *v = rng.random_range(0.2..1.0);
        }
        Ok(layer)
    }
}
