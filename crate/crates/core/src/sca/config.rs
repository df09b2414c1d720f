use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Precision;

/// Hyperparameters of one SCA layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaConfig {
    /// Model width `D`.
    pub model_dim: usize,
    /// Memory heads `K`.
    pub mem_heads: usize,
    /// Query heads `K'`.
    pub query_heads: usize,
    /// Head dimension `H`.
    pub head_dim: usize,
    /// Spectral samples per head `M`.
    pub spectral_samples: usize,
    /// Depthwise causal convolution width.
    pub conv_kernel: usize,
    /// Nominal inner expansion relative to `D`; informational, the readout
    /// width is always `2·K'·H`.
    pub expand_factor: usize,
    /// Per-head SwiGLU hidden width as a multiple of `2H`.
    pub swiglu_expansion: usize,
    pub seq_len_max: usize,
    #[serde(default)]
    pub precision: Precision,
}

pub const MAX_SPECTRAL_SAMPLES: usize = 8;
pub const MAX_MEM_HEADS: usize = 32;

impl ScaConfig {
    /// Scaled-down layer used by the toy model.
    pub fn desk(model_dim: usize) -> Self {
        ScaConfig {
            model_dim,
            mem_heads: 4,
            query_heads: 4,
            head_dim: (model_dim / 8).max(2),
            spectral_samples: 2,
            conv_kernel: 4,
            expand_factor: 2,
            swiglu_expansion: 3,
            seq_len_max: 256,
            precision: Precision::F64,
        }
    }

    /// Layer settings of the 371M-parameter reference model.
    pub fn full_scale() -> Self {
        ScaConfig {
            model_dim: 1024,
            mem_heads: 16,
            query_heads: 16,
            head_dim: 64,
            spectral_samples: 2,
            conv_kernel: 4,
            expand_factor: 2,
            swiglu_expansion: 3,
            seq_len_max: 1024,
            precision: Precision::F64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("model_dim", self.model_dim),
            ("mem_heads", self.mem_heads),
            ("query_heads", self.query_heads),
            ("head_dim", self.head_dim),
            ("spectral_samples", self.spectral_samples),
            ("conv_kernel", self.conv_kernel),
            ("expand_factor", self.expand_factor),
            ("swiglu_expansion", self.swiglu_expansion),
            ("seq_len_max", self.seq_len_max),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("sca.{name} must be positive")));
            }
        }
        let (k, kq) = (self.mem_heads, self.query_heads);
        if k % kq != 0 && kq % k != 0 {
            return Err(Error::Config(format!("mem_heads {k} and query_heads {kq} do not group")));
        }
        if self.spectral_samples > MAX_SPECTRAL_SAMPLES {
            return Err(Error::Config(format!("spectral_samples must be ≤ {MAX_SPECTRAL_SAMPLES}")));
        }
        if self.mem_heads > MAX_MEM_HEADS {
            return Err(Error::Config(format!("mem_heads must be ≤ {MAX_MEM_HEADS}")));
        }
        Ok(())
    }

    /// Keys then scores.
    pub fn mem_width(&self) -> usize {
        self.mem_heads * self.head_dim + self.mem_heads
    }

    /// `[K', H, M, 2]` with the re/im split innermost.
    pub fn query_width(&self) -> usize {
        self.query_heads * self.head_dim * self.spectral_samples * 2
    }

    /// Output width of `W_in` and channel count of the convolution.
    pub fn channels(&self) -> usize {
        self.mem_width() + self.query_width()
    }

    /// Width of the concatenated `[o_re ; o_im]` readout.
    pub fn readout_width(&self) -> usize {
        2 * self.query_heads * self.head_dim
    }

    /// Hidden width of each per-head SwiGLU.
    pub fn swiglu_hidden(&self) -> usize {
        self.swiglu_expansion * 2 * self.head_dim
    }

    /// Memory head read by query head `j`.
    pub fn mem_head_for(&self, j: usize) -> usize {
        j * self.mem_heads / self.query_heads
    }

    /// Parameter count, matching the tensors in [`super::ScaParams`] and
    /// [`super::SpectralGrid`].
    pub fn param_count(&self) -> usize {
        let (d, k, kq, h, m) = (self.model_dim, self.mem_heads, self.query_heads, self.head_dim, self.spectral_samples);
        let c = self.channels();
        let p = self.readout_width();
        let f = self.swiglu_hidden();
        d * c                    // w_in
            + c * self.conv_kernel
            + 4 * k              // gamma, beta, decay, eta
            + k * h * m          // theta
            + kq * h * m         // omega
            + d * p              // w_gate
            + p                  // norm scale
            + kq * (2 * h) * (2 * f) // w_read
            + kq * f * (2 * h)   // w_down
            + p * d // w_out
    }

    /// Decode-state footprint in scalars: `R`, `I`, `Z` and the conv tail.
    pub fn state_scalars(&self) -> usize {
        2 * self.mem_heads * self.head_dim * self.spectral_samples
            + self.mem_heads
            + (self.conv_kernel - 1) * self.channels()
    }
}
