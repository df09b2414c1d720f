//! The SeqCond attention layer.
//!
//! A prefix is summarized by sampling the derivative of its characteristic
//! function at `M` learned frequencies per head, accumulated as a complex
//! running sum normalized by its total contribution mass. A per-position
//! spectral query reads the summary out through a Hermitian inner product.
//!
//! Three accumulation routes compute the same function: a running prefix
//! sum ([`ScanBackend::Cumsum`]), a masked matmul for short sequences
//! ([`ScanBackend::MaskedMatmul`]) and the constant-cost recurrence in
//! [`ScaLayer::step_streaming`].

mod backward;
mod config;
mod ops;
mod params;
mod stream;

pub use backward::ScaGrads;
pub use config::{ScaConfig, MAX_MEM_HEADS, MAX_SPECTRAL_SAMPLES};
pub use ops::{
    contribution_weights, encode_complex, fuse_output, project_and_mix, scan_accumulate, spectral_readout, Alpha,
    ForwardOptions, Fused, Mixed, Scan, ScanBackend, ScaTrace, RMS_EPS, SHORT_SEQUENCE,
};
pub use params::{ScaLayer, ScaParams, SpectralGrid};
pub use stream::ScaState;

#[cfg(test)]
mod tests;
