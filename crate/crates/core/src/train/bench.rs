//! Wall-clock scaling of one SCA layer against one attention layer.

use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::attention::{attention_forward, AttentionConfig, AttentionParams};
use crate::sca::{ScaConfig, ScaLayer, ScaState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerUnderTest {
    Sca,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub model_dim: usize,
    pub lengths: Vec<usize>,
    /// Each measurement repeats the forward pass until at least this much
    /// time has elapsed.
    pub min_duration_ms: u64,
    /// Independent measurements per length; the fastest is kept.
    pub trials: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { model_dim: 64, lengths: vec![256, 512, 1024, 2048, 4096], min_duration_ms: 30, trials: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub layer: LayerUnderTest,
    pub len: usize,
    /// Mean seconds per forward pass over the fastest trial.
    pub seconds: f64,
    pub repetitions: u32,
    /// Decode-time memory: the SCA recurrent state, or the attention
    /// key/value cache at this length.
    pub state_bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Log-log slope of time against length over the largest measured
    /// decade, per layer.
    pub sca_slope: f64,
    pub attention_slope: f64,
    pub sca_state_constant: bool,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

/// Repeats `f` until `min` has elapsed, doubling the repetition count so a
/// coarse timer still resolves fast calls.
fn time_it(min: Duration, mut f: impl FnMut() -> Result<()>) -> Result<(f64, u32)> {
    let mut reps: u32 = 1;
    loop {
        let start = Instant::now();
        for _ in 0..reps {
            f()?;
        }
        let elapsed = start.elapsed();
        if elapsed >= min || reps >= 1 << 20 {
            return Ok((elapsed.as_secs_f64() / reps as f64, reps));
        }
        reps *= 2;
    }
}

fn bench_configs(d: usize, max_len: usize) -> (ScaConfig, AttentionConfig) {
    let mut sca = ScaConfig::desk(d);
    sca.seq_len_max = max_len;
    let heads = (d / 16).max(1);
    let attn = AttentionConfig { model_dim: d, heads, kv_heads: heads, head_dim: d / heads, max_len, rope_base: Some(10000.0) };
    (sca, attn)
}

/// Times a single layer's forward pass at each length.
pub fn scaling_bench(layer: LayerUnderTest, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.lengths.is_empty() {
        return Err(Error::Input("benchmark needs at least one length".into()));
    }
    if cfg.lengths.windows(2).any(|w| w[0] >= w[1]) || cfg.lengths[0] == 0 {
        return Err(Error::Input("benchmark lengths must be positive and strictly ascending".into()));
    }
    let max_len = *cfg.lengths.last().expect("non-empty");
    let (sca_cfg, attn_cfg) = bench_configs(cfg.model_dim, max_len);
    sca_cfg.validate()?;
    attn_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sca = ScaLayer::<f64>::init(&sca_cfg, &mut rng)?;
    let attn = AttentionParams::init(&attn_cfg, &mut rng);
    let x: Vec<f64> = (0..max_len * cfg.model_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let min = Duration::from_millis(cfg.min_duration_ms);

    let mut rows = Vec::new();
    for &len in &cfg.lengths {
        let input = &x[..len * cfg.model_dim];
        let mut best = (f64::INFINITY, 0);
        for _ in 0..cfg.trials.max(1) {
            let t = match layer {
                LayerUnderTest::Sca => time_it(min, || sca.forward_parallel(input, len).map(drop))?,
                LayerUnderTest::Attention => time_it(min, || attention_forward(&attn_cfg, &attn, input, len, 0).map(drop))?,
            };
            if t.0 < best.0 {
                best = t;
            }
        }
        let state_bytes = match layer {
            LayerUnderTest::Sca => {
                let mut state = ScaState::<f64>::new(&sca);
                for t in 0..len.min(64) {
                    sca.step_streaming(&input[t * cfg.model_dim..(t + 1) * cfg.model_dim], &mut state)?;
                }
                state.size_bytes()
            }
            LayerUnderTest::Attention => attn_cfg.kv_cache_bytes(len),
        };
        rows.push(BenchRow { layer, len, seconds: best.0, repetitions: best.1, state_bytes });
    }
    Ok(rows)
}

/// Slope over the points with `L ≥ L_max / 10`.
pub fn top_decade_slope(rows: &[BenchRow]) -> f64 {
    let max = rows.iter().map(|r| r.len).max().unwrap_or(0) as f64;
    let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.len as f64 >= max / 10.0).map(|r| (r.len as f64, r.seconds)).collect();
    if pts.len() < 2 {
        f64::NAN
    } else {
        loglog_slope(&pts)
    }
}

/// Runs both layers and summarizes their scaling.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    let sca = scaling_bench(LayerUnderTest::Sca, cfg)?;
    let attn = scaling_bench(LayerUnderTest::Attention, cfg)?;
    let sca_slope = top_decade_slope(&sca);
    let attention_slope = top_decade_slope(&attn);
    let sca_state_constant = sca.windows(2).all(|w| w[0].state_bytes == w[1].state_bytes);
    let mut rows = sca;
    rows.extend(attn);
    Ok(BenchReport { rows, sca_slope, attention_slope, sca_state_constant })
}
