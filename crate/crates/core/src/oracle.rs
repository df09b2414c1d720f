//! Exact characteristic-function retrieval on a discrete torus.
//!
//! Tokens live on the integer lattice `{0..N-1}^d`. Evaluating the summaries
//! on the full DFT frequency lattice `θ = 2π·m/N` turns the Fourier-inversion
//! identities behind spectral retrieval into finite sums:
//!
//! ```text
//! Σ_θ e^{i⟨θ, h_k − h_j⟩} = N^d · [h_k = h_j]
//! ```
//!
//! so a readout `(1/N^d) Σ_θ S(θ)·conj(w(θ))` recovers token values exactly,
//! up to floating-point rounding.
//!
//! Token indices in this API are zero-based.

use num_complex::Complex64;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Readouts whose imaginary part exceeds this are rejected.
pub const IMAG_RESIDUAL_LIMIT: f64 = 1e-6;

/// A weighted set of distinct lattice tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticePrefix {
    dim: usize,
    modulus: usize,
    tokens: Vec<Vec<usize>>,
    weights: Vec<f64>,
}

impl LatticePrefix {
    pub fn new(dim: usize, modulus: usize, tokens: Vec<Vec<usize>>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || modulus == 0 {
            return Err(Error::Input("dimension and modulus must be positive".into()));
        }
        if tokens.is_empty() {
            return Err(Error::Input("prefix must contain at least one token".into()));
        }
        if tokens.len() != weights.len() {
            return Err(Error::Input(format!(
                "{} tokens but {} weights",
                tokens.len(),
                weights.len()
            )));
        }
        let capacity = modulus.checked_pow(dim as u32).unwrap_or(usize::MAX);
        if tokens.len() > capacity {
            return Err(Error::Input(format!("{} tokens exceed lattice size {capacity}", tokens.len())));
        }
        for (k, h) in tokens.iter().enumerate() {
            if h.len() != dim {
                return Err(Error::Input(format!("token {k} has dimension {} != {dim}", h.len())));
            }
            if h.iter().any(|&c| c >= modulus) {
                return Err(Error::Input(format!("token {k} leaves the torus {{0..{}}}", modulus - 1)));
            }
        }
        for a in 0..tokens.len() {
            for b in a + 1..tokens.len() {
                if tokens[a] == tokens[b] {
                    return Err(Error::Input(format!("tokens {a} and {b} coincide; retrieval needs distinct tokens")));
                }
            }
        }
        if weights.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::Input("weights must be finite and strictly positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Input(format!("weights sum to {total}, expected 1")));
        }
        Ok(LatticePrefix { dim, modulus, tokens, weights })
    }

    pub fn uniform(dim: usize, modulus: usize, tokens: Vec<Vec<usize>>) -> Result<Self> {
        let t = tokens.len().max(1);
        let weights = vec![1.0 / t as f64; tokens.len()];
        Self::new(dim, modulus, tokens, weights)
    }

    /// Random prefix with `t` distinct tokens; weights uniform or drawn from
    /// a normalized uniform(0.05, 1) profile.
    pub fn random<R: Rng>(rng: &mut R, dim: usize, modulus: usize, t: usize, weighted: bool) -> Result<Self> {
        let capacity = modulus.pow(dim as u32);
        if t == 0 || t > capacity {
            return Err(Error::Input(format!("cannot place {t} distinct tokens on {capacity} sites")));
        }
        let tokens = sample(rng, capacity, t)
            .into_iter()
            .map(|mut flat| {
                let mut h = vec![0; dim];
                for c in h.iter_mut() {
                    *c = flat % modulus;
                    flat /= modulus;
                }
                h
            })
            .collect();
        let weights = if weighted {
            let raw: Vec<f64> = (0..t).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|w| w / total).collect()
        } else {
            vec![1.0 / t as f64; t]
        };
        Self::new(dim, modulus, tokens, weights)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modulus(&self) -> usize {
        self.modulus
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Token `j` as a real vector (its value and its phase coordinates).
    pub fn token(&self, j: usize) -> Vec<f64> {
        self.tokens[j].iter().map(|&c| c as f64).collect()
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim {
            return Err(Error::Input(format!(
                "frequency has dimension {} but prefix has dimension {}",
                theta.len(),
                self.dim
            )));
        }
        Ok(())
    }

    fn check_index(&self, j: usize) -> Result<()> {
        if j >= self.len() {
            return Err(Error::Input(format!("token index {j} out of range for prefix of length {}", self.len())));
        }
        Ok(())
    }

    fn phase(&self, k: usize, theta: &[f64]) -> Complex64 {
        let arg: f64 = self.tokens[k].iter().zip(theta).map(|(&h, &th)| h as f64 * th).sum();
        Complex64::from_polar(1.0, arg)
    }
}

/// All `N^d` DFT frequencies `2π·m/N`, each carrying weight `1/N^d`.
#[derive(Debug, Clone)]
pub struct FrequencyLattice {
    dim: usize,
    points: Vec<Vec<f64>>,
}

impl FrequencyLattice {
    pub fn new(dim: usize, modulus: usize) -> Self {
        let count = modulus.pow(dim as u32);
        let step = 2.0 * std::f64::consts::PI / modulus as f64;
        let points = (0..count)
            .map(|mut flat| {
                let mut theta = vec![0.0; dim];
                for c in theta.iter_mut() {
                    *c = (flat % modulus) as f64 * step;
                    flat /= modulus;
                }
                theta
            })
            .collect();
        FrequencyLattice { dim, points }
    }

    pub fn for_prefix(prefix: &LatticePrefix) -> Self {
        Self::new(prefix.dim, prefix.modulus)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.points.len() as f64
    }
}

/// `φ(θ) = Σ_k p_k e^{i⟨θ,h_k⟩}`.
pub fn char_fn(prefix: &LatticePrefix, theta: &[f64]) -> Result<Complex64> {
    prefix.check_theta(theta)?;
    Ok((0..prefix.len()).map(|k| prefix.weights[k] * prefix.phase(k, theta)).sum())
}

/// `S(θ) = ∇_θ φ(θ) = i Σ_k p_k h_k e^{i⟨θ,h_k⟩}`.
pub fn deriv_summary(prefix: &LatticePrefix, theta: &[f64]) -> Result<Vec<Complex64>> {
    prefix.check_theta(theta)?;
    let mut out = vec![Complex64::new(0.0, 0.0); prefix.dim];
    for k in 0..prefix.len() {
        let c = I * prefix.weights[k] * prefix.phase(k, theta);
        for (o, &h) in out.iter_mut().zip(&prefix.tokens[k]) {
            *o += c * h as f64;
        }
    }
    Ok(out)
}

/// Query that reads token `j` back out of the derivative summary:
/// `w_j(θ) = (i / p_j) · e^{i⟨θ,h_j⟩}` (constant `i·t` for uniform weights).
pub fn retrieval_query(prefix: &LatticePrefix, j: usize, theta: &[f64]) -> Result<Complex64> {
    prefix.check_index(j)?;
    prefix.check_theta(theta)?;
    Ok(I / prefix.weights[j] * prefix.phase(j, theta))
}

/// Query recovering the weighted embedding `p_j·h_j`: `i·e^{i⟨θ,h_j⟩}`.
pub fn weighted_query(prefix: &LatticePrefix, j: usize, theta: &[f64]) -> Result<Complex64> {
    prefix.check_index(j)?;
    prefix.check_theta(theta)?;
    Ok(I * prefix.phase(j, theta))
}

/// Scalar query recovering the weight `p_j` from `φ`: `e^{i⟨θ,h_j⟩}`.
pub fn scalar_query(prefix: &LatticePrefix, j: usize, theta: &[f64]) -> Result<Complex64> {
    prefix.check_index(j)?;
    prefix.check_theta(theta)?;
    Ok(prefix.phase(j, theta))
}

/// `φ` and `S` tabulated over the whole frequency lattice, so that many
/// queries against one prefix cost `O(N^d)` each.
#[derive(Debug, Clone)]
pub struct SpectralTable {
    lattice: FrequencyLattice,
    char_values: Vec<Complex64>,
    summaries: Vec<Vec<Complex64>>,
}

impl SpectralTable {
    pub fn new(prefix: &LatticePrefix) -> Self {
        let lattice = FrequencyLattice::for_prefix(prefix);
        let mut char_values = Vec::with_capacity(lattice.len());
        let mut summaries = Vec::with_capacity(lattice.len());
        for theta in lattice.points() {
            // Dimensions agree by construction.
            char_values.push(char_fn(prefix, theta).expect("lattice matches prefix"));
            summaries.push(deriv_summary(prefix, theta).expect("lattice matches prefix"));
        }
        SpectralTable { lattice, char_values, summaries }
    }

    pub fn lattice(&self) -> &FrequencyLattice {
        &self.lattice
    }

    /// Hermitian readout `(1/N^d) Σ_θ S(θ)·conj(w(θ))`.
    pub fn readout<F>(&self, query: F) -> Result<Vec<f64>>
    where
        F: Fn(&[f64]) -> Result<Complex64>,
    {
        let dim = self.lattice.dim();
        let mut acc = vec![Complex64::new(0.0, 0.0); dim];
        for (theta, s) in self.lattice.points().iter().zip(&self.summaries) {
            let w = query(theta)?.conj();
            for (a, &sv) in acc.iter_mut().zip(s) {
                *a += sv * w;
            }
        }
        let scale = self.lattice.weight();
        acc.into_iter()
            .enumerate()
            .map(|(c, v)| real_part(v * scale, c))
            .collect()
    }

    /// Readout of the scalar characteristic function; always one number.
    pub fn scalar_readout<F>(&self, query: F) -> Result<f64>
    where
        F: Fn(&[f64]) -> Result<Complex64>,
    {
        let mut acc = Complex64::new(0.0, 0.0);
        for (theta, phi) in self.lattice.points().iter().zip(&self.char_values) {
            acc += phi * query(theta)?.conj();
        }
        real_part(acc * self.lattice.weight(), 0)
    }
}

fn real_part(v: Complex64, component: usize) -> Result<f64> {
    if !v.re.is_finite() || !v.im.is_finite() {
        return Err(Error::NumericalIntegrity(format!("readout component {component} is not finite")));
    }
    if v.im.abs() > IMAG_RESIDUAL_LIMIT {
        return Err(Error::NumericalIntegrity(format!(
            "readout component {component} has imaginary residual {:.3e}",
            v.im
        )));
    }
    Ok(v.re)
}

/// Hermitian-inner-product readout of the derivative summary against
/// `query`, evaluated on every lattice frequency.
pub fn exact_readout<F>(prefix: &LatticePrefix, query: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Complex64>,
{
    SpectralTable::new(prefix).readout(query)
}

/// Same pairing applied to `φ` instead of `S`.
pub fn scalar_readout<F>(prefix: &LatticePrefix, query: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Complex64>,
{
    SpectralTable::new(prefix).scalar_readout(query)
}

/// Reads the prefix with the composite query `Σ_k α_k w_k`; equals `Σ_k α_k h_k`.
pub fn attention_composite(prefix: &LatticePrefix, alphas: &[f64]) -> Result<Vec<f64>> {
    composite_with_table(prefix, &SpectralTable::new(prefix), alphas)
}

fn composite_with_table(prefix: &LatticePrefix, table: &SpectralTable, alphas: &[f64]) -> Result<Vec<f64>> {
    if alphas.len() != prefix.len() {
        return Err(Error::Input(format!("{} coefficients for {} tokens", alphas.len(), prefix.len())));
    }
    table.readout(|theta| {
        let mut w = Complex64::new(0.0, 0.0);
        for (k, &a) in alphas.iter().enumerate() {
            w += a * retrieval_query(prefix, k, theta)?;
        }
        Ok(w)
    })
}

// ---------------------------------------------------------------------------
// Verification suite
// ---------------------------------------------------------------------------

/// Deliberate defects used to prove that the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleFault {
    /// Uses `i·(t+1)` instead of `i/p_j` as the retrieval constant.
    WrongQueryConstant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSuiteConfig {
    pub instances: usize,
    #[serde(default = "default_max_dim")]
    pub max_dim: usize,
    #[serde(default = "default_max_modulus")]
    pub max_modulus: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub fault: Option<OracleFault>,
}

fn default_max_dim() -> usize {
    3
}
fn default_max_modulus() -> usize {
    16
}
fn default_max_tokens() -> usize {
    20
}
fn default_tolerance() -> f64 {
    1e-9
}

impl Default for OracleSuiteConfig {
    fn default() -> Self {
        OracleSuiteConfig {
            instances: 500,
            max_dim: default_max_dim(),
            max_modulus: default_max_modulus(),
            max_tokens: default_max_tokens(),
            tolerance: default_tolerance(),
            fault: None,
        }
    }
}

impl OracleSuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::Input("instances must be at least 1".into()));
        }
        if self.max_dim == 0 || self.max_dim > 3 {
            return Err(Error::Input("max_dim must be in 1..=3".into()));
        }
        if self.max_modulus < 2 || self.max_modulus > 16 {
            return Err(Error::Input("max_modulus must be in 2..=16".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::Input("max_tokens must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Input("tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the oracle report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check_name: String,
    pub instances: usize,
    pub max_abs_error: f64,
    pub pass: bool,
}

/// Per-instance errors for every check; aggregated by [`run_suite`].
#[derive(Debug, Clone, Copy, Default)]
struct InstanceErrors {
    normalization: f64,
    gradient: f64,
    retrieval: f64,
    weights: f64,
    weighted_embeddings: f64,
    recombination: f64,
    linearity: f64,
    attention: f64,
}

fn random_instance(seed: u64, index: u64, cfg: &OracleSuiteConfig) -> Result<LatticePrefix> {
    let mut r = rng::stream(seed, rng::ORACLE, index);
    let dim = r.random_range(1..=cfg.max_dim);
    let modulus = r.random_range(2..=cfg.max_modulus);
    let cap = modulus.pow(dim as u32).min(cfg.max_tokens);
    let t = r.random_range(1..=cap);
    let weighted = index % 2 == 1;
    LatticePrefix::random(&mut r, dim, modulus, t, weighted)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check_instance(seed: u64, index: u64, cfg: &OracleSuiteConfig) -> Result<InstanceErrors> {
    let prefix = random_instance(seed, index, cfg)?;
    let table = SpectralTable::new(&prefix);
    let d = prefix.dim();
    let t = prefix.len();
    let mut e = InstanceErrors::default();
    let mut r = rng::stream(seed, rng::ORACLE, index | (1 << 32));

    e.normalization = (char_fn(&prefix, &vec![0.0; d])? - Complex64::new(1.0, 0.0)).norm();

    // Gradient consistency at an off-lattice frequency.
    let theta: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
    let s = deriv_summary(&prefix, &theta)?;
    let h = 1e-6;
    for c in 0..d {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[c] += h;
        minus[c] -= h;
        let fd = (char_fn(&prefix, &plus)? - char_fn(&prefix, &minus)?) / (2.0 * h);
        e.gradient = e.gradient.max((fd - s[c]).norm());
    }

    let fault = cfg.fault;
    let mut singles = Vec::with_capacity(t);
    for j in 0..t {
        let hj = prefix.token(j);
        let got = table.readout(|th| match fault {
            Some(OracleFault::WrongQueryConstant) => Ok(I * (t as f64 + 1.0) * prefix.phase(j, th)),
            None => retrieval_query(&prefix, j, th),
        })?;
        e.retrieval = e.retrieval.max(max_abs_diff(&got, &hj));
        singles.push(got);

        let pj = table.scalar_readout(|th| scalar_query(&prefix, j, th))?;
        e.weights = e.weights.max((pj - prefix.weights[j]).abs());

        let phj = table.readout(|th| weighted_query(&prefix, j, th))?;
        let expect: Vec<f64> = hj.iter().map(|v| v * prefix.weights[j]).collect();
        e.weighted_embeddings = e.weighted_embeddings.max(max_abs_diff(&phj, &expect));
        if pj >= 1e-6 {
            let recombined: Vec<f64> = phj.iter().map(|v| v / pj).collect();
            e.recombination = e.recombination.max(max_abs_diff(&recombined, &hj));
        }
    }

    // Linearity of the readout in the query.
    let a = r.random_range(-2.0..2.0);
    let b = r.random_range(-2.0..2.0);
    let j1 = r.random_range(0..t);
    let j2 = r.random_range(0..t);
    let combo = table.readout(|th| Ok(a * retrieval_query(&prefix, j1, th)? + b * retrieval_query(&prefix, j2, th)?))?;
    let expect: Vec<f64> = (0..d).map(|c| a * singles[j1][c] + b * singles[j2][c]).collect();
    e.linearity = max_abs_diff(&combo, &expect);

    // Softmax attention as a composite query.
    let q: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).map(|v: f64| 0.3 * v).collect();
    let logits: Vec<f64> = (0..t)
        .map(|k| prefix.token(k).iter().zip(&q).map(|(h, qv)| h * qv).sum())
        .collect();
    let alphas = crate::tensor::softmax(&logits);
    let got = composite_with_table(&prefix, &table, &alphas)?;
    let mut direct = vec![0.0; d];
    for (k, &al) in alphas.iter().enumerate() {
        for (o, hv) in direct.iter_mut().zip(prefix.token(k)) {
            *o += al * hv;
        }
    }
    e.attention = max_abs_diff(&got, &direct);
    Ok(e)
}

/// Runs every oracle check over `cfg.instances` random prefixes. Instance
/// generation is keyed by `(seed, index)` so results do not depend on the
/// thread count.
pub fn run_suite(seed: u64, cfg: &OracleSuiteConfig) -> Result<Vec<CheckReport>> {
    cfg.validate()?;
    let per_instance: Vec<InstanceErrors> = (0..cfg.instances as u64)
        .into_par_iter()
        .map(|i| check_instance(seed, i, cfg))
        .collect::<Result<_>>()?;

    let fold = |f: fn(&InstanceErrors) -> f64| per_instance.iter().map(f).fold(0.0, f64::max);
    let n = cfg.instances;
    let tol = cfg.tolerance;
    let make = |name: &str, err: f64, tol: f64| CheckReport {
        check_name: name.to_string(),
        instances: n,
        max_abs_error: err,
        pass: err <= tol,
    };
    Ok(vec![
        make("normalization", fold(|e| e.normalization), 1e-12),
        make("gradient_consistency", fold(|e| e.gradient), 1e-8),
        make("exact_retrieval", fold(|e| e.retrieval), tol),
        make("weight_recovery", fold(|e| e.weights), tol),
        make("weighted_embedding_recovery", fold(|e| e.weighted_embeddings), tol),
        make("recombination", fold(|e| e.recombination), tol),
        make("query_linearity", fold(|e| e.linearity), tol),
        make("attention_subsumption", fold(|e| e.attention), tol),
    ])
}
