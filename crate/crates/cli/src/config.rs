//! Run configuration: one strict JSON document per invocation, with a few
//! fields overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqcond::model::ModelConfig;
use seqcond::oracle::OracleSuiteConfig;
use seqcond::rl::RlConfig;
use seqcond::train::bench::BenchConfig;
use seqcond::train::TrainConfig;
use seqcond::{Error, Precision, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Random layers in the scan-vs-streaming suite.
    pub equivalence_configs: usize,
    pub max_len: usize,
    /// Random layers in the finite-difference suite.
    pub gradcheck_configs: usize,
    pub fd_step: f64,
    pub layer_tolerance: f64,
    pub model_tolerance: f64,
    pub cancellation_configs: usize,
    /// Optional trained checkpoint whose SCA layers are also checked.
    pub checkpoint: Option<PathBuf>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            equivalence_configs: 50,
            max_len: 256,
            gradcheck_configs: 4,
            fd_step: 1e-5,
            layer_tolerance: 1e-4,
            model_tolerance: 1e-3,
            cancellation_configs: 20,
            checkpoint: None,
        }
    }
}

/// Either a named preset or a full model config.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub config: Option<ModelConfig>,
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let cfg = match (&self.preset, &self.config) {
            (Some(_), Some(_)) => return Err(Error::Config("model: give either preset or config, not both".into())),
            (None, Some(c)) => c.clone(),
            (p, None) => match p.as_deref().unwrap_or("toy") {
                "toy" => ModelConfig::toy(),
                "micro" => ModelConfig::micro(),
                "full_scale" => ModelConfig::full_scale(),
                other => return Err(Error::Config(format!("model.preset {other:?} is not toy, micro or full_scale"))),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// When present, must name the subcommand being run.
    #[serde(default)]
    pub subcommand: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub precision: Option<Precision>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub report_dir: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default)]
    pub oracle: Option<OracleSuiteConfig>,
    #[serde(default)]
    pub verify: Option<VerifyConfig>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub rl: Option<RlConfig>,
    #[serde(default)]
    pub bench: Option<BenchConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Command-line overrides shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub report_dir: Option<PathBuf>,
    pub threads: Option<usize>,
}

/// A validated configuration with every override applied.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub seed: u64,
    pub precision: Precision,
    pub threads: usize,
    pub report_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub run: RunConfig,
}

pub fn resolve(run: RunConfig, ov: &Overrides, subcommand: &str) -> Result<Resolved> {
    if let Some(s) = &run.subcommand {
        if s != subcommand {
            return Err(Error::Config(format!("config is for subcommand {s:?}, not {subcommand:?}")));
        }
    }
    let seed = ov.seed.or(run.seed).ok_or_else(|| Error::Config("a seed is required (config \"seed\" or --seed)".into()))?;
    let threads = ov.threads.or(run.threads).unwrap_or(1);
    if threads == 0 {
        return Err(Error::Config("threads must be positive".into()));
    }
    let report_dir = ov.report_dir.clone().or_else(|| run.report_dir.clone()).unwrap_or_else(|| PathBuf::from("reports"));
    let checkpoint_dir = run.checkpoint_dir.clone().unwrap_or_else(|| report_dir.join("checkpoints"));
    Ok(Resolved { seed, precision: ov.precision.or(run.precision).unwrap_or_default(), threads, report_dir, checkpoint_dir, run })
}
