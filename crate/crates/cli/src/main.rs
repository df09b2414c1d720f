mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{resolve, Overrides, RunConfig};
use seqcond::rl::Stage;
use seqcond::{Error, Precision, Result};

#[derive(Parser)]
#[command(name = "seqcond", version, about = "Spectral-attention verification, training, RL and benchmark suites")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    #[arg(long, global = true)]
    report_dir: Option<PathBuf>,
    /// Worker threads (default 1).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact spectral retrieval checks on random lattice prefixes.
    Oracle {
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Scan-vs-streaming equivalence and finite-difference gradient checks.
    Verify {
        /// Also check the SCA layers of this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Supervised training on a synthetic task.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overwrite checkpoints and accept config-hash mismatches.
        #[arg(long)]
        force: bool,
    },
    /// One RL post-training stage.
    Rl {
        #[arg(long)]
        stage: String,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Wall-clock scaling of SCA against attention.
    Bench,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Oracle { .. } => "oracle",
            Command::Verify { .. } => "verify",
            Command::Train { .. } => "train",
            Command::Rl { .. } => "rl",
            Command::Bench => "bench",
        }
    }
}

fn run(cli: Cli) -> (Option<PathBuf>, Result<bool>) {
    let run_cfg = match &cli.config {
        Some(p) => match RunConfig::load(p) {
            Ok(c) => c,
            Err(e) => return (None, Err(e)),
        },
        None => RunConfig::default(),
    };
    let ov = Overrides {
        seed: cli.seed,
        precision: cli.precision.as_deref().map(|p| if p == "f32" { Precision::F32 } else { Precision::F64 }),
        report_dir: cli.report_dir.clone(),
        threads: cli.threads,
    };
    let r = match resolve(run_cfg, &ov, cli.command.name()) {
        Ok(r) => r,
        Err(e) => return (None, Err(e)),
    };
    let dir = Some(r.report_dir.clone());
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(r.threads).build_global() {
        return (dir, Err(Error::Config(format!("thread pool: {e}"))));
    }
    let out = match cli.command {
        Command::Oracle { instances } => commands::oracle(&r, instances),
        Command::Verify { checkpoint } => commands::verify(&r, checkpoint),
        Command::Train { resume, force } => commands::train(&r, resume, force),
        Command::Rl { stage, init, force } => stage.parse::<Stage>().and_then(|s| commands::rl(&r, s, init, force)),
        Command::Bench => commands::bench(&r),
    };
    (dir, out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (dir, out) = run(cli);
    match out {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NumericalIntegrity(_) | Error::NonFinite { .. } => {
                    if let Some(d) = dir {
                        commands::write_abort(&d, &e);
                    }
                    ExitCode::from(3)
                }
                _ => ExitCode::from(2),
            }
        }
    }
}
