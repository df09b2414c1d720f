//! One function per subcommand. Each returns whether its checks passed;
//! errors are mapped to exit codes by the caller.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use seqcond::checkpoint::{self, write_atomic, Checkpoint};
use seqcond::model::HybridModel;
use seqcond::oracle::run_suite;
use seqcond::rl::{self, RlMetrics, Stage};
use seqcond::train::bench::run_bench;
use seqcond::train::{make_batch, make_eval_batch, evaluate, model_gradcheck, run_training, MetricsRow, OptimState, TaskKind, TaskSpec};
use seqcond::verify::{gradcheck_suite, layer_equivalence, model_sca_equivalence, normalization_cancellation};
use seqcond::{model::ModelConfig, rng, Error, Precision, Result};

use crate::config::{Resolved, VerifyConfig};

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn f64_only(r: &Resolved, what: &str) -> Result<()> {
    if r.precision == Precision::F32 {
        return Err(Error::Config(format!("{what} runs in double precision only")));
    }
    Ok(())
}

/// CSV rows streamed to a temporary file and renamed into place when the
/// writer is finished, whether or not the run succeeded.
struct CsvSink {
    path: PathBuf,
    writer: csv::Writer<tempfile::NamedTempFile>,
}

impl CsvSink {
    fn create(path: PathBuf) -> Result<Self> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let tmp = tempfile::NamedTempFile::new_in(&dir)?;
        Ok(CsvSink { path, writer: csv::Writer::from_writer(tmp) })
    }

    fn row(&mut self, row: &impl Serialize) -> Result<()> {
        self.writer.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        self.writer.flush()?;
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let tmp = self.writer.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        tmp.as_file().sync_all()?;
        tmp.persist(&self.path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }
}

/// Runs `body`, then publishes the CSV even if `body` failed.
fn with_csv<T>(path: PathBuf, body: impl FnOnce(&mut CsvSink) -> Result<T>) -> Result<T> {
    let mut sink = CsvSink::create(path)?;
    let out = body(&mut sink);
    sink.finish()?;
    out
}

pub fn oracle(r: &Resolved, instances: Option<usize>) -> Result<bool> {
    f64_only(r, "the oracle suite")?;
    let mut cfg = r.run.oracle.clone().unwrap_or_default();
    if let Some(n) = instances {
        cfg.instances = n;
    }
    let checks = run_suite(r.seed, &cfg)?;
    let pass = checks.iter().all(|c| c.pass);
    for c in &checks {
        println!("{:<30} {:>6} instances  max error {:.3e}  {}", c.check_name, c.instances, c.max_abs_error, if c.pass { "PASS" } else { "FAIL" });
    }
    write_json(&r.report_dir.join("oracle.json"), &json!({ "command": "oracle", "seed": r.seed, "pass": pass, "checks": checks }))?;
    Ok(pass)
}

pub fn verify(r: &Resolved, checkpoint_flag: Option<PathBuf>) -> Result<bool> {
    let cfg: VerifyConfig = r.run.verify.clone().unwrap_or_default();
    let ckpt_path = checkpoint_flag.or(cfg.checkpoint.clone());
    // Load first: a bad checkpoint is an input error before any work.
    let loaded = ckpt_path.as_ref().map(|p| checkpoint::load(p, None, false)).transpose()?;

    let equivalence = layer_equivalence(r.seed, cfg.equivalence_configs, cfg.max_len, r.precision)?;
    let layer_checks = gradcheck_suite(r.seed, cfg.gradcheck_configs, cfg.fd_step, cfg.layer_tolerance)?;
    let micro = HybridModel::init(&ModelConfig::micro(), &mut rng::stream(r.seed, rng::MODEL_INIT, 0))?;
    let task = TaskSpec { kind: TaskKind::Copy, seq_len: 8, vocab_size: 16, pairs: 1, modulus: 2, seed: r.seed };
    let model_check = model_gradcheck(&micro, &make_batch(&task, 2, 0)?, cfg.fd_step, cfg.model_tolerance)?;
    let cancellation = normalization_cancellation(r.seed, cfg.cancellation_configs)?;
    let ckpt_report = match (&ckpt_path, &loaded) {
        (Some(p), Some(ck)) => {
            let (layers, dev) = model_sca_equivalence(&ck.model, r.seed, 64)?;
            Some(json!({ "path": p, "sca_layers": layers, "max_abs_dev": dev, "tolerance": 1e-11, "pass": dev <= 1e-11 }))
        }
        _ => None,
    };

    let worst_layer = layer_checks.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    let pass = equivalence.pass
        && layer_checks.iter().all(|g| g.pass)
        && model_check.pass
        && cancellation.pass
        && ckpt_report.as_ref().is_none_or(|c| c["pass"] == json!(true));
    let line = |name: &str, v: f64, ok: bool| println!("{name:<30} {v:.3e}  {}", if ok { "PASS" } else { "FAIL" });
    line("scan_vs_streaming", equivalence.max_abs_dev, equivalence.pass);
    line("layer_fd_rel_error", worst_layer, layer_checks.iter().all(|g| g.pass));
    line("model_fd_rel_error", model_check.max_rel_error, model_check.pass);
    line("normalization_cancellation", cancellation.max_abs_dev, cancellation.pass);
    let report = json!({
        "command": "verify",
        "seed": r.seed,
        "precision": r.precision,
        "pass": pass,
        "scan_vs_streaming_max_dev": equivalence.max_abs_dev,
        "worst_fd_rel_error": worst_layer.max(model_check.max_rel_error),
        "equivalence": {
            "precision": equivalence.precision,
            "tolerance": equivalence.tolerance,
            "cases": equivalence.cases.len(),
            "max_abs_dev": equivalence.max_abs_dev,
            "pass": equivalence.pass,
        },
        "layer_gradcheck": layer_checks,
        "model_gradcheck": model_check,
        "cancellation": cancellation,
        "checkpoint": ckpt_report,
    });
    write_json(&r.report_dir.join("verify.json"), &report)?;
    Ok(pass)
}

fn save_checkpoint(path: &Path, model: &HybridModel, optim: &OptimState, meta: serde_json::Value, force: bool) -> Result<()> {
    let metadata = match meta {
        serde_json::Value::Object(m) => m.into_iter().collect(),
        _ => Default::default(),
    };
    checkpoint::save(path, &Checkpoint { model: model.clone(), optim: Some(optim.clone()), metadata }, force)
}

pub fn train(r: &Resolved, resume: Option<PathBuf>, force: bool) -> Result<bool> {
    f64_only(r, "training")?;
    let cfg = r.run.train.clone().ok_or_else(|| Error::Config("train section is missing".into()))?;
    cfg.validate()?;
    let model_cfg = r.run.model.resolve()?;
    let (mut model, mut state) = match &resume {
        Some(p) => {
            let ck = checkpoint::load(p, Some(&model_cfg), force)?;
            let st = ck.optim.ok_or_else(|| Error::Checkpoint(format!("{} has no optimizer state to resume from", p.display())))?;
            (ck.model, st)
        }
        None => {
            let m = HybridModel::init(&model_cfg, &mut rng::stream(r.seed, rng::MODEL_INIT, 0))?;
            let st = OptimState::new(&m);
            (m, st)
        }
    };
    let ckpt_dir = r.checkpoint_dir.clone();
    let rows = with_csv(r.report_dir.join("metrics.csv"), |sink| {
        run_training(&mut model, &mut state, &cfg, |row: &MetricsRow, m, st| {
            sink.row(row)?;
            if cfg.checkpoint_every > 0 && (row.step + 1) % cfg.checkpoint_every == 0 {
                let path = ckpt_dir.join(format!("step_{:06}.ckpt", row.step + 1));
                save_checkpoint(&path, m, st, json!({ "seed": r.seed, "step": row.step + 1 }), force)?;
            }
            Ok(())
        })
    })?;
    let final_path = ckpt_dir.join("final.ckpt");
    save_checkpoint(&final_path, &model, &state, json!({ "seed": r.seed, "step": state.step }), force)?;
    let (eval_loss, eval_accuracy) = evaluate(&model, &make_eval_batch(&cfg.task, cfg.batch_size, 0)?)?;
    let last = rows.last();
    println!("trained to step {}  eval loss {eval_loss:.4}  eval accuracy {eval_accuracy:.3}", state.step);
    write_json(
        &r.report_dir.join("train.json"),
        &json!({
            "command": "train",
            "seed": r.seed,
            "pass": true,
            "steps": state.step,
            "final_loss": last.map(|l| l.loss),
            "final_accuracy": last.map(|l| l.accuracy),
            "eval_loss": eval_loss,
            "eval_accuracy": eval_accuracy,
            "parameters": model.param_count(),
            "checkpoint": final_path,
        }),
    )?;
    Ok(true)
}

pub fn rl(r: &Resolved, stage: Stage, init: Option<PathBuf>, force: bool) -> Result<bool> {
    f64_only(r, "RL")?;
    let cfg = r.run.rl.clone().unwrap_or_default();
    cfg.validate(stage)?;
    let model_cfg = r.run.model.resolve()?;
    let mut model = match &init {
        Some(p) => checkpoint::load(p, Some(&model_cfg), force)?.model,
        None => {
            let mut m = HybridModel::init(&model_cfg, &mut rng::stream(r.seed, rng::MODEL_INIT, 0))?;
            if cfg.warm_start_steps > 0 {
                rl::warm_start(&mut m, &cfg, r.seed, 32)?;
            }
            m
        }
    };
    let mut judge = cfg.judge.build()?;
    let mut state = OptimState::new(&model);
    let name = stage.name();
    let report = with_csv(r.report_dir.join(format!("rl_{name}.csv")), |sink| {
        rl::run_stage(stage, &mut model, &mut state, &cfg, r.seed, judge.as_mut(), |row: &RlMetrics| sink.row(row))
    })?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let path = r.checkpoint_dir.join(format!("rl_{name}.ckpt"));
    save_checkpoint(&path, &model, &state, json!({ "seed": r.seed, "stage": name }), force)?;
    println!("{name}: accuracy {:.3} -> {:.3}", report.accuracy_before, report.accuracy_after);
    write_json(
        &r.report_dir.join(format!("rl_{name}.json")),
        &json!({
            "command": "rl",
            "stage": stage,
            "seed": r.seed,
            "pass": true,
            "steps": report.metrics.len(),
            "updates": report.metrics.iter().filter(|m| m.updated).count(),
            "skipped_groups": report.metrics.iter().map(|m| m.skipped_groups).sum::<usize>(),
            "accuracy_before": report.accuracy_before,
            "accuracy_after": report.accuracy_after,
            "warnings": report.warnings,
            "checkpoint": path,
        }),
    )?;
    Ok(true)
}

pub fn bench(r: &Resolved) -> Result<bool> {
    f64_only(r, "the scaling benchmark")?;
    let cfg = r.run.bench.clone().unwrap_or_default();
    let report = run_bench(&cfg)?;
    with_csv(r.report_dir.join("bench.csv"), |sink| report.rows.iter().try_for_each(|row| sink.row(row)))?;
    let pass = report.sca_slope <= 1.3 && report.attention_slope >= 1.7 && report.sca_state_constant;
    println!("sca slope {:.3}  attention slope {:.3}  constant sca state {}", report.sca_slope, report.attention_slope, report.sca_state_constant);
    write_json(
        &r.report_dir.join("bench.json"),
        &json!({
            "command": "bench",
            "pass": pass,
            "sca_slope": report.sca_slope,
            "attention_slope": report.attention_slope,
            "sca_state_constant": report.sca_state_constant,
            "rows": report.rows,
        }),
    )?;
    Ok(pass)
}

/// Written next to the reports when a run aborts on a numerical fault.
pub fn write_abort(dir: &Path, err: &Error) {
    let _ = std::fs::create_dir_all(dir);
    if let Ok(mut f) = File::create(dir.join("abort.json")) {
        let _ = writeln!(f, "{}", json!({ "error": err.to_string() }));
    }
}
