//! Helpers shared by several integration suites.
#![allow(dead_code)]

use seqcond::model::{HybridModel, ModelConfig};
use seqcond::rl::{run_stage, warm_start, RlConfig, Stage, StageReport, StubJudge};
use seqcond::rng;
use seqcond::train::OptimState;

/// Settings of the RL learning smoke test: a micro model warm-started to
/// partial accuracy on addition mod 10, then the three stages in order.
pub fn smoke_config() -> RlConfig {
    let mut rl = RlConfig { modulus: 10, prompts_per_step: 16, steps: 40, warm_start_steps: 100, timing: false, ..RlConfig::default() };
    rl.optim.lr = 1e-3;
    rl
}

pub fn smoke_run(seed: u64) -> Vec<StageReport> {
    let rl = smoke_config();
    let mut model = HybridModel::init(&ModelConfig::micro(), &mut rng::stream(seed, rng::MODEL_INIT, 0)).unwrap();
    warm_start(&mut model, &rl, seed, 32).unwrap();
    [Stage::Format, Stage::Balanced, Stage::Distill]
        .into_iter()
        .map(|stage| {
            let mut st = OptimState::new(&model);
            run_stage(stage, &mut model, &mut st, &rl, seed, &mut StubJudge, |_| Ok(())).unwrap()
        })
        .collect()
}

/// Stages 2 and 3 each leave greedy accuracy at least where they found it.
pub fn later_stages_hold(reports: &[StageReport]) -> bool {
    reports[1..].iter().all(|r| r.accuracy_after >= r.accuracy_before)
}
