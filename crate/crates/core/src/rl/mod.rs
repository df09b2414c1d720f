//! Reinforcement-learning stages on a verifiable task.
//!
//! Every stage samples `group_size` completions per prompt, scores them
//! with a [`Judge`], mixes the scores into rewards and centres them within
//! the group. Three stages share that loop:
//!
//! * `format`: token-level group-relative policy gradient with a KL
//!   penalty towards the policy at stage start;
//! * `balanced`: the same objective, but the gradients of positive- and
//!   negative-advantage completions are accumulated apart and the negative
//!   part is rescaled to the norm of the positive part;
//! * `distill`: cross-entropy on the group's above-average completions,
//!   weighted by their advantage.
//!
//! The task is modular addition: the prompt `BOS a + b =` must be
//! completed with `c EOS`.

pub mod judge;
pub mod reward;
pub mod sampling;

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HybridModel;
use crate::rng;
use crate::tensor::log_softmax;
use crate::train::tasks::{arithmetic_prompt, EOS, FIRST_SYMBOL};
use crate::train::{adamw_update, run_training, sequence_loss, MetricsRow, OptimConfig, OptimState, TaskKind, TaskSpec, TrainConfig};
pub use judge::{Judge, JudgeConfig, JudgeRequest, StubJudge, Verdict};
pub use reward::{balanced_gradient, compute_advantages, distill_weights, mix_reward, skip_mastered, token_weights, JudgeScore, SkipRule};
use reward::{categorical_kl, categorical_kl_grad};
pub use sampling::{generate, sample_token, Completion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Format,
    Balanced,
    Distill,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Format => "format",
            Stage::Balanced => "balanced",
            Stage::Distill => "distill",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "format" => Ok(Stage::Format),
            "balanced" => Ok(Stage::Balanced),
            "distill" => Ok(Stage::Distill),
            other => Err(Error::Config(format!("unknown stage {other:?} (format, balanced, distill)"))),
        }
    }
}

fn rl_optim() -> OptimConfig {
    OptimConfig { lr: 1e-4, warmup_steps: 0, weight_decay: 0.0, ..OptimConfig::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    /// Operands and answers live in `0..modulus`.
    pub modulus: usize,
    pub group_size: usize,
    pub prompts_per_step: usize,
    pub steps: u64,
    pub kl_coef: f64,
    pub overlong_penalty: f64,
    pub balance_eps: f64,
    pub skip: SkipRule,
    pub temperature: f64,
    /// `0` keeps the whole vocabulary.
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub optim: OptimConfig,
    pub judge: JudgeConfig,
    pub rubric: String,
    /// Supervised steps on the task before the first RL stage.
    pub warm_start_steps: u64,
    pub timing: bool,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            modulus: 7,
            group_size: 4,
            prompts_per_step: 8,
            steps: 20,
            kl_coef: 0.02,
            overlong_penalty: 0.25,
            balance_eps: 1e-8,
            skip: SkipRule::default(),
            temperature: 1.0,
            top_k: 0,
            max_new_tokens: 3,
            optim: rl_optim(),
            judge: JudgeConfig::Stub {},
            rubric: "Reply with (a + b) mod N as a single symbol, then stop.".into(),
            warm_start_steps: 0,
            timing: true,
        }
    }
}

impl RlConfig {
    pub fn validate(&self, stage: Stage) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("rl.{m}")));
        if self.group_size < 2 {
            return fail("group_size must be at least 2");
        }
        if self.prompts_per_step == 0 {
            return fail("prompts_per_step must be positive");
        }
        if self.modulus < 2 {
            return fail("modulus must be at least 2");
        }
        if self.max_new_tokens == 0 {
            return fail("max_new_tokens must be positive");
        }
        if !(self.kl_coef >= 0.0) || !(self.overlong_penalty >= 0.0) || !(self.balance_eps > 0.0) {
            return fail("kl_coef and overlong_penalty must be non-negative, balance_eps positive");
        }
        if !(self.temperature >= 0.0) {
            return fail("temperature must be non-negative");
        }
        if stage == Stage::Distill && self.temperature <= 0.0 {
            return fail("temperature must be positive for self-distillation");
        }
        self.optim.validate()
    }

    fn task(&self, seed: u64, vocab: usize) -> TaskSpec {
        TaskSpec { kind: TaskKind::ModularArithmetic, seq_len: 7, vocab_size: vocab, pairs: 1, modulus: self.modulus, seed }
    }

    fn check_model(&self, model: &HybridModel) -> Result<()> {
        if FIRST_SYMBOL + self.modulus > model.cfg.vocab_size {
            return Err(Error::Config(format!("modulus {} needs {} tokens, the model has {}", self.modulus, FIRST_SYMBOL + self.modulus, model.cfg.vocab_size)));
        }
        if 5 + self.max_new_tokens > model.cfg.max_len {
            return Err(Error::Config(format!("prompt plus {} new tokens exceeds the context length {}", self.max_new_tokens, model.cfg.max_len)));
        }
        Ok(())
    }
}

/// One prompt with its sampled, judged completions.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub prompt: Vec<usize>,
    pub answer: usize,
    pub completions: Vec<Completion>,
    pub verdicts: Vec<Verdict>,
    pub scores: Vec<JudgeScore>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Why the group does not contribute to the update, if it doesn't.
    pub skipped: Option<String>,
}

pub fn verdict(tokens: &[usize], answer: usize, overlong: bool) -> Verdict {
    Verdict { correct: tokens.first() == Some(&answer), well_formed: tokens == [answer, EOS], overlong }
}

fn group_index(step: u64, group: usize) -> u64 {
    (step << 20) | group as u64
}

/// Samples the prompts and completions of one step. Each group draws from
/// its own random stream, so the result is independent of the thread count.
pub fn sample_groups(model: &HybridModel, cfg: &RlConfig, seed: u64, step: u64) -> Result<Vec<RolloutGroup>> {
    (0..cfg.prompts_per_step)
        .into_par_iter()
        .map(|g| {
            let mut pr = rng::stream(seed, rng::RL_PROMPTS, group_index(step, g));
            let (a, b) = (pr.random_range(0..cfg.modulus), pr.random_range(0..cfg.modulus));
            let prompt = arithmetic_prompt(a, b);
            let answer = FIRST_SYMBOL + (a + b) % cfg.modulus;
            let mut sr = rng::stream(seed, rng::RL_SAMPLING, group_index(step, g));
            let completions = (0..cfg.group_size)
                .map(|_| generate(model, &prompt, cfg.max_new_tokens, cfg.temperature, cfg.top_k, &mut sr))
                .collect::<Result<Vec<_>>>()?;
            let verdicts = completions.iter().map(|c| verdict(&c.tokens, answer, c.overlong)).collect();
            Ok(RolloutGroup { prompt, answer, completions, verdicts, scores: vec![], rewards: vec![], advantages: vec![], skipped: None })
        })
        .collect()
}

/// Scores every completion of `group`. A judge failure skips the group
/// rather than aborting the run.
pub fn judge_group(group: &mut RolloutGroup, judge: &mut dyn Judge, cfg: &RlConfig, id_base: u64) -> Result<()> {
    let prompt = judge::render(&group.prompt);
    for (i, (c, v)) in group.completions.iter().zip(&group.verdicts).enumerate() {
        let req = JudgeRequest { id: id_base + i as u64, prompt: prompt.clone(), completion: judge::render(&c.tokens), rubric: cfg.rubric.clone() };
        match judge.score(&req, v) {
            Ok(s) => group.scores.push(s),
            Err(e) => {
                group.skipped = Some(format!("judge failed: {e}"));
                return Ok(());
            }
        }
    }
    group.rewards = group.scores.iter().map(|s| mix_reward(s, cfg.overlong_penalty)).collect::<Result<_>>()?;
    group.advantages = compute_advantages(&group.rewards)?;
    if skip_mastered(&group.scores, &cfg.skip) {
        group.skipped = Some("mastered".into());
    }
    Ok(())
}

/// Value of the group objective given per-token log-probabilities of the
/// sampled tokens and per-token KL divergences:
/// `Σ_i (len_i/Σlen)·mean_t(−A_i·log π + β·KL)`.
pub fn grpo_loss(advantages: &[f64], logps: &[Vec<f64>], kls: &[Vec<f64>], kl_coef: f64) -> Result<f64> {
    if advantages.len() != logps.len() || logps.len() != kls.len() {
        return Err(Error::Shape("advantages, log-probabilities and KL terms disagree on the group size".into()));
    }
    let lengths: Vec<usize> = logps.iter().map(Vec::len).collect();
    let weights = token_weights(&lengths);
    let mut loss = 0.0;
    for (((a, lp), kl), w) in advantages.iter().zip(logps).zip(kls).zip(weights) {
        if lp.len() != kl.len() {
            return Err(Error::Shape("log-probabilities and KL terms disagree on a completion length".into()));
        }
        if lp.is_empty() {
            continue;
        }
        let per_token: f64 = lp.iter().zip(kl).map(|(l, k)| -a * l + kl_coef * k).sum();
        loss += w * per_token / lp.len() as f64;
    }
    Ok(loss)
}

/// Per-completion quantities of one policy-gradient pass.
struct CompletionPass {
    logp: Vec<f64>,
    kl: Vec<f64>,
    /// Gradient of the policy-gradient term (plus the KL term unless
    /// `split_kl`).
    pg: HybridModel,
    kl_grad: Option<HybridModel>,
}

/// Forward and backward for one completion. The loss being differentiated
/// is `−pg_w·Σ_t log π(y_t) + kl_w·Σ_t KL_t`.
fn completion_pass(model: &HybridModel, reference: &HybridModel, prompt: &[usize], tokens: &[usize], pg_w: f64, kl_w: f64, split_kl: bool) -> Result<CompletionPass> {
    let v = model.cfg.vocab_size;
    let mut seq = prompt.to_vec();
    seq.extend(&tokens[..tokens.len() - 1]);
    let tr = model.forward_traced(&seq)?;
    let ref_logits = reference.lm_forward(&seq)?;
    let mut d_pg = vec![0.0; tr.logits.len()];
    let mut d_kl = vec![0.0; tr.logits.len()];
    let mut logp_tok = Vec::with_capacity(tokens.len());
    let mut kls = Vec::with_capacity(tokens.len());
    for (t, &y) in tokens.iter().enumerate() {
        let row = prompt.len() - 1 + t;
        let lp = log_softmax(&tr.logits[row * v..(row + 1) * v]);
        let lq = log_softmax(&ref_logits[row * v..(row + 1) * v]);
        logp_tok.push(lp[y]);
        kls.push(categorical_kl(&lp, &lq));
        for (c, d) in d_pg[row * v..(row + 1) * v].iter_mut().enumerate() {
            let onehot = if c == y { 1.0 } else { 0.0 };
            *d = pg_w * (lp[c].exp() - onehot);
        }
        if kl_w != 0.0 {
            for (d, g) in d_kl[row * v..(row + 1) * v].iter_mut().zip(categorical_kl_grad(&lp, &lq)) {
                *d = kl_w * g;
            }
        }
    }
    if !logp_tok.iter().chain(&kls).all(|x| x.is_finite()) {
        return Err(Error::NonFinite { path: "policy log-probabilities".into(), detail: format!("completion {tokens:?}") });
    }
    let mut pg = model.zeros_like();
    let kl_grad = if split_kl {
        model.backward(&tr, &d_pg, &mut pg)?;
        let mut g = model.zeros_like();
        if kl_w != 0.0 {
            model.backward(&tr, &d_kl, &mut g)?;
        }
        Some(g)
    } else {
        crate::tensor::add_assign(&mut d_pg, &d_kl);
        model.backward(&tr, &d_pg, &mut pg)?;
        None
    };
    Ok(CompletionPass { logp: logp_tok, kl: kls, pg, kl_grad })
}

/// A completion to imitate with a given weight.
#[derive(Debug, Clone)]
pub struct DistillTrace {
    pub prompt: Vec<usize>,
    pub tokens: Vec<usize>,
    pub weight: f64,
}

/// `Σ w·mean_t(−log π(y_t)) / norm` and its gradient. Traces with zero
/// weight are never evaluated, so an all-zero batch yields an exactly zero
/// gradient.
pub fn distill_gradient(model: &HybridModel, traces: &[DistillTrace], norm: f64) -> Result<(f64, HybridModel)> {
    if !(norm > 0.0) {
        return Err(Error::Input("distillation norm must be positive".into()));
    }
    let v = model.cfg.vocab_size;
    let parts: Vec<(f64, HybridModel)> = traces
        .par_iter()
        .filter(|t| t.weight != 0.0 && !t.tokens.is_empty())
        .map(|t| {
            let mut seq = t.prompt.clone();
            seq.extend(&t.tokens[..t.tokens.len() - 1]);
            let tr = model.forward_traced(&seq)?;
            let p = t.prompt.len() - 1;
            let mut targets = vec![0; seq.len()];
            let mut weights = vec![0.0; seq.len()];
            for (k, &y) in t.tokens.iter().enumerate() {
                targets[p + k] = y;
                weights[p + k] = t.weight / t.tokens.len() as f64;
            }
            let (loss, _, dlogits) = sequence_loss(&tr.logits, &targets, &weights, v, norm);
            let mut g = model.zeros_like();
            model.backward(&tr, &dlogits, &mut g)?;
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut grads = model.zeros_like();
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss, grads))
}

/// Metrics of one RL update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RlMetrics {
    pub step: u64,
    pub stage: Stage,
    /// Fraction of sampled completions with the right answer.
    pub success_rate: f64,
    /// Mean reward over judged groups.
    pub mean_reward: f64,
    pub loss: f64,
    /// Mean per-token KL to the reference policy.
    pub kl: f64,
    pub pos_norm: f64,
    pub neg_norm: f64,
    pub scaled_neg_norm: f64,
    pub grad_norm: f64,
    pub skipped_groups: usize,
    pub updated: bool,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub metrics: Vec<RlMetrics>,
    pub warnings: Vec<String>,
}

/// Greedy exact-answer accuracy over all `modulus²` problems.
pub fn arithmetic_accuracy(model: &HybridModel, modulus: usize) -> Result<f64> {
    let v = model.cfg.vocab_size;
    let hits: Vec<bool> = (0..modulus * modulus)
        .into_par_iter()
        .map(|k| {
            let (a, b) = (k / modulus, k % modulus);
            let prompt = arithmetic_prompt(a, b);
            let logits = model.lm_forward(&prompt)?;
            let last = &logits[(prompt.len() - 1) * v..];
            Ok(sample_token(last, 0.0, 0, &mut rng::stream(0, rng::EVAL, 0)) == FIRST_SYMBOL + (a + b) % modulus)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Supervised pre-training on the RL task so sampled completions are
/// sometimes right.
pub fn warm_start(model: &mut HybridModel, cfg: &RlConfig, seed: u64, batch_size: usize) -> Result<Vec<MetricsRow>> {
    let train = TrainConfig {
        task: cfg.task(seed, model.cfg.vocab_size),
        batch_size,
        steps: cfg.warm_start_steps,
        optim: OptimConfig { lr: 3e-3, warmup_steps: 20, ..OptimConfig::default() },
        fixed_batch: false,
        checkpoint_every: 0,
        timing: cfg.timing,
    };
    let mut state = OptimState::new(model);
    run_training(model, &mut state, &train, |_, _, _| Ok(()))
}

/// Runs `cfg.steps` updates of `stage`, starting from `state.step`. The
/// KL reference is the policy as passed in. `on_step` sees every metrics
/// row as it is produced.
pub fn run_stage(
    stage: Stage,
    model: &mut HybridModel,
    state: &mut OptimState,
    cfg: &RlConfig,
    seed: u64,
    judge: &mut dyn Judge,
    mut on_step: impl FnMut(&RlMetrics) -> Result<()>,
) -> Result<StageReport> {
    cfg.validate(stage)?;
    cfg.check_model(model)?;
    let reference = model.clone();
    let accuracy_before = arithmetic_accuracy(model, cfg.modulus)?;
    let mut metrics = Vec::new();
    let mut warnings = Vec::new();
    let first = state.step;
    for step in first..first + cfg.steps {
        let started = Instant::now();
        model.check_finite("parameter")?;
        let mut groups = sample_groups(model, cfg, seed, step)?;
        for (g, group) in groups.iter_mut().enumerate() {
            judge_group(group, judge, cfg, group_index(step, g) * cfg.group_size as u64)?;
            if let Some(why) = &group.skipped {
                if why != "mastered" {
                    warnings.push(format!("step {step} group {g}: skipped, {why}"));
                }
            }
        }
        let sampled: usize = groups.iter().map(|g| g.completions.len()).sum();
        let correct = groups.iter().flat_map(|g| &g.verdicts).filter(|v| v.correct).count();
        let judged: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
        let skipped_groups = groups.iter().filter(|g| g.skipped.is_some()).count();
        let active: Vec<&RolloutGroup> = groups.iter().filter(|g| g.skipped.is_none()).collect();
        let mut row = RlMetrics {
            step,
            stage,
            success_rate: correct as f64 / sampled as f64,
            mean_reward: if judged.is_empty() { 0.0 } else { judged.iter().sum::<f64>() / judged.len() as f64 },
            loss: 0.0,
            kl: 0.0,
            pos_norm: 0.0,
            neg_norm: 0.0,
            scaled_neg_norm: 0.0,
            grad_norm: 0.0,
            skipped_groups,
            updated: false,
            wall_ms: 0,
        };
        if active.is_empty() {
            warnings.push(format!("step {step}: every group skipped, no update"));
        } else {
            let mut grads = match stage {
                Stage::Format | Stage::Balanced => policy_gradient(model, &reference, &active, cfg, stage == Stage::Balanced, &mut row)?,
                Stage::Distill => {
                    let traces: Vec<DistillTrace> = active
                        .iter()
                        .flat_map(|g| {
                            let w = distill_weights(&g.rewards).unwrap_or_default();
                            g.completions.iter().zip(w).map(|(c, weight)| DistillTrace { prompt: g.prompt.clone(), tokens: c.tokens.clone(), weight })
                        })
                        .collect();
                    let (loss, grads) = distill_gradient(model, &traces, active.len() as f64)?;
                    row.loss = loss;
                    grads
                }
            };
            let info = adamw_update(&cfg.optim, model, &mut grads, state)?;
            row.grad_norm = info.grad_norm;
            row.updated = true;
        }
        if !row.updated {
            // Keep the step counter aligned with the sampling streams.
            state.step += 1;
        }
        row.wall_ms = if cfg.timing { started.elapsed().as_millis() as u64 } else { 0 };
        on_step(&row)?;
        metrics.push(row);
    }
    let accuracy_after = arithmetic_accuracy(model, cfg.modulus)?;
    Ok(StageReport { stage, accuracy_before, accuracy_after, metrics, warnings })
}

/// Mean group-objective gradient over `groups`. With `balanced`, the
/// positive- and negative-advantage parts are combined by
/// [`balanced_gradient`] and the KL part is added afterwards.
fn policy_gradient(model: &HybridModel, reference: &HybridModel, groups: &[&RolloutGroup], cfg: &RlConfig, balanced: bool, row: &mut RlMetrics) -> Result<HybridModel> {
    let n = groups.len() as f64;
    let jobs: Vec<(usize, usize)> = groups.iter().enumerate().flat_map(|(g, grp)| (0..grp.completions.len()).map(move |i| (g, i))).collect();
    let passes: Vec<CompletionPass> = jobs
        .par_iter()
        .map(|&(g, i)| {
            let grp = groups[g];
            let total: usize = grp.completions.iter().map(|c| c.tokens.len()).sum();
            let denom = total as f64 * n;
            completion_pass(model, reference, &grp.prompt, &grp.completions[i].tokens, grp.advantages[i] / denom, cfg.kl_coef / denom, balanced)
        })
        .collect::<Result<_>>()?;
    let mut pos = model.zeros_like();
    let mut neg = model.zeros_like();
    let mut kl_grad = model.zeros_like();
    let mut kl_sum = 0.0;
    let mut tokens = 0usize;
    let mut logps: Vec<Vec<Vec<f64>>> = groups.iter().map(|_| Vec::new()).collect();
    let mut kls: Vec<Vec<Vec<f64>>> = groups.iter().map(|_| Vec::new()).collect();
    for (&(g, i), p) in jobs.iter().zip(passes) {
        if groups[g].advantages[i] < 0.0 {
            neg.add_assign(&p.pg);
        } else {
            pos.add_assign(&p.pg);
        }
        if let Some(k) = &p.kl_grad {
            kl_grad.add_assign(k);
        }
        kl_sum += p.kl.iter().sum::<f64>();
        tokens += p.kl.len();
        logps[g].push(p.logp);
        kls[g].push(p.kl);
    }
    let mut loss = 0.0;
    for (g, grp) in groups.iter().enumerate() {
        loss += grpo_loss(&grp.advantages, &logps[g], &kls[g], cfg.kl_coef)? / n;
    }
    row.loss = loss;
    row.kl = if tokens == 0 { 0.0 } else { kl_sum / tokens as f64 };
    if !balanced {
        row.pos_norm = pos.global_norm();
        row.neg_norm = neg.global_norm();
        row.scaled_neg_norm = row.neg_norm;
        pos.add_assign(&neg);
        return Ok(pos);
    }
    let b = balanced_gradient(&pos.flat(), &neg.flat(), cfg.balance_eps)?;
    if !(b.scaled_neg_norm <= b.pos_norm) {
        return Err(Error::NumericalIntegrity(format!("rescaled negative gradient norm {} exceeds the positive norm {}", b.scaled_neg_norm, b.pos_norm)));
    }
    row.pos_norm = b.pos_norm;
    row.neg_norm = b.neg_norm;
    row.scaled_neg_norm = b.scaled_neg_norm;
    let mut out = model.zeros_like();
    out.set_flat(&b.grad)?;
    out.add_assign(&kl_grad);
    Ok(out)
}
