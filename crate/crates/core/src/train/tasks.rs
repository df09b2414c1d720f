//! Synthetic sequence tasks with a small symbolic vocabulary.
//!
//! Ids `0..6` are reserved ([`PAD`], [`BOS`], [`SEP`], [`EQ`], [`PLUS`],
//! [`EOS`]); ordinary symbols start at [`FIRST_SYMBOL`].

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const SEP: usize = 2;
pub const EQ: usize = 3;
pub const PLUS: usize = 4;
pub const EOS: usize = 5;
pub const FIRST_SYMBOL: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `BOS s₁…sₙ SEP s₁…sₙ`; the second copy is scored.
    Copy,
    /// `BOS k₁ v₁ … k_p v_p SEP k_q`; the value of `k_q` is scored.
    AssociativeRecall,
    /// `BOS a PLUS b EQ c EOS` with `c = (a + b) mod N`; `c` and `EOS` are
    /// scored.
    ModularArithmetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Positions per example, padding included.
    pub seq_len: usize,
    pub vocab_size: usize,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    #[serde(default = "default_modulus")]
    pub modulus: usize,
    pub seed: u64,
}

fn default_pairs() -> usize {
    4
}

fn default_modulus() -> usize {
    7
}

/// Token ids, next-token targets and loss mask, each `[batch, len]`
/// flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<f64>,
}

impl Batch {
    pub fn row(&self, b: usize) -> (&[usize], &[usize], &[f64]) {
        let r = b * self.len..(b + 1) * self.len;
        (&self.inputs[r.clone()], &self.targets[r.clone()], &self.mask[r])
    }
}

impl TaskSpec {
    pub fn symbols(&self) -> usize {
        self.vocab_size.saturating_sub(FIRST_SYMBOL)
    }

    /// Positions an example occupies before padding.
    pub fn content_len(&self) -> usize {
        match self.kind {
            TaskKind::Copy => self.seq_len,
            TaskKind::AssociativeRecall => 2 * self.pairs + 3,
            TaskKind::ModularArithmetic => 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("task: {msg}")));
        if self.symbols() == 0 {
            return fail(format!("vocab_size {} leaves no symbols", self.vocab_size));
        }
        match self.kind {
            TaskKind::Copy => {
                if self.seq_len < 4 {
                    return fail("copy needs seq_len ≥ 4".into());
                }
            }
            TaskKind::AssociativeRecall => {
                if self.pairs == 0 {
                    return fail("recall needs at least one pair".into());
                }
                if self.pairs > self.symbols() {
                    return fail(format!("{} distinct keys need more than {} symbols", self.pairs, self.symbols()));
                }
            }
            TaskKind::ModularArithmetic => {
                if self.modulus < 2 || self.modulus > self.symbols() {
                    return fail(format!("modulus {} must lie in 2..={}", self.modulus, self.symbols()));
                }
            }
        }
        if self.content_len() > self.seq_len {
            return fail(format!("an example needs {} positions but seq_len is {}", self.content_len(), self.seq_len));
        }
        Ok(())
    }

    /// One example as a full token sequence plus the indices whose token is
    /// scored.
    fn example<R: Rng>(&self, r: &mut R) -> (Vec<usize>, Vec<usize>) {
        let sym = |r: &mut R| FIRST_SYMBOL + r.random_range(0..self.symbols());
        match self.kind {
            TaskKind::Copy => {
                let n = (self.seq_len - 2) / 2;
                let body: Vec<usize> = (0..n).map(|_| sym(r)).collect();
                let mut seq = vec![BOS];
                seq.extend(&body);
                seq.push(SEP);
                let start = seq.len();
                seq.extend(&body);
                (seq, (start..start + n).collect())
            }
            TaskKind::AssociativeRecall => {
                let mut keys: Vec<usize> = (FIRST_SYMBOL..self.vocab_size).collect();
                keys.shuffle(r);
                keys.truncate(self.pairs);
                let values: Vec<usize> = (0..self.pairs).map(|_| sym(r)).collect();
                let mut seq = vec![BOS];
                for (k, v) in keys.iter().zip(&values) {
                    seq.push(*k);
                    seq.push(*v);
                }
                let q = r.random_range(0..self.pairs);
                seq.push(SEP);
                seq.push(keys[q]);
                seq.push(values[q]);
                let last = seq.len() - 1;
                (seq, vec![last])
            }
            TaskKind::ModularArithmetic => {
                let (a, b) = (r.random_range(0..self.modulus), r.random_range(0..self.modulus));
                let prompt = arithmetic_prompt(a, b);
                let mut seq = prompt.clone();
                seq.push(FIRST_SYMBOL + (a + b) % self.modulus);
                seq.push(EOS);
                (seq, vec![prompt.len(), prompt.len() + 1])
            }
        }
    }
}

/// `[BOS, a, PLUS, b, EQ]` with operands encoded as symbols.
pub fn arithmetic_prompt(a: usize, b: usize) -> Vec<usize> {
    vec![BOS, FIRST_SYMBOL + a, PLUS, FIRST_SYMBOL + b, EQ]
}

/// Deterministic training batch number `index` of `task`.
pub fn make_batch(task: &TaskSpec, batch_size: usize, index: u64) -> Result<Batch> {
    batch_from_stream(task, batch_size, rng::BATCHES, index)
}

/// Held-out batch number `index`, drawn from a stream training never reads.
pub fn make_eval_batch(task: &TaskSpec, batch_size: usize, index: u64) -> Result<Batch> {
    batch_from_stream(task, batch_size, rng::EVAL, index)
}

fn batch_from_stream(task: &TaskSpec, batch_size: usize, stream: u64, index: u64) -> Result<Batch> {
    task.validate()?;
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut r = rng::stream(task.seed, stream, index);
    let len = task.seq_len;
    let mut out = Batch {
        batch: batch_size,
        len,
        inputs: Vec::with_capacity(batch_size * len),
        targets: Vec::with_capacity(batch_size * len),
        mask: Vec::with_capacity(batch_size * len),
    };
    for _ in 0..batch_size {
        let (mut seq, scored) = task.example(&mut r);
        // One extra position so the last scored token still has an input.
        seq.resize(len + 1, PAD);
        out.inputs.extend(&seq[..len]);
        out.targets.extend(&seq[1..=len]);
        let mut mask = vec![0.0; len];
        for &s in &scored {
            mask[s - 1] = 1.0;
        }
        out.mask.extend(mask);
    }
    Ok(out)
}
