//! Seeded, counter-based randomness.
//!
//! Every consumer draws from ChaCha8 keyed by the run seed, with the stream
//! id selecting an independent keystream. Stream ids are stable; changing
//! them changes every golden trajectory.
//!
//! | id | consumer                          |
//! |----|-----------------------------------|
//! | 1  | oracle instance generation        |
//! | 2  | SCA layer parameter init          |
//! | 3  | model parameter init              |
//! | 4  | training batches (index = step)   |
//! | 5  | RL prompt selection (index = step)|
//! | 6  | RL sampling (index = step)        |
//! | 7  | verification suites               |
//! | 8  | evaluation sets                   |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const ORACLE: u64 = 1;
pub const SCA_INIT: u64 = 2;
pub const MODEL_INIT: u64 = 3;
pub const BATCHES: u64 = 4;
pub const RL_PROMPTS: u64 = 5;
pub const RL_SAMPLING: u64 = 6;
pub const VERIFY: u64 = 7;
pub const EVAL: u64 = 8;

/// Generator for `(seed, stream, index)`. The index lets a consumer reopen
/// the stream for step `n` without replaying steps `0..n`, which is what
/// makes checkpoint resume exact.
pub fn stream(seed: u64, stream_id: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream_id << 40) ^ index);
    rng
}
