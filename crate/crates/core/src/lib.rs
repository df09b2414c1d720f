//! SeqCond attention (SCA): a linear-time sequence layer built on the
//! gradient of the prefix characteristic function, together with
//!
//! * [`oracle`]: exact retrieval identities on a discrete torus,
//! * [`sca`]: the trainable layer in parallel and streaming form,
//! * [`model`]: the SCA → SCA → attention hybrid language model,
//! * [`train`]: synthetic tasks, AdamW training and the verification suites,
//! * [`rl`]: Dr. GRPO, gradient-balanced GRPO and scored self-distillation,
//! * [`verify`]: scan/streaming and gradient checks,
//! * [`checkpoint`]: the binary checkpoint format.

pub mod error;
pub mod oracle;
pub mod real;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use real::{Precision, Real};
pub mod sca;
pub mod model;
pub mod train;
pub mod verify;
pub mod rl;
pub mod checkpoint;
