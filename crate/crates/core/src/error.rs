use thiserror::Error;

/// Errors shared by every layer of the crate.
///
/// The variants line up with the CLI exit codes: `Input`/`Shape`/`Config`/
/// `Checkpoint` are caller mistakes (exit 2), `NumericalIntegrity` and
/// `NonFinite` are numerical aborts (exit 3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("numerical integrity violated: {0}")]
    NumericalIntegrity(String),

    #[error("non-finite value in {path}: {detail}")]
    NonFinite { path: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("judge error: {0}")]
    Judge(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
