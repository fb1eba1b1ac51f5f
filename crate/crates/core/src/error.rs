//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by simulation components.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty rollout")]
    EmptyRollout,

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("expected {expected} tokens, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("numeric divergence")]
    NumericDivergence,

    #[error("degenerate fit")]
    DegenerateFit,

    #[error("no informative prompts")]
    NoInformativePrompts,

    #[error("zero variance")]
    ZeroVariance,

    #[error("zero gap")]
    ZeroGap,

    #[error("exemplar grader has no exemplars")]
    NoExemplars,

    #[error("grader snapshot for iteration {0} does not exist")]
    MissingSnapshot(usize),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
