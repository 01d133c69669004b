use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("sequence is empty")]
    EmptySequence,

    #[error("{what}: {size} is not divisible by {factor}")]
    Divisibility {
        what: String,
        size: usize,
        factor: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("non-finite loss in term `{term}` at step {step}")]
    NonFiniteLoss { term: String, step: u64 },

    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),

    #[error(
        "gradient check failed: relative error {rel_error:.3e} exceeds {tolerance:.1e} at {param}[{index}] (group `{group}`)"
    )]
    ToleranceExceeded {
        group: String,
        param: String,
        index: usize,
        rel_error: f64,
        tolerance: f64,
    },

    #[error("bad range: {0}")]
    BadRange(String),

    #[error("corrupt container {path}: {reason}")]
    CorruptContainer { path: PathBuf, reason: String },

    #[error("duplicate array name `{0}`")]
    DuplicateName(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("score list needs both same-speaker and different-speaker trials")]
    OneClassOnly,

    #[error("empty evaluation set")]
    EmptySet,

    #[error("missing array `{0}`")]
    MissingArray(String),

    #[error("external evaluator failed: {0}")]
    Evaluator(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn divisibility(what: impl Into<String>, size: usize, factor: usize) -> Self {
        Error::Divisibility {
            what: what.into(),
            size,
            factor,
        }
    }

    pub(crate) fn io_at(path: &std::path::Path, e: std::io::Error) -> Self {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
