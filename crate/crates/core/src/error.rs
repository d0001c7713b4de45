//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tape is frozen (backward already ran); no further ops may be recorded")]
    FrozenTape,

    #[error("loss must be a scalar, got length {len}")]
    NonScalarLoss { len: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("modulation indexing mismatch: {0}")]
    IndexingMismatch(String),

    #[error("program is not deterministic: two identical forward passes disagree")]
    NonDeterministicProgram,

    #[error("decision window is empty")]
    EmptyWindow,

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint version mismatch: file has {found}, this build reads {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),

    #[error("numeric divergence: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;
