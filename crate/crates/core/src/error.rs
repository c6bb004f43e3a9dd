//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },

    #[error("softmax row {row} is entirely masked")]
    DegenerateRow { row: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("prompt error: {0}")]
    Prompt(String),

    #[error("intervention error: {0}")]
    Intervention(String),

    #[error("attention hook contract violation: {0}")]
    HookContract(String),

    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("degenerate sink filter: all {n} tokens masked")]
    DegenerateFilter { n: usize },

    #[error("instrumentation error: {0}")]
    Instrumentation(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
