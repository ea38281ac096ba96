use crate::optimizer::Phase;

/// Errors raised by the core algorithms and codecs.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("vector dimension must be at least 1")]
    EmptyVector,

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("negative variance {value} at index {index}")]
    NegativeVariance { index: usize, value: f32 },

    #[error("{op} is not allowed in the {phase:?} phase at step {step}")]
    Phase {
        op: &'static str,
        phase: Phase,
        step: u64,
    },

    #[error("invalid hyperparameter: {0}")]
    Hyper(&'static str),

    #[error("no messages to aggregate")]
    NoMessages,

    #[error("decode error: {0}")]
    Decode(&'static str),

    #[error("invalid topology: {0}")]
    Topology(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;
