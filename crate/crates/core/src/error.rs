use thiserror::Error;

use crate::axmult::MultKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid approximation level m={m} for {kind} multiplier (allowed 0..{limit})")]
    InvalidLevel { kind: MultKind, m: u32, limit: u32 },

    #[error("{0} multiplier has no control-variate input")]
    NoControlVariate(MultKind),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("empty filter")]
    EmptyFilter,

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid array configuration: {0}")]
    InvalidArray(String),

    #[error(transparent)]
    Sim(#[from] crate::systolic::SimFault),

    #[error(transparent)]
    Format(#[from] crate::nn::format::FormatError),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sample count must be at least {min}, got {actual}")]
    TooFewSamples { min: usize, actual: usize },
}
