//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("numeric fault: {0}")]
    NumericFault(String),

    #[error("singularity: {0}")]
    Singularity(String),

    #[error("state space too large: {states} states exceeds bound {bound}")]
    ScaleBound { states: u128, bound: usize },

    #[error("absolute continuity violated: {0} (divergence is infinite)")]
    AbsoluteContinuity(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("did not converge: {0}")]
    NonConverged(String),

    #[error("training diverged at step {step}: {what} (last valid parameters retained)")]
    TrainDiverged {
        step: usize,
        what: String,
        last_valid: Box<crate::score::ScoreNet>,
    },

    #[error("out of range: {0}")]
    Range(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
