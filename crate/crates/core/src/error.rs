//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PmbmError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is singular or numerically indefinite in {context}")]
    Singular { context: &'static str },

    #[error("degenerate hypothesis set: all weights are zero")]
    DegenerateWeights,

    #[error("set-density oracle accepts at most {max} elements, got {got}")]
    OracleLimit { max: usize, got: usize },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("weight lists passed to k-best merging must be sorted descending")]
    UnsortedWeights,

    #[error("no feasible assignment")]
    InfeasibleAssignment,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
