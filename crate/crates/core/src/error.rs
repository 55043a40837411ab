//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by data handling, estimation and inference.
#[derive(Debug, Error)]
pub enum LmError {
    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid or unsupported model specification.
    #[error("spec error: {0}")]
    Spec(String),

    /// Invalid parameter values (simplex violations, ordering violations, ...).
    #[error("parameter error: {0}")]
    Params(String),

    /// The model assigns zero probability to an observed configuration.
    #[error("zero-probability observation at occasion {occasion} for unit `{unit}`")]
    ZeroMass { occasion: usize, unit: String },

    /// A linear system arising in Fisher scoring or SE computation is singular.
    #[error("singular information matrix ({context}): rank {rank} of {dim}")]
    Singular {
        context: String,
        rank: usize,
        dim: usize,
    },

    /// An iterative routine failed to converge.
    #[error("no convergence in {context} after {iterations} iterations")]
    NoConvergence { context: String, iterations: usize },

    /// Numerical failure (link inversion, infeasible iterate, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LmError>;
