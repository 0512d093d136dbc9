//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by parsers, solvers and checks.
#[derive(Debug, Error)]
pub enum Error {
    /// Source text could not be parsed into an expression.
    #[error("parse error at {line}:{col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },

    /// A caller handed in something structurally invalid (non-symmetric
    /// matrix, mismatched dimensions, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is out of its admissible range.
    #[error("configuration error: {0}")]
    Config(String),

    /// Evaluation left the numerical domain (log of a non-positive value,
    /// division by zero, non-finite intermediate).
    #[error("numerical domain error in `{context}`: {msg}")]
    NumericalDomain { context: String, msg: String },

    /// A backward sweep or fixed-point loop failed irrecoverably.
    #[error("solver failure: {0}")]
    Solver(String),

    /// The fixed-point map did not contract on the current interval; the
    /// stitching driver reacts by halving the interval.
    #[error("interval too long: contraction ratio {ratio:.4} at iterate {iterate}")]
    IntervalTooLong { ratio: f64, iterate: usize },

    /// The explicit scheme's stability bound is violated.
    #[error("CFL violation: dt = {dt:.6e} exceeds the stable limit {dt_max:.6e}")]
    CflViolation { dt: f64, dt_max: f64 },

    /// Plumbing error: a field is missing data the caller promised.
    #[error("field error: {0}")]
    Field(String),
}

pub type Result<T> = std::result::Result<T, Error>;
