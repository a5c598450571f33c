//! Error types shared across the library.

use thiserror::Error;

/// Iteration record kept by the nonlinear solver (also serialized as the
/// convergence log).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct IterRecord {
    /// Newton iteration number (0-based).
    pub iter: usize,
    /// Sup-norm of the residual after this iteration.
    pub residual: f64,
    /// Accepted damping factor for the step taken.
    pub step: f64,
}

/// Payload attached to a solver nonconvergence error: the caller gets the
/// last iterate and the full residual history for post-mortems.
#[derive(Debug, Clone)]
pub struct NonConvergence {
    /// Human-readable description of how the iteration stalled.
    pub message: String,
    /// Residual/step history of every Newton iteration taken.
    pub history: Vec<IterRecord>,
    /// Interior values of the last iterate (flat grid layout).
    pub last_iterate: Vec<f64>,
}

/// Unified error type for the library.
#[derive(Debug, Error)]
pub enum CmcError {
    /// Incompatible shapes or budgets (dimension, order, grid size).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Division by zero, nonpositive square root, or a log-power overflow.
    #[error("singular operation: {0}")]
    Singular(String),

    /// Input outside the admissible domain (|H| >= 1, point off the graph, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Expression syntax or identifier error, with a byte offset into the source.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// An internal consistency check failed; indicates a bug, not bad input.
    #[error("internal inconsistency: {0}")]
    Internal(String),

    /// The Newton iteration stalled before reaching the residual target.
    #[error("solver did not converge: {}", .0.message)]
    NonConvergence(Box<NonConvergence>),

    /// Configuration file rejected during validation.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CmcError {
    /// Process exit code the CLI maps this error to: validation problems are
    /// `2`, every runtime/numerical failure is `1`.
    pub fn exit_code(&self) -> i32 {
        match self {
            CmcError::Config(_) | CmcError::Parse { .. } => 2,
            _ => 1,
        }
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, CmcError>;
