//! Shared error type for the laboratory crates.

use thiserror::Error;

/// Errors surfaced by laboratory computations.
///
/// Variants distinguish caller mistakes (bad domains, malformed
/// configuration) from honest analysis outcomes (non-convergence, not enough
/// data), because the latter carry diagnostics a caller may want to report
/// rather than fix.
#[derive(Debug, Error)]
pub enum PhLabError {
    /// Arguments outside the documented domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Input is valid syntactically but degenerate for the requested
    /// computation (for example, coinciding placement points).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A counting formula hit a boundary tie too close to call in floating
    /// point; the exact-arithmetic path should be used instead.
    #[error("genericity violation: {0}")]
    Genericity(String),

    /// The request would exceed an explicit compute budget.
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),

    /// A discretized evolution drifted beyond its conservation tolerance;
    /// the step size must shrink.
    #[error("step size too coarse: {0}")]
    StepSize(String),

    /// An iteration failed to reach its tolerance. Carries the residual
    /// history so the caller can see whether it was diverging or just slow.
    #[error("no convergence: {context} (last residuals {history:?})")]
    NonConvergence { context: String, history: Vec<f64> },

    /// A conditioning point lies beyond the tabulated support.
    #[error("tail exhausted: {0}")]
    TailExhausted(String),

    /// Too few events to run the requested statistical test.
    #[error("insufficient statistical power: {0}")]
    InsufficientPower(String),

    /// A precondition of a statistical procedure failed.
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// Malformed configuration or data file.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
