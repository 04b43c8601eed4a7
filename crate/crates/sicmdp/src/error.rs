use thiserror::Error;

/// Errors shared across the toolkit.
#[derive(Debug, Error)]
pub enum SicmdpError {
    /// A dense linear solve failed; for a valid discounted model this cannot
    /// happen and signals corrupted input.
    #[error("singular linear system: {0}")]
    SingularSystem(String),

    /// Projected subgradient ascent was requested but no analytic gradient
    /// was supplied and the finite-difference fallback is disabled.
    #[error("gradient unavailable for projected subgradient ascent")]
    GradientUnavailable,

    /// Simplex pivoting could not find a pivot of acceptable magnitude;
    /// the instance is ill-conditioned and the caller may rescale.
    #[error("numerical breakdown in simplex pivoting: {0}")]
    NumericalBreakdown(String),

    /// The optimistic LP relaxation is infeasible: either delta is too small
    /// for the data or the instance itself is infeasible.
    #[error("optimistic LP is infeasible")]
    InfeasibleOptimisticSet,

    /// SI-CPO finished with an empty good set: eta is too small or the
    /// instance is infeasible at this parametrization.
    #[error("good set is empty after the final iteration")]
    EmptyGoodSet,

    /// Malformed model, policy, or configuration input.
    #[error("invalid input: {0}")]
    InvalidInput(String),
}
