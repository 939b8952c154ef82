//! Error type shared by all modules.

use thiserror::Error;

/// Errors raised by grid operations, per-node solvers and integrators.
#[derive(Debug, Clone, Error)]
pub enum SlowFastError {
    /// A point left the valid (trimmed, unmasked) part of a grid.
    #[error("point outside valid grid domain: {0}")]
    DomainExceeded(String),

    /// A non-finite value appeared in a sample or intermediate result.
    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    /// A per-node Newton solve failed to converge.
    #[error("Newton iteration diverged: {0}")]
    NewtonDiverged(String),

    /// The linearized fast field A(x) is beyond the condition cap everywhere.
    #[error("fast-field matrix A singular or ill-conditioned: {0}")]
    SingularA(String),

    /// The per-node linear layer equation has no unique solution,
    /// i.e. the spectra sigma(eps*dLambda) and sigma(A) intersect.
    #[error("singular Sylvester operator: {0}")]
    SingularSylvester(String),

    /// The spectral-gap condition sigma(A) inter sigma(-A) = empty failed;
    /// the quadratic construction refuses normally elliptic and
    /// neutral-saddle slow manifolds.
    #[error("spectral gap violated: \u{3c3}(A) \u{2229} \u{3c3}(\u{2212}A) \u{2260} \u{2205} ({0})")]
    SpectralGap(String),

    /// Fixed-point projection iteration did not contract.
    #[error("fixed-point projection diverged: {0}")]
    FixedPointDiverged(String),

    /// Adaptive integrator step size underflowed (stiff blow-up or
    /// departure from the validity region).
    #[error("step size underflow at t = {t}: {msg}")]
    StepSizeUnderflow { t: f64, msg: String },

    /// Residual stagnated with growth before the iteration budget ran out.
    #[error("iteration budget exceeded: {0}")]
    IterationBudgetExceeded(String),

    /// Order-fit sweep input was unusable (too short or non-positive).
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),

    /// Preset constructor rejected its parameters.
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    /// Grid specification violates its invariants.
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

/// Crate-wide result alias.
pub type Result<V> = std::result::Result<V, SlowFastError>;

/// Non-fatal conditions surfaced to callers and reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Warning {
    /// Residual stopped decreasing before the requested depth.
    Stagnation { at_iteration: usize },
    /// Nodes excluded from the valid grid (fastness or solver failure).
    MaskedNodes { count: usize },
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Warning::Stagnation { at_iteration } => {
                write!(f, "residual stagnated at iteration {at_iteration}")
            }
            Warning::MaskedNodes { count } => write!(f, "{count} grid nodes masked"),
        }
    }
}
