use thiserror::Error;

/// Errors raised by the solver and its building blocks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A user-supplied parameter is outside its admissible range.
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    /// The canonical model needs a nonzero Wiener drift.
    #[error("canonical model requires μ ≠ 0 (all Wiener drifts are zero)")]
    ZeroDrift,

    /// A post-change mark weight sits on an atom with zero pre-change weight.
    #[error("absolute continuity violated at atom `{atom}`: nu1 = {nu1} but nu0 = 0")]
    AbsoluteContinuity { atom: String, nu1: f64 },

    /// A Laplace-transform estimate is inconsistent with a positive hitting time.
    #[error("inconsistent Laplace estimate at node {node}: {mean} ± {stderr}")]
    LaplaceInconsistent { node: usize, mean: f64, stderr: f64 },

    /// A downcrossing factor is too close to zero to divide by.
    #[error("division instability at node {node}: factor {mean} ± {stderr}; increase n_paths")]
    DivisionInstability { node: usize, mean: f64, stderr: f64 },

    /// The threshold integral did not change sign inside the searched range.
    #[error("threshold integral has no sign change on [0, {z_max}] (last value {last})")]
    NoThreshold { z_max: f64, last: f64 },

    /// An iterate increased by more than its noise allowance.
    #[error(
        "iterate {iteration} increased by {excess} at φ = {phi} (raise the Monte Carlo budget)"
    )]
    MonotonicityViolation {
        iteration: usize,
        phi: f64,
        excess: f64,
    },

    /// Adaptive quadrature failed to reach its tolerance.
    #[error("quadrature did not converge on [{lo}, {hi}]")]
    Quadrature { lo: f64, hi: f64 },

    /// A value function argument violates the bounds `[-1/c, 0]`.
    #[error("value {value} outside [-1/c, 0] = [{lower}, 0]")]
    ValueOutOfBounds { value: f64, lower: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        field,
        reason: reason.into(),
    }
}
