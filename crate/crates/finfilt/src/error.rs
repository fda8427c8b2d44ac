//! Error type shared by all numerical routines in this crate.

use thiserror::Error;

/// Errors produced by the numerical routines in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter failed validation before any computation started.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Adaptive quadrature exhausted its node budget without stabilizing.
    #[error("quadrature did not converge: {0}")]
    QuadratureNonConvergence(String),

    /// The integrand has no numerically representable mass on the search window.
    #[error("integrand has no representable mass on the quadrature window")]
    EmptyIntegrand,

    /// A density evaluator keeps mass outside the adapted quadrature window.
    #[error("density mass outside quadrature window (captured {captured:.12} of unit mass)")]
    DomainMismatch { captured: f64 },

    /// Moment (Hankel) matrix condition number exceeded the trust threshold.
    #[error("moment matrix ill-conditioned (cond ~ {cond:.3e})")]
    IllConditioned { cond: f64 },

    /// A recovered leading canonical parameter was nonnegative, so the density
    /// is not integrable. Distinct from numerical failure by construction.
    #[error("leading canonical parameter nonnegative (theta_m = {theta_m:.6e}): density not integrable")]
    BoundaryViolation { theta_m: f64 },

    /// Step damping drove the leading canonical parameter to the manifold
    /// boundary (theta_m -> 0-) without reaching the moment target.
    #[error("iteration stalled at the manifold boundary (theta_m = {theta_m:.6e})")]
    BoundaryCollapse { theta_m: f64 },

    /// The supplied moment sequence is not consistent with any member of the
    /// manifold (the order-zero integration-by-parts identity fails).
    #[error("moment sequence inconsistent with the exponential manifold (identity residual {residual:.3e})")]
    InconsistentMoments { residual: f64 },

    /// Iterative solver did not reach tolerance.
    #[error("iteration did not converge after {iters} steps (residual {residual:.3e})")]
    NonConvergence { iters: usize, residual: f64 },

    /// Bayes update underflowed: the observation is incompatible with the
    /// prior support at working precision.
    #[error("posterior normalizer underflow: observation incompatible with prior")]
    PosteriorUnderflow,

    /// A matrix expected to be positive definite was not.
    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// A filter recursion failed at a specific step; the index is 0-based.
    #[error("filter step {step} failed: {source}")]
    FilterStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    /// Lookup outside a tabulated grid.
    #[error("query outside tabulated grid: {0}")]
    OutOfGrid(String),
}

impl Error {
    /// Wraps an error with the filter step index at which it occurred.
    pub fn at_step(self, step: usize) -> Error {
        Error::FilterStep {
            step,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
