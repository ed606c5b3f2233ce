use thiserror::Error;

/// Errors produced by the estimation engine, the state-evolution predictor and
/// the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("nonconvex scalar subproblem: lambda = {lambda} must be positive")]
    NonconvexSubproblem { lambda: f64 },

    #[error("non-finite value at iteration {iteration}: {what}")]
    NonFinite { iteration: usize, what: String },

    #[error("non-finite expectation while evaluating {integral}")]
    NonFiniteExpectation { integral: String },

    #[error("quadrature did not converge: estimate {estimate:e}, error bound {bound:e}")]
    Quadrature { estimate: f64, bound: f64 },

    #[error("missing statistics: {0}")]
    MissingStats(String),

    #[error("power iteration on a zero matrix")]
    ZeroMatrix,

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;
