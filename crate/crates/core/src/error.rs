use thiserror::Error;

/// Errors raised anywhere in the filtering and estimation stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not symmetric: {0}")]
    NotSymmetric(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),

    // numerics
    #[error("block system is numerically singular: {0}")]
    SingularBlock(String),
    #[error("predicted covariance is not invertible")]
    SingularPrediction,
    #[error("transition matrix is not stationary (spectral radius {0})")]
    NonStationary(f64),

    // observation models
    #[error("observation {0} is outside the support of {1}")]
    OutOfSupport(String, &'static str),
    #[error("degenerate model parameters: {0}")]
    DegenerateParams(String),
    #[error("hybrid weight not applicable to `{0}`: realised information is nonnegative")]
    NotApplicable(&'static str),
    #[error("unknown model id `{0}`")]
    UnknownModel(String),

    // dynamics
    #[error("transition covariance Q is singular")]
    SingularQ,
    #[error("transition density is not differentiable at the requested point")]
    NonDifferentiable,
    #[error("transition density has no unique argmax")]
    NoArgmax,

    // kalman
    #[error("information matrix is singular or not positive definite")]
    SingularInformation,
    #[error("zero observation at index {0}: log of zero")]
    ZeroObservation(usize),

    // bellman
    #[error("inner optimiser did not converge after {0} iterations")]
    NotConverged(usize),
    #[error("search direction is not an ascent direction (Hessian not negative definite)")]
    IndefiniteDirection,
    #[error("updated information matrix is not positive definite")]
    InfoNotPd,
    #[error("I_prev + J22 is singular")]
    SingularD,

    // estimation
    #[error("filter failed at t = {t}: {source}")]
    FilterFailed { t: usize, source: Box<Error> },
    #[error("objective is not finite")]
    NonFiniteObjective,
    #[error("optimiser failed: {0}")]
    OptimFailed(String),
    #[error("negative Hessian at the optimum is not invertible")]
    HessianNotInvertible,
    #[error("value {value} outside the domain of transform `{transform}`")]
    OutOfDomain { transform: &'static str, value: f64 },

    // particle
    #[error("all particle weights are zero at t = {0}")]
    WeightCollapse(usize),
    #[error("particle filter supports only scalar states (got dimension {0})")]
    UnsupportedDimension(usize),

    // svleverage
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("lag window missing at t = {0}")]
    LagWindowMissing(usize),

    // harness
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub fn at(self, t: usize) -> Error {
        Error::FilterFailed { t, source: Box::new(self) }
    }

    /// True for errors caused by invalid user input rather than numerical trouble.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::UnknownModel(_)
                | Error::Dimension(_)
                | Error::DegenerateParams(_)
                | Error::InvalidParams(_)
                | Error::OutOfSupport(..)
                | Error::OutOfDomain { .. }
                | Error::NotSymmetric(_)
                | Error::UnsupportedDimension(_)
                | Error::LengthMismatch(..)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
