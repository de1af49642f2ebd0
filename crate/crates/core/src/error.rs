use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("diffusion coefficient is not positive at x = {x}")]
    NonPositiveSigma { x: f64 },

    #[error("scale exponent is not finite at x = {x}; shrink the probe bound")]
    OverflowInExponent { x: f64 },

    #[error("model is not ergodic: {0}")]
    NotErgodic(String),

    #[error("quadrature on [{a}, {b}] did not reach tolerance {tol:e} (error estimate {err:e})")]
    QuadratureFailure { a: f64, b: f64, tol: f64, err: f64 },

    #[error("tail of {label} beyond the truncation domain is {mass:e}")]
    TailDivergence { label: String, mass: f64 },

    #[error("path left the guard region at step {step} (x = {value})")]
    BlowUp { step: usize, value: f64 },

    #[error("moment condition violated: {which}")]
    MomentConditionViolated { which: String },

    #[error("theta_dot mismatch at gamma = {gamma}: covariance form {covariance}, finite difference {finite_difference}")]
    DerivativeMismatch {
        gamma: f64,
        covariance: f64,
        finite_difference: f64,
    },

    #[error("function is not in class C: {0}")]
    NotInClassC(String),

    #[error("need at least {needed} replicate values, got {got}")]
    InsufficientReplicates { needed: usize, got: usize },

    #[error("parameter {gamma} outside the family range ({lo}, {hi})")]
    GammaOutOfRange { gamma: f64, lo: f64, hi: f64 },

    #[error("unknown family `{0}`")]
    UnknownFamily(String),

    #[error("unknown moment function `{0}`")]
    UnknownFunction(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed path data: {0}")]
    MalformedPath(String),

    #[error("{errored} of {total} replicates errored")]
    TooManyFailures { errored: usize, total: usize },

    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization failure: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
