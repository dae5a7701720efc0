use std::io;

/// Errors raised anywhere in the forecasting pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("integration diverged at step {step}")]
    IntegrationDiverged { step: usize },

    #[error("ensemble member {member} diverged at step {step}")]
    MemberDiverged { member: usize, step: usize },

    #[error("insufficient series length: required {required}, available {available}")]
    InsufficientLength { required: usize, available: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("bandwidth tuning failed: largest log-log slope {max_slope:.3e} is not above 0.01")]
    TuningFailed { max_slope: f64 },

    #[error("bandwidth too small: density estimate underflows at sample {index}")]
    BandwidthTooSmall { index: usize },

    #[error("query point lies outside the kernel support of the training data")]
    OutOfSupport,

    #[error("eigensolver failed: {converged} of {requested} eigenpairs converged")]
    EigensolverFailed { converged: usize, requested: usize },

    #[error("invalid column selection: {0}")]
    InvalidSelection(String),

    #[error("density annihilated by clipping{}", step.map(|s| format!(" at observation {s}")).unwrap_or_default())]
    DegenerateDensity { step: Option<usize> },

    #[error("singular innovation covariance")]
    SingularInnovation,

    #[error("missing ensemble reference for second-moment skill")]
    MissingReference,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
