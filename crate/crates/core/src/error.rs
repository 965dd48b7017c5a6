use thiserror::Error;

/// Errors raised by the pose-estimation pipeline and its building blocks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point projects with homogeneous depth {w:.3e} (limit {limit:.1e})")]
    DegenerateDepth { w: f64, limit: f64 },

    #[error("triangulation needs at least 2 views with positive confidence, got {found}")]
    InsufficientViews { found: usize },

    #[error("stacked triangulation system is rank deficient")]
    SingularSystem,

    #[error("smallest singular value is not simple (gap {gap:.3e})")]
    NonDifferentiablePoint { gap: f64 },

    #[error("sequence must be non-empty")]
    EmptySequence,

    #[error("length mismatch: expected {expected}, got {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no view yields a valid anchor for joint {joint}")]
    AllViewsMasked { joint: usize },

    #[error("need at least {needed} tokens for assignment, have {available}")]
    InsufficientTokens { needed: usize, available: usize },

    #[error("limb ({0}, {1}) has zero ground-truth length")]
    ZeroLengthLimb(usize, usize),

    #[error("training diverged at step {step}: loss is not finite")]
    DivergenceDetected { step: usize },

    #[error("token {0} has no score")]
    UnscoredToken(usize),

    #[error("invalid camera rig: {0}")]
    InvalidRig(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
