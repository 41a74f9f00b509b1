use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("width {width} is not divisible by {groups} groups")]
    IndivisibleWidth { width: usize, groups: usize },
    #[error("empty list passed to {0}")]
    EmptyList(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate variance in correlation denominator (eps = 0)")]
    DegenerateVariance,
    #[error("loss needs d >= 2, got d = {0}")]
    DimensionTooSmall(usize),
    #[error("batch of {0} samples is too small (need at least 2)")]
    BatchTooSmall(usize),
    #[error("cannot sample {k} clients from a pool of {pool}")]
    KTooLarge { k: usize, pool: usize },
    #[error("no sampled client holds data")]
    EmptyRound,
    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse error categories; the CLI maps them to exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    /// A numeric invariant was violated (non-finite values, degenerate
    /// variance, failed verification).
    Numeric,
    /// The request or its configuration is invalid.
    Config,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonFinite(_) | Error::DegenerateVariance => ErrorClass::Numeric,
            Error::Io(_) => ErrorClass::Io,
            _ => ErrorClass::Config,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
