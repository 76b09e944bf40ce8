use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot reduce over an empty axis")]
    EmptyAxis,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this tape")]
    DetachedTape,
    #[error("non-finite value at flat index {index}")]
    NonFiniteValue { index: usize },
    #[error("invalid specification: {0}")]
    BadSpec(String),
    #[error("channel count {0} is not divisible by 4")]
    IndivisibleChannels(usize),
    #[error("resolution mismatch: state expects {expected:?}, input has {got:?}")]
    ResolutionMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("batch norm in training mode needs more than one value per channel")]
    BatchTooSmall,
    #[error("spatial extent H*W must be at least 2, got {0}")]
    DegenerateSpatial(usize),
    #[error("target must be binary (0 or 1)")]
    NonBinaryTarget,
    #[error("input must be binary (0 or 1)")]
    NonBinaryInput,
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("malformed data: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
