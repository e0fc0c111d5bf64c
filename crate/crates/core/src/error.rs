use thiserror::Error;

/// Errors raised across the tensor, model, optimisation and data layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("value outside domain: {0}")]
    DomainError(String),

    #[error("dense size {size} exceeds limit {limit}")]
    SizeLimit { size: u128, limit: u128 },

    #[error("numerical failure in {location}: {detail}")]
    NumericalError { location: String, detail: String },

    #[error("cache does not match block: {0}")]
    CacheMismatch(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    ConfigError(String),

    #[error("malformed file: {0}")]
    FormatError(String),

    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("metric undefined: labels contain only one class")]
    DegenerateLabels,

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
