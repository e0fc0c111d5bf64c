use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("bad checkpoint format: {0}")]
    Format(String),

    #[error("checkpoint integrity: {0}")]
    Integrity(String),

    #[error("non-finite value at {location}: {detail}")]
    Numerical { location: String, detail: String },

    #[error(transparent)]
    Model(mltn_core::Error),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl From<mltn_core::Error> for CliError {
    fn from(e: mltn_core::Error) -> Self {
        use mltn_core::Error as E;
        match e {
            E::ConfigError(m) => CliError::Config(m),
            E::NumericalError { location, detail } => CliError::Numerical { location, detail },
            E::FormatError(m) => CliError::Data(m),
            e @ (E::CountMismatch { .. } | E::DegenerateLabels | E::LabelOutOfRange { .. }) => {
                CliError::Data(e.to_string())
            }
            other => CliError::Model(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
