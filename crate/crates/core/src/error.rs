use dpfed_he::HeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Poisson sampling produced no records.
    #[error("empty batch")]
    EmptyBatch,

    #[error("coordinate {coordinate}: value {value} exceeds the aggregation range ±{limit}")]
    Range {
        coordinate: usize,
        value: f64,
        limit: f64,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("decryption failure: {0}")]
    DecryptionFailure(HeError),

    #[error(transparent)]
    He(HeError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<HeError> for Error {
    fn from(e: HeError) -> Self {
        match e {
            HeError::DecryptionFailure { .. } => Error::DecryptionFailure(e),
            other => Error::He(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
