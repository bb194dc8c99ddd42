use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value {value} outside representable range ±{limit}")]
    Range { value: f64, limit: f64 },

    #[error("decryption failure: noise {noise} exceeds margin {margin}")]
    DecryptionFailure { noise: u64, margin: u64 },

    #[error("malformed encoding: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, HeError>;
