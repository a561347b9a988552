use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("bitstream error: {0}")]
    Bitstream(String),
    #[error("entropy decode error: {0}")]
    Decode(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("video i/o error: {0}")]
    Video(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable process exit code per error category, used by the CLI.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::InvalidConfig(_) | Error::Contract(_) => 2,
            Error::Io(_) | Error::Video(_) | Error::Checkpoint(_) => 3,
            Error::Bitstream(_) | Error::Decode(_) => 4,
            Error::NonFinite(_) | Error::Training(_) => 5,
            Error::ShapeMismatch(_) => 6,
        }
    }
}
