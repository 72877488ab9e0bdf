use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("spectrogram scale is {found}, expected {expected}")]
    Scale {
        expected: &'static str,
        found: &'static str,
    },

    #[error("bitstream: {0}")]
    Bitstream(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config hash mismatch: stream expects {expected:016x}, model is {found:016x}")]
    HashMismatch { expected: u64, found: u64 },

    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: usize, what: String },

    #[error("stream state is poisoned by an earlier error; call reset()")]
    Poisoned,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
