//! Error type shared by the codec pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("corrupt bitstream at byte {offset}: {reason}")]
    CorruptBitstream { offset: usize, reason: String },

    #[error("optimization diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn corrupt(offset: usize, reason: impl Into<String>) -> Self {
        Error::CorruptBitstream {
            offset,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
