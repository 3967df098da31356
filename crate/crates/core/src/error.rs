use thiserror::Error;

use crate::vb::Checkpoint;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("training diverged at epoch {epoch}: loss was non-finite for 3 consecutive epochs")]
    Diverged {
        epoch: usize,
        /// Most recent checkpoint taken before divergence, if any.
        last_checkpoint: Option<Box<Checkpoint>>,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

pub(crate) fn numerical<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Numerical(msg.into()))
}
