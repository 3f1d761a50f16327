use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("events out of order: timestamp {next} follows {prev}")]
    Ordering { prev: u64, next: u64 },

    #[error("index {index} out of bounds for size {size}")]
    Bounds { index: usize, size: usize },

    #[error("timestep gap: expected {expected}, got {got}")]
    Gap { expected: i64, got: i64 },

    #[error("insufficient history: {have} of {need} frames")]
    InsufficientHistory { have: usize, need: usize },

    #[error("non-finite value in {0}")]
    Numeric(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("rate undefined: pattern never observed")]
    UndefinedRate,

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Usage/config problems map to exit code 2, everything else to 1.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
