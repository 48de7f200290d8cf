use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PrsError>;

#[derive(Debug, Error)]
pub enum PrsError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("index {index} out of range for {len} variants")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("variant {variant_id}: {source}")]
    Variant {
        variant_id: String,
        #[source]
        source: Box<PrsError>,
    },

    #[error("leverage too close to one at observation {observation}")]
    Leverage { observation: usize },

    #[error("solver did not converge at lambda {lambda}")]
    NonConvergence { lambda: f64 },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl PrsError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        PrsError::InvalidInput(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        PrsError::Format(msg.into())
    }

    pub(crate) fn dimension(msg: impl Into<String>) -> Self {
        PrsError::Dimension(msg.into())
    }
}
