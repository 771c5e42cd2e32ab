use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid cell id {0} (expected 0..=18)")]
    InvalidCell(u8),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite state for aircraft {aircraft_id} at t={time}s")]
    NonFinite { aircraft_id: u8, time: f64 },

    #[error("unknown monitor threshold {0} ft")]
    UnknownThreshold(f64),

    #[error("unknown spec preset `{0}`")]
    UnknownPreset(String),

    #[error("{path}: {message}")]
    Format { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
