use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The byte stream does not follow the container layout.
    #[error("format error at byte {position}: {message}")]
    Format { position: u64, message: String },

    /// A bundle or tensor violates one of its invariants.
    #[error("validation failed for {field}: {message}")]
    Validation { field: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used by front ends to pick exit codes and status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input files, flags or configuration.
    Invalid,
    /// The input was well formed but the computation could not proceed.
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::DegenerateInput(_) | Error::Numerical(_) => ErrorKind::Numerical,
            _ => ErrorKind::Invalid,
        }
    }

    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn format(position: u64, message: impl Into<String>) -> Self {
        Error::Format {
            position,
            message: message.into(),
        }
    }
}
