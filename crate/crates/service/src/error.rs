use hiddenscope_core::ErrorKind;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] hiddenscope_core::Error),
    /// Bad request shape: unknown op, empty op list, missing source.
    #[error("{0}")]
    Request(String),
    #[error("{path}: {source}")]
    Dump {
        path: String,
        #[source]
        source: hiddenscope_core::Error,
    },
    #[error("extraction failed: {0}")]
    Extraction(String),
    #[error("sidecar protocol error: {0}")]
    Protocol(String),
    #[error("extractor unavailable: {0}")]
    Unavailable(String),
}

impl ServiceError {
    /// Process exit code for the CLI: 3 for numerical failures, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        let kind = match self {
            ServiceError::Core(e) | ServiceError::Dump { source: e, .. } => e.kind(),
            _ => ErrorKind::Invalid,
        };
        match kind {
            ErrorKind::Numerical => 3,
            ErrorKind::Invalid => 2,
        }
    }
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;
