use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("service unreachable at {url}: {reason}")]
    Unreachable { url: String, reason: String },

    #[error("HTTP {status} from {url}: {message}")]
    Http { url: String, status: u16, message: String },

    #[error("request to {url} failed: {reason}")]
    Transport { url: String, reason: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] dermachat_core::Error),
}

impl ServeError {
    /// Bad input or configuration, as opposed to a runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            ServeError::Config(_) | ServeError::Validation(_) => true,
            ServeError::Core(e) => matches!(
                e,
                dermachat_core::Error::Config(_)
                    | dermachat_core::Error::Validation(_)
                    | dermachat_core::Error::InvalidInput(_)
                    | dermachat_core::Error::EmptyDataset(_)
            ),
            _ => false,
        }
    }
}

pub type ServeResult<T> = std::result::Result<T, ServeError>;
