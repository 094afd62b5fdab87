use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed document. `path` is a JSON-pointer-like location.
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },

    #[error("validation error at {path}: {message}")]
    Validation { path: String, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("unknown region `{0}`")]
    UnknownRegion(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("incompatible model version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Document path the error refers to, if any.
    pub fn path(&self) -> Option<&str> {
        match self {
            Error::Parse { path, .. } | Error::Validation { path, .. } | Error::Io { path, .. } => {
                Some(path)
            }
            _ => None,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse {
            path: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        }
    }
}
