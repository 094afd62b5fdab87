use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use facesolve_core::Error as CoreError;

/// Wire shape of every error body.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub path: String,
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("no session `{0}`")]
    SessionNotFound(String),

    #[error("session has no report yet")]
    NoReport,

    #[error("revision {sent} is stale, session is at {current}")]
    StaleRevision { sent: u64, current: u64 },

    #[error("{message}")]
    Invalid { path: String, message: String },

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("solve worker failed: {0}")]
    Worker(String),
}

impl ApiError {
    pub fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Prefix the document path of a core error, e.g. with `/track`.
    pub fn at(prefix: &str, e: CoreError) -> Self {
        let path = match e.path() {
            Some(p) if p.starts_with('/') => format!("{prefix}{p}"),
            _ => prefix.to_string(),
        };
        ApiError::Invalid {
            path,
            message: e.to_string(),
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::SessionNotFound(_) | ApiError::NoReport => StatusCode::NOT_FOUND,
            ApiError::StaleRevision { .. } => StatusCode::CONFLICT,
            ApiError::Invalid { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Core(CoreError::Io { .. }) | ApiError::Worker(_) => StatusCode::INTERNAL_SERVER_ERROR,
            ApiError::Core(_) => StatusCode::UNPROCESSABLE_ENTITY,
        }
    }

    pub fn body(&self) -> ErrorBody {
        let code = match self {
            ApiError::SessionNotFound(_) => "not_found",
            ApiError::NoReport => "no_report",
            ApiError::StaleRevision { .. } => "stale_revision",
            ApiError::Invalid { .. } => "validation",
            ApiError::Core(CoreError::Parse { .. }) => "parse",
            ApiError::Core(CoreError::Io { .. }) | ApiError::Worker(_) => "internal",
            ApiError::Core(_) => "validation",
        };
        let path = match self {
            ApiError::Invalid { path, .. } => path.clone(),
            ApiError::StaleRevision { .. } => "/revision".to_string(),
            ApiError::Core(e) => e.path().unwrap_or("").to_string(),
            _ => String::new(),
        };
        ErrorBody {
            code: code.to_string(),
            message: self.to_string(),
            path,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
