use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("audio could not be decoded: {0}")]
    BadAudio(String),

    #[error("recording is {duration_s:.2} s; at least {min_s} s are required")]
    TooShort { duration_s: f64, min_s: f64 },

    #[error("precondition failed: {0}")]
    PreconditionFailed(String),

    #[error("service unavailable: {0}")]
    ServiceUnavailable(String),

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

impl ServiceError {
    /// Machine-readable kind echoed in error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::InvalidRequest(_) => "invalid_request",
            ServiceError::BadAudio(_) => "bad_audio",
            ServiceError::TooShort { .. } => "too_short",
            ServiceError::PreconditionFailed(_) => "precondition_failed",
            ServiceError::ServiceUnavailable(_) => "service_unavailable",
            ServiceError::Config(_) => "config",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::InvalidRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::BadAudio(_) | ServiceError::TooShort { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::PreconditionFailed(_) => StatusCode::CONFLICT,
            ServiceError::ServiceUnavailable(_) | ServiceError::Config(_) => StatusCode::SERVICE_UNAVAILABLE,
        }
    }
}

impl From<redb::Error> for ServiceError {
    fn from(e: redb::Error) -> Self {
        ServiceError::ServiceUnavailable(format!("storage: {e}"))
    }
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        ServiceError::ServiceUnavailable(format!("storage: {e}"))
    }
}

impl From<serde_json::Error> for ServiceError {
    fn from(e: serde_json::Error) -> Self {
        ServiceError::ServiceUnavailable(format!("stored record unreadable: {e}"))
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.kind(), "message": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}
