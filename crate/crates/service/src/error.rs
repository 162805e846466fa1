use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use fedgm_core::api::ApiError;
use fedgm_core::orchestrate::OrchestrateError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Orchestrate(#[from] OrchestrateError),
    #[error("no live session {0:?}")]
    UnknownSession(String),
    #[error("session {0:?} is already open")]
    SessionExists(String),
    #[error("session {0:?} produced no gallery")]
    NoGallery(String),
    #[error("worker task failed: {0}")]
    Worker(String),
}

impl ServiceError {
    fn status_and_code(&self) -> (StatusCode, &'static str) {
        match self {
            ServiceError::Orchestrate(OrchestrateError::Config(_)) => (StatusCode::BAD_REQUEST, "config"),
            ServiceError::Orchestrate(OrchestrateError::Data(_)) => (StatusCode::UNPROCESSABLE_ENTITY, "data"),
            ServiceError::Orchestrate(_) => (StatusCode::INTERNAL_SERVER_ERROR, "run_failed"),
            ServiceError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            ServiceError::SessionExists(_) => (StatusCode::CONFLICT, "session_exists"),
            ServiceError::NoGallery(_) => (StatusCode::INTERNAL_SERVER_ERROR, "no_gallery"),
            ServiceError::Worker(_) => (StatusCode::INTERNAL_SERVER_ERROR, "worker"),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, code) = self.status_and_code();
        if status.is_server_error() {
            tracing::error!(%code, error = %self, "request failed");
        }
        let body = ApiError {
            code: code.into(),
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}
