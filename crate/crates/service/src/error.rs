use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use flim_core::Error;
use serde_json::json;

/// An HTTP status with a JSON `{error, line?}` body.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub line: Option<usize>,
}

pub type ApiResult<T> = Result<T, ApiError>;

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            line: None,
        }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    pub fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

pub fn status_of(e: &Error) -> StatusCode {
    match e {
        Error::UnknownCase(_) | Error::UnknownFilter(_) => StatusCode::NOT_FOUND,
        Error::BudgetExhausted { .. }
        | Error::StaleScores
        | Error::NotReady(_)
        | Error::NoLabeledFilters => StatusCode::CONFLICT,
        Error::Io { .. } | Error::Json(_) | Error::StaleCache { .. } => {
            StatusCode::INTERNAL_SERVER_ERROR
        }
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let line = match &e {
            Error::Malformed { line, .. } => Some(*line),
            _ => None,
        };
        ApiError {
            status: status_of(&e),
            message: e.to_string(),
            line,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = match self.line {
            Some(line) => json!({ "error": self.message, "line": line }),
            None => json!({ "error": self.message }),
        };
        (self.status, Json(body)).into_response()
    }
}
