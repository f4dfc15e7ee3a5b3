use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::{json, Value};

/// An error response: status plus a JSON body with an `error` message and
/// optional extra fields.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub extra: Option<(&'static str, Value)>,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            extra: None,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    pub fn unknown_chars(chars: Vec<char>) -> Self {
        let list: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        Self {
            status: StatusCode::BAD_REQUEST,
            message: format!("unknown characters: {}", list.join(" ")),
            extra: Some(("unknown", json!(list))),
        }
    }
}

impl From<backpack::Error> for ApiError {
    fn from(e: backpack::Error) -> Self {
        use backpack::Error as E;
        let status = match &e {
            E::ContextLength { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            E::Index { .. }
            | E::Contract(_)
            | E::Config(_)
            | E::Vocab(_)
            | E::Eval(_)
            | E::Intervention(_)
            | E::Parse { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some((k, v)) = self.extra {
            body[k] = v;
        }
        (self.status, Json(body)).into_response()
    }
}
