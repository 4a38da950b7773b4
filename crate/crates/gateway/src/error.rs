use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

pub const CORRELATION_HEADER: &str = "x-correlation-id";

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_id: Option<String>,
}

/// Attached to error responses so the audit layer knows who failed and
/// whether the failure has already been recorded.
#[derive(Debug, Clone)]
pub(crate) struct ErrorInfo {
    pub principal: String,
    pub code: String,
    pub audited: bool,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
    pub principal: String,
    /// Set when the platform already emitted the audit event for this failure.
    pub audited: bool,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, reason: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code: code.to_string(),
                reason: reason.into(),
                correlation_id: None,
            },
            principal: "anonymous".to_string(),
            audited: false,
        }
    }

    pub fn bad_request(reason: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "Malformed", reason)
    }

    pub fn by(mut self, principal: &str) -> Self {
        self.principal = principal.to_string();
        self
    }

    pub fn audited(mut self) -> Self {
        self.audited = true;
        self
    }

    pub fn with_correlation(mut self, correlation_id: &str) -> Self {
        self.body.correlation_id = Some(correlation_id.to_string());
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let correlation = self.body.correlation_id.clone();
        let mut response = (self.status, Json(self.body.clone())).into_response();
        if let Some(value) = correlation.and_then(|c| HeaderValue::from_str(&c).ok()) {
            response.headers_mut().insert(CORRELATION_HEADER, value);
        }
        response.extensions_mut().insert(ErrorInfo {
            principal: self.principal,
            code: self.body.code,
            audited: self.audited,
        });
        response
    }
}

/// HTTP status for a workflow or store error code.
pub fn status_for(code: &str) -> StatusCode {
    match code {
        "InvalidCredentials" | "ExpiredCredentials" | "UnknownPrincipal" | "MissingCredentials" => {
            StatusCode::UNAUTHORIZED
        }
        "ScopeForbidden" | "RouteForbidden" | "Unauthorized" | "AccountDisabled" => StatusCode::FORBIDDEN,
        "UnknownCourse" | "UnknownItem" | "NotFound" => StatusCode::NOT_FOUND,
        "Malformed" | "InvalidThreshold" | "UnsupportedScope" | "ValidationFailure" | "InvalidKeyPrefix"
        | "MalformedHeader" => StatusCode::BAD_REQUEST,
        "DuplicatePrincipal" | "DuplicateCorrelation" => StatusCode::CONFLICT,
        "Timeout" => StatusCode::GATEWAY_TIMEOUT,
        _ => StatusCode::BAD_GATEWAY,
    }
}

/// Code used when a response failed before any handler produced a body.
pub(crate) fn code_for_status(status: StatusCode) -> &'static str {
    match status {
        StatusCode::NOT_FOUND => "NotFound",
        StatusCode::METHOD_NOT_ALLOWED => "MethodNotAllowed",
        StatusCode::UNAUTHORIZED => "MissingCredentials",
        StatusCode::PAYLOAD_TOO_LARGE => "PayloadTooLarge",
        StatusCode::UNSUPPORTED_MEDIA_TYPE => "UnsupportedMediaType",
        s if s.is_client_error() => "Malformed",
        _ => "Internal",
    }
}
