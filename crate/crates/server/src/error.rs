use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use planout::namespace::NamespaceError;
use planout::overrides::OverrideError;
use planout::simulator::SimulationError;
use planout::store::AssignError;
use planout::Diagnostic;
use serde::Serialize;

/// Error body: `{"error": kind, "message": ..., "diagnostics": [...]}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Serialize)]
struct Body<'a> {
    error: &'a str,
    message: &'a str,
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    diagnostics: &'a [Diagnostic],
}

impl ApiError {
    pub fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind,
            message: message.into(),
            diagnostics: Vec::new(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn invalid_script(diagnostics: Vec<Diagnostic>) -> Self {
        let first = diagnostics
            .iter()
            .find(|d| d.is_error())
            .map(|d| d.to_string())
            .unwrap_or_default();
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            kind: "invalid_script",
            message: first,
            diagnostics,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Body {
            error: self.kind,
            message: &self.message,
            diagnostics: &self.diagnostics,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<NamespaceError> for ApiError {
    fn from(e: NamespaceError) -> Self {
        use NamespaceError as E;
        let (status, kind) = match &e {
            E::InvalidScript(d) => return ApiError::invalid_script(d.clone()),
            E::UnknownNamespace(_) => (StatusCode::NOT_FOUND, "unknown_namespace"),
            E::UnknownExperiment(_) => (StatusCode::NOT_FOUND, "unknown_experiment"),
            E::VersionConflict { .. } => (StatusCode::CONFLICT, "version_conflict"),
            E::DuplicateNamespace(_) => (StatusCode::CONFLICT, "duplicate_namespace"),
            E::DuplicateExperiment(_) => (StatusCode::CONFLICT, "duplicate_experiment"),
            E::InsufficientSegments { .. } => (StatusCode::CONFLICT, "insufficient_segments"),
            E::InvalidName { .. } | E::ZeroSegments | E::ZeroAllocation => {
                (StatusCode::BAD_REQUEST, "bad_request")
            }
            E::Io(_) | E::Corrupt { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "store"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

impl From<AssignError> for ApiError {
    fn from(e: AssignError) -> Self {
        match e {
            AssignError::UnknownNamespace(_) => {
                ApiError::new(StatusCode::NOT_FOUND, "unknown_namespace", e.to_string())
            }
            AssignError::Eval(inner) => ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "evaluation",
                inner.to_string(),
            ),
        }
    }
}

impl From<OverrideError> for ApiError {
    fn from(e: OverrideError) -> Self {
        ApiError::bad_request(e.to_string())
    }
}

impl From<SimulationError> for ApiError {
    fn from(e: SimulationError) -> Self {
        // A draft that fails on its own sample units is a problem with the
        // script, not the server.
        let status = match e {
            SimulationError::Pool(_) => StatusCode::INTERNAL_SERVER_ERROR,
            SimulationError::Evaluation { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, "simulation", e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}
