use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

use retro_core::engine::{PredictError, QueryError};
use retro_core::explain::ExplainError;
use retro_core::molgraph::SmilesError;
use retro_core::planner::PlanError;

/// Error body: `{"error": code, "message": text, "offset": n?}`.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorBody {
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
    /// Seconds for a `Retry-After` header.
    pub retry_after: Option<u64>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                error: code,
                message: message.into(),
                offset: None,
            },
            retry_after: None,
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_input", message)
    }

    pub fn smiles(e: &SmilesError) -> Self {
        let mut err = Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_smiles", e.to_string());
        err.body.offset = Some(e.offset());
        err
    }

    pub fn unknown_session() -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_session", "no such session, or it expired")
    }

    pub fn timeout() -> Self {
        let mut err = Self::new(StatusCode::SERVICE_UNAVAILABLE, "timeout", "request exceeded the configured timeout");
        err.retry_after = Some(1);
        err
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut resp = (self.status, Json(self.body)).into_response();
        if let Some(s) = self.retry_after {
            resp.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(s));
        }
        resp
    }
}

impl From<PredictError> for ApiError {
    fn from(e: PredictError) -> Self {
        match e {
            PredictError::EmptyBeam => Self::new(StatusCode::CONFLICT, "empty_beam", e.to_string()),
            PredictError::Beam => Self::invalid(e.to_string()),
            PredictError::Numerics(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "numerics", e.to_string()),
        }
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        match e {
            QueryError::NotScorable(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "not_scorable", e.to_string()),
            QueryError::Numerics(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "numerics", e.to_string()),
        }
    }
}

impl From<PlanError> for ApiError {
    fn from(e: PlanError) -> Self {
        match &e {
            PlanError::InvalidTarget(s) => Self::smiles(s),
            PlanError::AlreadyExpanded(_) => Self::new(StatusCode::CONFLICT, "already_expanded", e.to_string()),
            PlanError::NotOpen(_) => Self::new(StatusCode::CONFLICT, "not_open", e.to_string()),
            PlanError::UnknownNode(_) => Self::new(StatusCode::NOT_FOUND, "unknown_node", e.to_string()),
            PlanError::Limits(_) => Self::invalid(e.to_string()),
            PlanError::NoRouteFound(_) => Self::new(StatusCode::CONFLICT, "no_route", e.to_string()),
            PlanError::Numerics(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "numerics", e.to_string()),
        }
    }
}

impl From<ExplainError> for ApiError {
    fn from(e: ExplainError) -> Self {
        match &e {
            ExplainError::ModeError => Self::new(StatusCode::CONFLICT, "mode_error", e.to_string()),
            ExplainError::Numerics => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "numerics", e.to_string()),
            ExplainError::DegenerateLoss(_) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "degenerate_loss", e.to_string())
            }
            ExplainError::NoConnectionLabels | ExplainError::Sample(_) => Self::invalid(e.to_string()),
        }
    }
}
