//! The JSON error body shared by every route: `{stage, message, retryAfter?}`.

use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use chrono::TimeDelta;
use jobwatch_core::analytics::AnalyticsError;
use jobwatch_core::gateway::{GatewayError, Stage};
use jobwatch_core::store::StoreError;
use serde::Serialize;

use crate::auth::AuthError;

/// Where a request failed. The gateway's stages pass through unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ErrorStage {
    Auth,
    Request,
    Gateway,
    Render,
    Transport,
    Parse,
    Store,
    Analytics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ErrorBody {
    pub stage: ErrorStage,
    pub message: String,
    /// Seconds until a retry can succeed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retry_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub stage: ErrorStage,
    pub message: String,
    pub retry_after: Option<TimeDelta>,
}

impl ApiError {
    pub fn new(status: StatusCode, stage: ErrorStage, message: impl Into<String>) -> Self {
        Self {
            status,
            stage,
            message: message.into(),
            retry_after: None,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, ErrorStage::Request, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, ErrorStage::Request, message)
    }

    pub fn forbidden(message: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, ErrorStage::Auth, message)
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            stage: self.stage,
            message: self.message.clone(),
            retry_after: self.retry_after.map(|d| d.num_milliseconds() as f64 / 1000.0),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut response = (self.status, Json(self.body())).into_response();
        if let Some(wait) = self.retry_after {
            let secs = (wait.num_milliseconds().max(0) as u64).div_ceil(1000);
            response
                .headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        response
    }
}

impl From<AuthError> for ApiError {
    fn from(e: AuthError) -> Self {
        let status = match e {
            AuthError::ProviderUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::UNAUTHORIZED,
        };
        ApiError::new(status, ErrorStage::Auth, e.to_string())
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Throttled { retry_after } => ApiError {
                retry_after: Some(retry_after),
                ..ApiError::new(StatusCode::TOO_MANY_REQUESTS, ErrorStage::Gateway, e.to_string())
            },
            GatewayError::NoCredential(_) => ApiError::forbidden(e.to_string()),
            GatewayError::Dispatch(d) => {
                let (status, stage) = match d.stage {
                    Stage::Render => (StatusCode::BAD_REQUEST, ErrorStage::Render),
                    Stage::Transport => (StatusCode::BAD_GATEWAY, ErrorStage::Transport),
                    Stage::Parse => (StatusCode::BAD_GATEWAY, ErrorStage::Parse),
                    Stage::Store => (StatusCode::INTERNAL_SERVER_ERROR, ErrorStage::Store),
                };
                ApiError::new(status, stage, d.message)
            }
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => ApiError::not_found(e.to_string()),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorStage::Store, e.to_string()),
        }
    }
}

impl From<AnalyticsError> for ApiError {
    fn from(e: AnalyticsError) -> Self {
        let status = match e {
            AnalyticsError::UnfittedModel { .. } => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, ErrorStage::Analytics, e.to_string())
    }
}
