use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;

use crate::error::{ErrorCode, ServiceError};
use crate::model::*;
use crate::service::Service;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match self.code {
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::Exhausted => StatusCode::GONE,
            ErrorCode::StalePair => StatusCode::CONFLICT,
            ErrorCode::ValidationError => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(self)).into_response()
    }
}

type Shared = Arc<Service>;
type ApiResult<T> = Result<Json<T>, ServiceError>;

/// Runs service work off the async executor; matching can take seconds.
async fn blocking<T, F>(svc: Shared, f: F) -> ApiResult<T>
where
    T: Serialize + Send + 'static,
    F: FnOnce(&Service) -> crate::error::Result<T> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ServiceError::new(ErrorCode::Internal, e.to_string()))?
        .map(Json)
}

/// Maps malformed JSON bodies to `ValidationError` instead of axum's plain-text rejection.
fn body<T>(b: Result<Json<T>, axum::extract::rejection::JsonRejection>) -> Result<T, ServiceError> {
    b.map(|Json(v)| v).map_err(|e| ServiceError::validation(e.body_text()))
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn post_dataset(State(svc): State<Shared>, b: Result<Json<DatasetUpload>, axum::extract::rejection::JsonRejection>) -> ApiResult<DatasetInfo> {
    let up = body(b)?;
    blocking(svc, move |s| s.add_dataset(&up)).await
}

async fn post_session(State(svc): State<Shared>, b: Result<Json<CreateSession>, axum::extract::rejection::JsonRejection>) -> ApiResult<SessionInfo> {
    let req = body(b)?;
    blocking(svc, move |s| s.create_session(&req)).await
}

async fn get_session(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<SessionInfo> {
    blocking(svc, move |s| s.session(&id)).await
}

async fn get_next(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<PairProposal> {
    blocking(svc, move |s| s.next_pair(&id)).await
}

async fn post_annotation(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    b: Result<Json<AnnotationInput>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Ack> {
    let a = body(b)?;
    blocking(svc, move |s| s.submit(&id, &a)).await
}

async fn post_close(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<SessionInfo> {
    blocking(svc, move |s| s.close(&id)).await
}

async fn get_report(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<SessionReport> {
    blocking(svc, move |s| s.report(&id)).await
}

async fn fallback() -> ServiceError {
    ServiceError::new(ErrorCode::NotFound, "no such route")
}

pub fn router(svc: Shared) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/datasets", post(post_dataset))
        .route("/sessions", post(post_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/next", get(get_next))
        .route("/sessions/{id}/annotations", post(post_annotation))
        .route("/sessions/{id}/close", post(post_close))
        .route("/sessions/{id}/report", get(get_report))
        .fallback(fallback)
        .with_state(svc)
}

/// Serves on `addr` until Ctrl-C.
pub async fn serve(svc: Shared, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
