//! JSON API over [`Sessions`] plus static files for the browser client.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::session::{Answer, Explain, ServiceError, Session, Sessions};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Concluded(_) => StatusCode::CONFLICT,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct CreateRequest {
    pub snippet: String,
    #[serde(default)]
    pub question: String,
    #[serde(default)]
    pub scenario: String,
}

#[derive(Debug, Deserialize)]
pub struct AnswerRequest {
    pub answer: String,
}

type Shared = Arc<Sessions>;

/// Model turns are CPU-bound and run off the async workers.
async fn blocking<T, F>(f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Io(std::io::Error::other(e)))?
}

async fn create(State(s): State<Shared>, Json(req): Json<CreateRequest>) -> Result<(StatusCode, Json<Session>), ServiceError> {
    let session = blocking(move || s.create(&req.snippet, &req.question, &req.scenario)).await?;
    Ok((StatusCode::CREATED, Json(session)))
}

async fn answer(
    State(s): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<AnswerRequest>,
) -> Result<Json<Session>, ServiceError> {
    let a: Answer = req.answer.parse()?;
    Ok(Json(blocking(move || s.answer(&id, a)).await?))
}

async fn show(State(s): State<Shared>, Path(id): Path<String>) -> Result<Json<Session>, ServiceError> {
    Ok(Json(s.get(&id)?))
}

async fn explain(State(s): State<Shared>, Path(id): Path<String>) -> Result<Json<Explain>, ServiceError> {
    Ok(Json(s.explain(&id)?))
}

/// API routes, with `static_dir` served for every other path when given.
pub fn router(sessions: Shared, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(show))
        .route("/sessions/{id}/answer", post(answer))
        .route("/sessions/{id}/explain", get(explain))
        .with_state(sessions);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(addr: SocketAddr, sessions: Shared, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(sessions, static_dir)).await
}
