//! HTTP API over the session manager. Every route lives under `/v1`; turn
//! handling blocks on the model, so it runs on the blocking pool.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use counsel_core::graph::{RuntimeError, TranscriptEntry};
use counsel_core::session::{SessionError, SessionManager, StoreError};

pub const API_VERSION: &str = "v1";

#[derive(Clone)]
pub struct AppState {
    pub manager: Arc<SessionManager>,
    /// When set, every `/v1` request needs `Authorization: Bearer <token>`.
    pub token: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        use SessionError as E;
        let (status, code) = match &e {
            E::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            E::UnknownSpec(_) => (StatusCode::BAD_REQUEST, "unknown_spec"),
            E::UnknownKb(_) => (StatusCode::BAD_REQUEST, "unknown_kb"),
            E::AlreadyExists(_) => (StatusCode::CONFLICT, "already_exists"),
            E::Busy(_) => (StatusCode::CONFLICT, "busy"),
            E::NotActive { .. } | E::Runtime(RuntimeError::SessionNotActive(_)) => {
                (StatusCode::CONFLICT, "session_not_active")
            }
            E::NotFinalizable { .. } => (StatusCode::CONFLICT, "not_finalizable"),
            E::NotFinalized(_) => (StatusCode::CONFLICT, "not_finalized"),
            E::InvalidMessage(_) => (StatusCode::BAD_REQUEST, "invalid_message"),
            E::Store(StoreError::InvalidId(_)) => (StatusCode::BAD_REQUEST, "invalid_session_id"),
            E::Store(_) => (StatusCode::SERVICE_UNAVAILABLE, "storage"),
            E::Runtime(_) | E::Corrupt { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub spec_id: Option<String>,
    pub kb_id: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostMessage {
    pub text: String,
}

#[derive(Debug, Serialize)]
pub struct Transcript {
    pub session_id: String,
    pub entries: Vec<TranscriptEntry>,
}

fn parse<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    parse_required(body)
}

fn parse_required<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_body", e.to_string()))
}

/// Runs manager work off the async executor.
async fn blocking<T, F>(state: &AppState, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&SessionManager) -> Result<T, SessionError> + Send + 'static,
{
    let manager = state.manager.clone();
    tokio::task::spawn_blocking(move || f(&manager))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map(Json)
        .map_err(ApiError::from)
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    let rt = state.manager.runtime();
    Json(json!({
        "status": "ok",
        "api_version": API_VERSION,
        "spec_id": state.manager.spec().medication_id,
        "spec_version": state.manager.spec().version,
        "kb_id": rt.kb().id,
        "backend": rt.backend_name(),
    }))
}

async fn create_session(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<(StatusCode, Json<impl Serialize>), ApiError> {
    let req: CreateSession = parse(&body)?;
    let created = blocking(&state, move |m| {
        m.create_for(req.spec_id.as_deref(), req.kb_id.as_deref())
    })
    .await?;
    Ok((StatusCode::CREATED, created))
}

async fn post_message(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<impl Serialize> {
    let req: PostMessage = parse_required(&body)?;
    blocking(&state, move |m| m.post_message(&id, &req.text)).await
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<impl Serialize> {
    blocking(&state, move |m| m.view(&id)).await
}

async fn get_transcript(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Transcript> {
    blocking(&state, move |m| {
        m.transcript(&id).map(|entries| Transcript {
            session_id: id,
            entries,
        })
    })
    .await
}

async fn finalize(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<impl Serialize> {
    blocking(&state, move |m| m.finalize(&id)).await
}

async fn summary(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<impl Serialize> {
    blocking(&state, move |m| m.summary(&id)).await
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let given = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ApiError::new(
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                "missing or wrong bearer token",
            )
            .into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/transcript", get(get_transcript))
        .route("/sessions/{id}/finalize", post(finalize))
        .route("/sessions/{id}/summary", get(summary))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/health", get(health))
        .nest("/v1", api)
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "no_route", "no such route") })
        .with_state(state)
}

/// Periodically marks idle sessions abandoned.
pub fn spawn_sweeper(manager: Arc<SessionManager>, every: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        tick.tick().await;
        loop {
            tick.tick().await;
            let m = manager.clone();
            let _ = tokio::task::spawn_blocking(move || m.sweep()).await;
        }
    })
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let sweeper = spawn_sweeper(state.manager.clone(), Duration::from_secs(60));
    let r = axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await;
    sweeper.abort();
    r
}
