//! HTTP routes. Every JSON error body is `{"error": {"code", "message"}}`.

use std::convert::Infallible;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::future::BoxFuture;
use futures::Stream;
use polyrag_core::config::SourceSpec;
use polyrag_core::pipeline::{Engine, TurnError, TurnEvent};
use polyrag_core::types::SourceKind;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, RwLock};

use crate::protocol::{ErrorCode, ServiceEvent, TraceSummary};
use crate::session::{SessionStore, SessionSummary, SessionView};

/// Rebuilds the engine for `POST /v1/reindex`.
pub type EngineFactory = Arc<dyn Fn() -> BoxFuture<'static, Result<Engine, String>> + Send + Sync>;

pub struct AppState {
    engine: RwLock<Arc<Engine>>,
    sessions: SessionStore,
    /// Reject unknown session ids instead of creating them.
    strict_sessions: bool,
    factory: Option<EngineFactory>,
}

impl AppState {
    pub fn new(engine: Engine, sessions: SessionStore) -> Self {
        AppState { engine: RwLock::new(Arc::new(engine)), sessions, strict_sessions: false, factory: None }
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict_sessions = strict;
        self
    }

    pub fn with_factory(mut self, factory: EngineFactory) -> Self {
        self.factory = Some(factory);
        self
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.sessions
    }

    pub async fn engine(&self) -> Arc<Engine> {
        self.engine.read().await.clone()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/chat", post(chat))
        .route("/v1/sessions", get(list_sessions).post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sources", get(sources))
        .route("/v1/reindex", post(reindex))
        .route("/v1/health", get(health))
        .with_state(state)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    pub message: String,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: ErrorDetail,
}

#[derive(Debug, Serialize)]
struct ErrorDetail {
    code: &'static str,
    message: String,
}

fn error_response(status: StatusCode, code: &'static str, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: ErrorDetail { code, message: message.into() } })).into_response()
}

/// Runs one turn and produces its event stream. The turn runs in its own
/// task, so a client hanging up does not abandon a half-finished turn.
pub fn chat_events(state: Arc<AppState>, req: ChatRequest) -> mpsc::UnboundedReceiver<ServiceEvent> {
    let (tx, rx) = mpsc::unbounded_channel();
    tokio::spawn(async move {
        let session = match &req.session_id {
            None => match state.sessions.create(None).await {
                Ok(s) => s,
                Err(e) => {
                    let _ = tx.send(ServiceEvent::Error { code: ErrorCode::InvalidRequest, message: e.to_string() });
                    let _ = tx.send(ServiceEvent::Done { session_id: String::new(), trace: None });
                    return;
                }
            },
            Some(id) => match state.sessions.get(id).await {
                Some(s) => s,
                None if state.strict_sessions => {
                    let message = format!("session {id} not found");
                    let _ = tx.send(ServiceEvent::Error { code: ErrorCode::SessionNotFound, message });
                    let _ = tx.send(ServiceEvent::Done { session_id: id.clone(), trace: None });
                    return;
                }
                None => state.sessions.get_or_create(id).await,
            },
        };

        let engine = state.engine().await;
        let mut guard = session.lock().await;
        let session_id = guard.session_id.clone();
        let before = guard.history.len();

        let (turn_tx, mut turn_rx) = mpsc::unbounded_channel::<TurnEvent>();
        let forward_tx = tx.clone();
        let forward = tokio::spawn(async move {
            while let Some(e) = turn_rx.recv().await {
                let _ = forward_tx.send(ServiceEvent::from(e));
            }
        });
        let result = engine.run_turn(&mut guard.history, &req.message, Some(&turn_tx)).await;
        drop(turn_tx);
        let _ = forward.await;

        match result {
            Ok(outcome) => {
                guard.updated_ms = state.sessions.now_ms();
                if let Err(e) = state.sessions.persist_from(&guard, before) {
                    tracing::warn!("{e}");
                }
                drop(guard);
                let trace = Some(TraceSummary::from(&outcome.trace));
                let _ = tx.send(ServiceEvent::Done { session_id, trace });
            }
            Err(e) => {
                drop(guard);
                let code = match e {
                    TurnError::EmptyMessage => ErrorCode::EmptyMessage,
                    TurnError::TurnFailed { .. } => ErrorCode::TurnFailed,
                };
                let _ = tx.send(ServiceEvent::Error { code, message: e.to_string() });
                let _ = tx.send(ServiceEvent::Done { session_id, trace: None });
            }
        }
    });
    rx
}

fn event_stream(rx: mpsc::UnboundedReceiver<ServiceEvent>) -> impl Stream<Item = Result<Event, Infallible>> {
    futures::stream::unfold(rx, |mut rx| async move {
        let e = rx.recv().await?;
        let event = Event::default().event(e.name()).data(e.data().to_string());
        Some((Ok(event), rx))
    })
}

async fn chat(State(state): State<Arc<AppState>>, body: Result<Json<ChatRequest>, axum::extract::rejection::JsonRejection>) -> Response {
    let req = match body {
        Ok(Json(r)) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, "invalid_request", e.body_text()),
    };
    Sse::new(event_stream(chat_events(state, req))).keep_alive(KeepAlive::default()).into_response()
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<Vec<SessionSummary>> {
    Json(state.sessions.list().await)
}

#[derive(Debug, Default, Deserialize)]
struct CreateSession {
    #[serde(default)]
    session_id: Option<String>,
}

async fn create_session(State(state): State<Arc<AppState>>, body: Option<Json<CreateSession>>) -> Response {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    match state.sessions.create(req.session_id).await {
        Ok(h) => (StatusCode::CREATED, Json(h.lock().await.view())).into_response(),
        Err(e) => error_response(StatusCode::CONFLICT, "session_exists", e.to_string()),
    }
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    match state.sessions.get(&id).await {
        Some(h) => {
            let view: SessionView = h.lock().await.view();
            Json(view).into_response()
        }
        None => error_response(StatusCode::NOT_FOUND, "session_not_found", format!("session {id} not found")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub name: String,
    pub kind: SourceKind,
    /// Present for vector-store sources only.
    pub chunk_count: Option<usize>,
    pub agents: Vec<String>,
}

pub fn source_list(engine: &Engine) -> Vec<SourceInfo> {
    let cfg = engine.config();
    cfg.knowledge_sources
        .iter()
        .map(|s| SourceInfo {
            name: s.name.clone(),
            kind: s.kind(),
            chunk_count: match s.spec {
                SourceSpec::Vdb { .. } => engine.stores().get(&s.name).map(|st| st.chunks().len()),
                _ => None,
            },
            agents: cfg.agents.iter().filter(|a| a.sources.contains(&s.name)).map(|a| a.id.clone()).collect(),
        })
        .collect()
}

async fn sources(State(state): State<Arc<AppState>>) -> Json<Vec<SourceInfo>> {
    Json(source_list(state.engine().await.as_ref()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReindexResponse {
    pub sources: Vec<SourceInfo>,
    pub elapsed_ms: u64,
}

async fn reindex(State(state): State<Arc<AppState>>) -> Response {
    let Some(factory) = state.factory.clone() else {
        return error_response(StatusCode::NOT_IMPLEMENTED, "reindex_unavailable", "this server was started without a config file");
    };
    let started = Instant::now();
    match factory().await {
        Ok(engine) => {
            let sources = source_list(&engine);
            // Turns already running keep the engine they started with.
            *state.engine.write().await = Arc::new(engine);
            Json(ReindexResponse { sources, elapsed_ms: started.elapsed().as_millis() as u64 }).into_response()
        }
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "reindex_failed", e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub agents: Vec<String>,
    pub sessions: usize,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    let engine = state.engine().await;
    Json(Health { status: "ok".into(), agents: engine.agent_ids(), sessions: state.sessions.len().await })
}
