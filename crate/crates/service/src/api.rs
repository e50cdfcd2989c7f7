//! HTTP+JSON routes under `/v1`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use seqattn_core::synth::stream_seed;
use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::session::{Init, ServiceError, ServiceResult, Session, TurnRecord, DEFAULT_MAX_TURNS};
use crate::store::{now_secs, SessionStore, DEFAULT_TTL_SECS};

pub struct AppState {
    pub engine: Option<Arc<Engine>>,
    pub store: SessionStore,
    pub max_turns: usize,
    /// Sessions created without an explicit seed take the next stream of this.
    pub server_seed: u64,
    created: AtomicU64,
}

impl AppState {
    pub fn new(
        engine: Option<Arc<Engine>>,
        store: SessionStore,
        max_turns: usize,
        server_seed: u64,
    ) -> Self {
        Self {
            engine,
            store,
            max_turns,
            server_seed,
            created: AtomicU64::new(0),
        }
    }

    /// In-memory store, default turn limit, seed 0.
    pub fn with_engine(engine: Engine) -> Self {
        Self::new(
            Some(Arc::new(engine)),
            SessionStore::in_memory(DEFAULT_TTL_SECS),
            DEFAULT_MAX_TURNS,
            0,
        )
    }

    fn engine(&self) -> ServiceResult<Arc<Engine>> {
        self.engine.clone().ok_or(ServiceError::NotLoaded)
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status =
            StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (
            status,
            Json(serde_json::json!({ "error": self.to_string() })),
        )
            .into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateRequest {
    pub init: Init,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub max_turns: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateResponse {
    pub session_id: String,
    pub image_b64: String,
    pub seed: u64,
    pub max_turns: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub image_b64: String,
    pub words: Vec<String>,
    pub heatmaps_b64: Vec<String>,
    pub turn: usize,
    pub done: bool,
}

/// Short form returned by undo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub turn: usize,
    pub max_turns: usize,
    pub done: bool,
    pub image_b64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnView {
    pub turn: usize,
    pub text: Option<String>,
    pub image_b64: String,
    pub words: Vec<String>,
    pub heatmaps_b64: Vec<String>,
    pub noise_seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateView {
    pub turn_index: usize,
    pub h: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub seed: u64,
    pub max_turns: usize,
    pub done: bool,
    pub created_at: u64,
    pub last_active: u64,
    /// Turn 0 is the initial image.
    pub turns: Vec<TurnView>,
    pub state: StateView,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_hash: String,
}

fn turn_view(t: usize, r: &TurnRecord) -> TurnView {
    TurnView {
        turn: t,
        text: Some(r.text.clone()),
        image_b64: r.image_png.clone(),
        words: r.words.clone(),
        heatmaps_b64: r.heatmaps_png.clone(),
        noise_seed: Some(r.noise_seed),
    }
}

pub fn session_view(s: &Session) -> SessionView {
    let mut turns = vec![TurnView {
        turn: 0,
        text: None,
        image_b64: s.initial_png.clone(),
        words: Vec::new(),
        heatmaps_b64: Vec::new(),
        noise_seed: None,
    }];
    turns.extend(s.turns.iter().enumerate().map(|(i, r)| turn_view(i + 1, r)));
    SessionView {
        session_id: s.id.clone(),
        seed: s.seed,
        max_turns: s.max_turns,
        done: s.done(),
        created_at: s.created_at,
        last_active: s.last_active,
        turns,
        state: StateView {
            turn_index: s.turn_index(),
            h: s.state().to_vec(),
        },
    }
}

fn summary(s: &Session) -> SessionSummary {
    SessionSummary {
        session_id: s.id.clone(),
        turn: s.turn_index(),
        max_turns: s.max_turns,
        done: s.done(),
        image_b64: s.current_png().to_string(),
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ServiceResult<T> + Send + 'static,
) -> ServiceResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn health(State(app): State<Arc<AppState>>) -> ServiceResult<Json<Health>> {
    let engine = app.engine()?;
    Ok(Json(Health {
        status: "ok".into(),
        model_hash: engine.model_hash().to_string(),
    }))
}

async fn create(
    State(app): State<Arc<AppState>>,
    Json(req): Json<CreateRequest>,
) -> ServiceResult<Json<CreateResponse>> {
    let engine = app.engine()?;
    let seed = req.seed.unwrap_or_else(|| {
        stream_seed(app.server_seed, app.created.fetch_add(1, Ordering::Relaxed))
    });
    let max_turns = req.max_turns.unwrap_or(app.max_turns);
    if max_turns == 0 {
        return Err(ServiceError::BadInit("max_turns must be positive".into()));
    }
    let id = uuid::Uuid::new_v4().to_string();
    let session =
        blocking(move || Session::create(&engine, id, seed, &req.init, max_turns, now_secs()))
            .await?;
    let out = CreateResponse {
        session_id: session.id.clone(),
        image_b64: session.initial_png.clone(),
        seed,
        max_turns,
    };
    app.store.insert(session)?;
    Ok(Json(out))
}

async fn feedback(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<FeedbackRequest>,
) -> ServiceResult<Json<FeedbackResponse>> {
    let engine = app.engine()?;
    let handle = app.store.get(&id)?;
    let mut guard = handle.lock().await;
    guard.check_feedback(&engine, &req.text)?;
    let mut work = guard.clone();
    let work = blocking(move || {
        work.feedback(&engine, &req.text, now_secs())?;
        Ok(work)
    })
    .await?;
    app.store.persist(&work)?;
    *guard = work;
    let r = guard.turns.last().expect("turn just added");
    Ok(Json(FeedbackResponse {
        image_b64: r.image_png.clone(),
        words: r.words.clone(),
        heatmaps_b64: r.heatmaps_png.clone(),
        turn: guard.turn_index(),
        done: guard.done(),
    }))
}

async fn undo(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ServiceResult<Json<SessionSummary>> {
    let handle = app.store.get(&id)?;
    let mut guard = handle.lock().await;
    let mut work = guard.clone();
    work.undo(now_secs())?;
    app.store.persist(&work)?;
    *guard = work;
    Ok(Json(summary(&guard)))
}

async fn get_session(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ServiceResult<Json<SessionView>> {
    let handle = app.store.get(&id)?;
    let guard = handle.lock().await;
    Ok(Json(session_view(&guard)))
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/sessions", post(create))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/feedback", post(feedback))
        .route("/v1/sessions/{id}/undo", post(undo))
        .with_state(app)
}

/// Periodically evicts idle sessions until the process ends.
pub fn spawn_eviction(app: Arc<AppState>, every: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        loop {
            tick.tick().await;
            let gone = app.store.evict_idle(now_secs());
            if !gone.is_empty() {
                log::info!("evicted {} idle sessions", gone.len());
            }
        }
    })
}

/// Binds `addr` and serves until the future is dropped.
pub async fn serve(app: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    spawn_eviction(app.clone(), Duration::from_secs(600));
    axum::serve(listener, router(app)).await
}
