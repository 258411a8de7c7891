//! HTTP session service under `/v1`.
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | GET | `/v1/meta-actions` | | codes and names |
//! | POST | `/v1/sessions` | [`CreateSession`] | [`SessionState`] (201) |
//! | GET | `/v1/sessions/{id}` | | [`SessionState`] |
//! | DELETE | `/v1/sessions/{id}` | | 204 |
//! | GET | `/v1/sessions/{id}/scene` | | scene file |
//! | POST | `/v1/sessions/{id}/step` | optional [`StepRequest`] | `StepRecord` |
//! | PUT | `/v1/sessions/{id}/overrides/{agent}` | [`OverrideRequest`] | [`SessionState`] |
//! | DELETE | `/v1/sessions/{id}/overrides/{agent}` | | [`SessionState`] |
//! | POST | `/v1/sessions/{id}/reset` | | [`SessionState`] |
//!
//! Steps and override changes take the session lock without waiting; a
//! second request while one is in flight gets 409.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use metaction_core::kinematics::AgentState;
use metaction_core::labeler::MetaAction;
use metaction_core::policy::Policy;
use metaction_core::scene::{AgentKind, Extents, SceneError};
use metaction_core::sim::{create_session, RolloutSession, SimConfig, SimError, StepRecord};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use crate::scene_io::{FormatError, SceneFile};

type Shared = Arc<Mutex<RolloutSession>>;

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    policy: Arc<Policy>,
    defaults: SimConfig,
    default_seed: u64,
    sessions: RwLock<HashMap<String, Shared>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(policy: Arc<Policy>, defaults: SimConfig, default_seed: u64) -> Self {
        Self {
            inner: Arc::new(Inner {
                policy,
                defaults,
                default_seed,
                sessions: RwLock::new(HashMap::new()),
                next_id: AtomicU64::new(1),
            }),
        }
    }

    fn session(&self, id: &str) -> Result<Shared, ApiError> {
        self.inner
            .sessions
            .read()
            .expect("session registry poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn busy() -> Self {
        Self::new(StatusCode::CONFLICT, "another request is in flight for this session")
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

impl From<SimError> for ApiError {
    fn from(e: SimError) -> Self {
        let status = match &e {
            SimError::HorizonReached(_) | SimError::PastOverride { .. } => StatusCode::CONFLICT,
            SimError::Scene(SceneError::UnknownAgent(_)) => StatusCode::NOT_FOUND,
            SimError::Policy { .. } | SimError::Kinematics { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.to_string())
    }
}

impl From<FormatError> for ApiError {
    fn from(e: FormatError) -> Self {
        Self::new(StatusCode::BAD_REQUEST, e.to_string())
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let text = std::str::from_utf8(body).map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "body is not UTF-8"))?;
    Ok(crate::scene_io::from_json(text, "body")?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub scene: SceneFile,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub foundation_agents: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRequest {
    /// Persistent overrides applied before this step, by agent id.
    #[serde(default)]
    pub overrides: BTreeMap<u32, MetaAction>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverrideRequest {
    pub meta_action: MetaAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentView {
    pub id: u32,
    pub kind: AgentKind,
    pub extents: Extents,
    pub states: Vec<AgentState>,
    pub meta_actions: Vec<MetaAction>,
    #[serde(rename = "override")]
    pub active_override: Option<MetaAction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub current_frame: usize,
    pub horizon: usize,
    pub warmup: usize,
    pub seed: u64,
    pub agents: Vec<AgentView>,
    pub last_record: Option<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaActionInfo {
    pub index: usize,
    pub code: String,
    pub name: String,
}

fn view(id: &str, s: &RolloutSession) -> SessionState {
    let h = s.states().first().map_or(0, Vec::len);
    SessionState {
        session_id: id.to_string(),
        current_frame: s.current_frame(),
        horizon: s.horizon(),
        warmup: s.config().warmup,
        seed: s.seed(),
        agents: s
            .scene()
            .agents
            .iter()
            .zip(s.states())
            .zip(s.meta_history())
            .map(|((a, states), meta)| AgentView {
                id: a.id,
                kind: a.kind,
                extents: a.extents,
                states: states.clone(),
                // the entry for the frame not yet stepped is a placeholder
                meta_actions: meta[..h - 1].to_vec(),
                active_override: s.pending_override(a.id),
            })
            .collect(),
        last_record: s.last_record().cloned(),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/meta-actions", get(meta_actions))
        .route("/v1/sessions", post(create))
        .route("/v1/sessions/{id}", get(get_state).delete(delete_session))
        .route("/v1/sessions/{id}/scene", get(get_scene))
        .route("/v1/sessions/{id}/step", post(step))
        .route("/v1/sessions/{id}/overrides/{agent}", put(set_override).delete(release_override))
        .route("/v1/sessions/{id}/reset", post(reset))
        .with_state(state)
}

async fn meta_actions() -> Json<Vec<MetaActionInfo>> {
    Json(
        MetaAction::ALL
            .iter()
            .map(|m| MetaActionInfo {
                index: m.index(),
                code: m.code().to_string(),
                name: m.name().to_string(),
            })
            .collect(),
    )
}

async fn create(State(app): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<SessionState>), ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let scene = req.scene.into_scene("scene")?;
    let mut cfg = app.inner.defaults.clone();
    if let Some(h) = req.horizon {
        cfg.horizon = h;
    }
    if let Some(t) = req.temperature {
        cfg.temperature = t;
    }
    if let Some(f) = req.foundation_agents {
        cfg.foundation_agents = f;
    }
    let seed = req.seed.unwrap_or(app.inner.default_seed);
    let policy = app.inner.policy.clone();
    let session = tokio::task::spawn_blocking(move || create_session(&scene, policy, cfg, seed))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let id = format!("s{}", app.inner.next_id.fetch_add(1, Ordering::Relaxed));
    let state = view(&id, &session);
    app.inner
        .sessions
        .write()
        .expect("session registry poisoned")
        .insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(state)))
}

async fn get_state(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionState>, ApiError> {
    let s = app.session(&id)?;
    let guard = s.lock().await;
    Ok(Json(view(&id, &guard)))
}

async fn get_scene(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SceneFile>, ApiError> {
    let s = app.session(&id)?;
    let guard = s.lock().await;
    Ok(Json(SceneFile::from_scene(guard.scene())))
}

async fn delete_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    let removed = app.inner.sessions.write().expect("session registry poisoned").remove(&id);
    match removed {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}"))),
    }
}

async fn step(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<StepRecord>, ApiError> {
    let req: StepRequest = if body.iter().all(u8::is_ascii_whitespace) {
        StepRequest::default()
    } else {
        parse_body(&body)?
    };
    let s = app.session(&id)?;
    let mut guard = s.try_lock_owned().map_err(|_| ApiError::busy())?;
    let overrides: Vec<(u32, MetaAction)> = req.overrides.into_iter().collect();
    let record = tokio::task::spawn_blocking(move || guard.step_with(&overrides))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(record))
}

async fn set_override(
    State(app): State<AppState>,
    Path((id, agent)): Path<(String, u32)>,
    body: Bytes,
) -> Result<Json<SessionState>, ApiError> {
    let req: OverrideRequest = parse_body(&body)?;
    let s = app.session(&id)?;
    let mut guard = s.try_lock().map_err(|_| ApiError::busy())?;
    guard.set_override(agent, req.meta_action)?;
    Ok(Json(view(&id, &guard)))
}

async fn release_override(State(app): State<AppState>, Path((id, agent)): Path<(String, u32)>) -> Result<Json<SessionState>, ApiError> {
    let s = app.session(&id)?;
    let mut guard = s.try_lock().map_err(|_| ApiError::busy())?;
    guard.release_override(agent)?;
    Ok(Json(view(&id, &guard)))
}

async fn reset(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionState>, ApiError> {
    let s = app.session(&id)?;
    let mut guard = s.try_lock_owned().map_err(|_| ApiError::busy())?;
    let state = tokio::task::spawn_blocking(move || guard.reset().map(|_| view(&id, &guard)))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(state))
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
