//! HTTP service: the session API plus the `/draw` protocol backed by the toy drawer.
//!
//! ```text
//! POST /session                          create; body = config overrides       → 201
//! POST /session/{id}/turn                {prompt, mode, edit_target?, edit_region?}
//! GET  /session/{id}/state               committed session and database
//! GET  /session/{id}/image/{k}           PNG; ?revision=n for an earlier one
//! GET  /session/{id}/layout/{k}          final layout of turn k
//! POST /session/{id}/layout/{k}/override replacement layout; redraws turn k
//! POST /draw                             DrawRequest → DrawResponse
//! GET  /capabilities
//! ```
//!
//! Malformed bodies give 400, unknown sessions and turns 404, and a request
//! that needs a session while one of its turns is running gives 409.

use std::collections::HashMap;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex};

use autostudio_core::drawer::{DrawError, DrawRequest, Drawer, ToyDrawer};
use autostudio_core::engine::{Engine, EngineConfig, EngineError, Session, TurnRecord, TurnRequest, SESSION_FILE};
use autostudio_core::layout::LayoutDocument;
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{Mutex as AsyncMutex, OwnedMutexGuard};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::EmptyPrompt
            | EngineError::MissingPriorTurn
            | EngineError::EditTarget(_)
            | EngineError::InvalidOverride(_)
            | EngineError::ScriptParse(_)
            | EngineError::Config(_) => StatusCode::BAD_REQUEST,
            EngineError::Draw(d) => return d.into(),
            EngineError::UnknownTurn(_) => StatusCode::NOT_FOUND,
            EngineError::SessionFull(_) => StatusCode::CONFLICT,
            EngineError::Agent(_) => StatusCode::BAD_GATEWAY,
            EngineError::Layout(_) => StatusCode::UNPROCESSABLE_ENTITY,
            EngineError::Registry(_) | EngineError::Corrupt(_) | EngineError::Io { .. } => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        Self::new(status, e.to_string())
    }
}

impl From<&DrawError> for ApiError {
    fn from(e: &DrawError) -> Self {
        let status = match e {
            DrawError::SchemaViolation(_) | DrawError::MissingPriorTurn => StatusCode::BAD_REQUEST,
            DrawError::BridgeFailure(_) => StatusCode::BAD_GATEWAY,
            DrawError::Shape(_) | DrawError::Image(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, format!("draw failure: {e}"))
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

/// A live session and the engine it runs on. The mutex is held for the whole
/// of a turn or an override.
pub struct SessionSlot {
    pub engine: Engine,
    pub session: Arc<AsyncMutex<Session>>,
}

pub struct AppState {
    /// Parent directory of the session directories.
    pub root: PathBuf,
    /// Config that `POST /session` overrides are applied to.
    pub base: EngineConfig,
    /// Serves `/draw` and `/capabilities`.
    pub drawer: Arc<dyn Drawer>,
    sessions: Mutex<HashMap<String, Arc<SessionSlot>>>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Overwrites `base` with every key of `patch`, descending into objects.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

impl AppState {
    pub fn new(root: PathBuf, base: EngineConfig) -> Self {
        let drawer = Arc::new(ToyDrawer::new(base.model_seed));
        Self { root, base, drawer, sessions: Mutex::new(HashMap::new()) }
    }

    fn session_dir(&self, id: &str) -> Result<PathBuf, ApiError> {
        if !valid_id(id) {
            return Err(ApiError::not_found(format!("no session {id:?}")));
        }
        Ok(self.root.join(id))
    }

    /// The base config with `overrides` applied. The API key is never taken from a request.
    pub fn config_with(&self, overrides: &Value) -> Result<EngineConfig, ApiError> {
        if !overrides.is_object() {
            return Err(ApiError::bad_request("config overrides must be a JSON object"));
        }
        let mut v = serde_json::to_value(&self.base).expect("config serializes");
        merge(&mut v, overrides);
        let mut cfg: EngineConfig =
            serde_json::from_value(v).map_err(|e| ApiError::bad_request(format!("invalid config override: {e}")))?;
        cfg.http_backend.api_key = self.base.http_backend.api_key.clone();
        cfg.check()?;
        Ok(cfg)
    }

    fn engine_for(&self, cfg: &EngineConfig) -> Result<Engine, ApiError> {
        let mut cfg = cfg.clone();
        cfg.http_backend.api_key = self.base.http_backend.api_key.clone();
        Engine::from_config(&cfg).map_err(|e| ApiError::bad_request(e.to_string()))
    }

    /// The live slot of `id`, reopening it from disk after a restart.
    pub fn slot(&self, id: &str) -> Result<Arc<SessionSlot>, ApiError> {
        let dir = self.session_dir(id)?;
        let mut sessions = self.sessions.lock().expect("session map lock");
        if let Some(slot) = sessions.get(id) {
            return Ok(slot.clone());
        }
        if !dir.join(SESSION_FILE).is_file() {
            return Err(ApiError::not_found(format!("no session {id:?}")));
        }
        let session = Session::open(&dir)?;
        let engine = self.engine_for(&session.config)?;
        let slot = Arc::new(SessionSlot { engine, session: Arc::new(AsyncMutex::new(session)) });
        sessions.insert(id.to_string(), slot.clone());
        Ok(slot)
    }

    fn create(&self, cfg: EngineConfig) -> Result<String, ApiError> {
        let engine = self.engine_for(&cfg)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.root.join(&id);
        std::fs::create_dir_all(&dir).map_err(|e| ApiError::internal(format!("{}: {e}", dir.display())))?;
        let session = Session::create(id.clone(), cfg, &dir)?;
        let slot = Arc::new(SessionSlot { engine, session: Arc::new(AsyncMutex::new(session)) });
        self.sessions.lock().expect("session map lock").insert(id.clone(), slot);
        Ok(id)
    }
}

/// Committed state as stored on disk; never waits for a running turn.
fn committed(dir: &FsPath, id: &str) -> Result<Session, ApiError> {
    if !dir.join(SESSION_FILE).is_file() {
        return Err(ApiError::not_found(format!("no session {id:?}")));
    }
    Ok(Session::open(dir)?)
}

fn lock(slot: &SessionSlot, id: &str) -> Result<OwnedMutexGuard<Session>, ApiError> {
    slot.session
        .clone()
        .try_lock_owned()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, format!("a turn of session {id} is already running")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, EngineError> + Send + 'static) -> Result<T, ApiError> {
    let out = tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(format!("worker failed: {e}")))?;
    Ok(out?)
}

type AppResult<T> = Result<T, ApiError>;

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> AppResult<Response> {
    let overrides: Value = if body.iter().all(u8::is_ascii_whitespace) { json!({}) } else { parse_body(&body)? };
    let cfg = app.config_with(&overrides)?;
    let id = app.create(cfg.clone())?;
    tracing::info!(session = %id, "session created");
    let location = format!("/session/{id}/state");
    Ok((StatusCode::CREATED, [(header::LOCATION, location)], Json(json!({ "id": id, "config": cfg }))).into_response())
}

async fn run_turn(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> AppResult<Json<TurnRecord>> {
    let request: TurnRequest = parse_body(&body)?;
    let slot = app.slot(&id)?;
    let mut session = lock(&slot, &id)?;
    let engine = slot.engine.clone();
    let record = blocking(move || engine.run_turn(&mut session, &request)).await?;
    tracing::info!(session = %id, k = record.k, "turn committed");
    Ok(Json(record))
}

async fn session_state(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> AppResult<Json<Value>> {
    let s = committed(&app.session_dir(&id)?, &id)?;
    Ok(Json(json!({ "id": s.id, "config": s.config, "turns": s.turns, "db": s.db })))
}

#[derive(Debug, Deserialize)]
struct ImageQuery {
    revision: Option<u32>,
}

async fn turn_image(
    State(app): State<Arc<AppState>>,
    Path((id, k)): Path<(String, u32)>,
    Query(q): Query<ImageQuery>,
) -> AppResult<Response> {
    let dir = app.session_dir(&id)?;
    let s = committed(&dir, &id)?;
    let t = s.turn(k).ok_or_else(|| ApiError::not_found(format!("session {id} has no turn {k}")))?;
    let rel = match q.revision {
        None => t.image.clone(),
        Some(n) if n == t.revision => t.image.clone(),
        Some(n) => t
            .revisions
            .iter()
            .find(|r| r.revision == n)
            .map(|r| r.image.clone())
            .ok_or_else(|| ApiError::not_found(format!("turn {k} has no revision {n}")))?,
    };
    let bytes = std::fs::read(dir.join(&rel)).map_err(|e| ApiError::internal(format!("{rel}: {e}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn turn_layout(State(app): State<Arc<AppState>>, Path((id, k)): Path<(String, u32)>) -> AppResult<Json<LayoutDocument>> {
    let s = committed(&app.session_dir(&id)?, &id)?;
    let t = s.turn(k).ok_or_else(|| ApiError::not_found(format!("session {id} has no turn {k}")))?;
    Ok(Json(t.final_layout.clone()))
}

async fn override_layout(
    State(app): State<Arc<AppState>>,
    Path((id, k)): Path<(String, u32)>,
    body: Bytes,
) -> AppResult<Json<TurnRecord>> {
    let doc: LayoutDocument = parse_body(&body)?;
    let slot = app.slot(&id)?;
    let mut session = lock(&slot, &id)?;
    let engine = slot.engine.clone();
    let record = blocking(move || engine.override_layout(&mut session, k, doc)).await?;
    tracing::info!(session = %id, k, revision = record.revision, "layout overridden");
    Ok(Json(record))
}

async fn draw(State(app): State<Arc<AppState>>, body: Bytes) -> AppResult<Response> {
    let request: DrawRequest = parse_body(&body)?;
    request.validate().map_err(|e| ApiError::from(&e))?;
    let drawer = app.drawer.clone();
    let response = tokio::task::spawn_blocking(move || drawer.draw(&request))
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
        .map_err(|e| ApiError::from(&e))?;
    Ok(Json(response).into_response())
}

async fn capabilities(State(app): State<Arc<AppState>>) -> AppResult<Response> {
    let caps = app.drawer.capabilities().map_err(|e| ApiError::from(&e))?;
    Ok(Json(caps).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/session", post(create_session))
        .route("/session/{id}/turn", post(run_turn))
        .route("/session/{id}/state", get(session_state))
        .route("/session/{id}/image/{k}", get(turn_image))
        .route("/session/{id}/layout/{k}", get(turn_layout))
        .route("/session/{id}/layout/{k}/override", post(override_layout))
        .route("/draw", post(draw))
        .route("/capabilities", get(capabilities))
        .with_state(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_descends_into_objects() {
        let mut base = json!({"a": 1, "b": {"c": 2, "d": 3}});
        merge(&mut base, &json!({"b": {"c": 5}, "e": [1]}));
        assert_eq!(base, json!({"a": 1, "b": {"c": 5, "d": 3}, "e": [1]}));
    }

    #[test]
    fn overrides_are_checked() {
        let app = AppState::new(PathBuf::from("unused"), EngineConfig::default());
        let cfg = app.config_with(&json!({"seed": 4, "frame": {"width": 256, "height": 256}})).unwrap();
        assert_eq!((cfg.seed, cfg.frame.width), (4, 256));
        assert_eq!(cfg.alpha, 0.2);
        assert_eq!(app.config_with(&json!({"r": 3.0})).unwrap_err().status, StatusCode::BAD_REQUEST);
        assert_eq!(app.config_with(&json!({"seed": "x"})).unwrap_err().status, StatusCode::BAD_REQUEST);
        assert_eq!(app.config_with(&json!([1])).unwrap_err().status, StatusCode::BAD_REQUEST);
    }

    #[test]
    fn ids_cannot_escape_the_root() {
        assert!(valid_id("0f3a_b-2"));
        assert!(!valid_id("../etc"));
        assert!(!valid_id(""));
    }
}
