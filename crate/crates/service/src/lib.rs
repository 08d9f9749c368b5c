//! HTTP shell around interactive segmentation sessions. All inference goes
//! through `mvseg_core::session::Session`, so responses match the batch
//! pipeline exactly.

use std::collections::HashMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use mvseg_core::bundle_io::{load_bundle, read_scene_summary, SceneSummary};
use mvseg_core::checkpoint::{load_checkpoint, MANIFEST_FILE};
use mvseg_core::geometry::Prompt;
use mvseg_core::model::Model;
use mvseg_core::rle::EncodedMask;
use mvseg_core::session::Session;
use mvseg_core::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Oldest sessions are dropped beyond this count.
    pub max_sessions: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            data_dir: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            max_sessions: 64,
        }
    }
}

impl ServiceConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Apply command-line overrides on top of file values.
    pub fn with_overrides(mut self, port: Option<u16>, data_dir: Option<PathBuf>, checkpoint_dir: Option<PathBuf>) -> Self {
        if let Some(p) = port {
            self.port = p;
        }
        if let Some(d) = data_dir {
            self.data_dir = d;
        }
        if let Some(d) = checkpoint_dir {
            self.checkpoint_dir = d;
        }
        self
    }
}

/// Error body `{error: {code, message, detail?}}` with its status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            detail: None,
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Prompt { index, .. } => Self {
                detail: Some(json!({ "index": index })),
                ..Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_prompt", message)
            },
            Error::NoPrompts => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "empty_prompts", message),
            Error::NotFound(_) => Self::not_found(message),
            Error::Config(_) | Error::Input(_) | Error::Shape(_) | Error::EmptyMask(_) => Self::unprocessable(message),
            Error::Load { .. } | Error::Io { .. } | Error::Diverged { .. } => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut error = json!({ "code": self.code, "message": self.message });
        if let Some(d) = self.detail {
            error["detail"] = d;
        }
        (self.status, Json(json!({ "error": error }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub struct AppState {
    pub config: ServiceConfig,
    sessions: Mutex<Vec<(String, Arc<Mutex<Session>>)>>,
    models: Mutex<HashMap<String, Arc<Model>>>,
    counter: AtomicU64,
    salt: u64,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        let salt = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        Arc::new(Self {
            config,
            sessions: Mutex::new(Vec::new()),
            models: Mutex::new(HashMap::new()),
            counter: AtomicU64::new(0),
            salt,
        })
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.sessions
            .lock()
            .unwrap()
            .iter()
            .find(|(k, _)| k == id)
            .map(|(_, s)| s.clone())
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id:?}")))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    fn next_id(&self) -> String {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        format!("{:016x}", mvseg_core::rng::splitmix64(self.salt ^ n.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
    }

    /// Scene directories keyed by scene id, sorted.
    pub fn catalog(&self) -> Vec<(SceneSummary, PathBuf)> {
        let mut out = Vec::new();
        let Ok(entries) = fs::read_dir(&self.config.data_dir) else {
            return out;
        };
        for e in entries.flatten() {
            let dir = e.path();
            if let Ok(s) = read_scene_summary(&dir) {
                out.push((s, dir));
            }
        }
        out.sort_by(|a, b| a.0.scene_id.cmp(&b.0.scene_id));
        out
    }

    pub fn checkpoints(&self) -> Vec<String> {
        let mut out: Vec<String> = fs::read_dir(&self.config.checkpoint_dir)
            .into_iter()
            .flatten()
            .flatten()
            .filter(|e| e.path().join(MANIFEST_FILE).is_file())
            .filter_map(|e| e.file_name().to_str().map(String::from))
            .collect();
        out.sort();
        out
    }

    fn model(&self, checkpoint_id: &str) -> ApiResult<Arc<Model>> {
        if let Some(m) = self.models.lock().unwrap().get(checkpoint_id) {
            return Ok(m.clone());
        }
        if !self.checkpoints().iter().any(|c| c == checkpoint_id) {
            return Err(ApiError::not_found(format!("unknown checkpoint {checkpoint_id:?}")));
        }
        let (model, _) = load_checkpoint(&self.config.checkpoint_dir.join(checkpoint_id))?;
        let model = Arc::new(model);
        self.models.lock().unwrap().insert(checkpoint_id.to_string(), model.clone());
        Ok(model)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub scene_id: String,
    #[serde(default)]
    pub frames: Option<Vec<usize>>,
    pub checkpoint_id: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ViewEntry {
    pub view: usize,
    pub image_url: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SessionDescriptor {
    pub session_id: String,
    pub scene_id: String,
    pub checkpoint_id: String,
    pub num_views: usize,
    pub height: usize,
    pub width: usize,
    pub views: Vec<ViewEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRequest {
    pub prompts: Vec<Prompt>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MaskResponse {
    pub masks: Vec<EncodedMask>,
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError {
        code: "invalid_json",
        ..ApiError::unprocessable(e.to_string())
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn list_scenes(State(state): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let scenes = blocking(move || Ok(state.catalog().into_iter().map(|(s, _)| s).collect::<Vec<_>>())).await?;
    Ok(Json(json!({ "scenes": scenes })))
}

async fn list_checkpoints(State(state): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let ids = blocking(move || Ok(state.checkpoints())).await?;
    Ok(Json(json!({ "checkpoints": ids })))
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<SessionDescriptor>)> {
    let req: CreateSession = parse_json(&body)?;
    let desc = blocking(move || {
        let dir = state
            .catalog()
            .into_iter()
            .find(|(s, _)| s.scene_id == req.scene_id)
            .map(|(_, d)| d)
            .ok_or_else(|| ApiError::not_found(format!("unknown scene {:?}", req.scene_id)))?;
        let model = state.model(&req.checkpoint_id)?;
        let bundle = load_bundle(&dir)?;
        let id = state.next_id();
        let session = Session::create(id.clone(), req.checkpoint_id, model, &bundle, req.frames.as_deref())?;
        let desc = SessionDescriptor {
            session_id: id.clone(),
            scene_id: session.scene_id.clone(),
            checkpoint_id: session.checkpoint_id.clone(),
            num_views: session.num_views(),
            height: session.height(),
            width: session.width(),
            views: (0..session.num_views())
                .map(|v| ViewEntry {
                    view: v,
                    image_url: format!("/sessions/{id}/views/{v}/image"),
                })
                .collect(),
        };
        let mut sessions = state.sessions.lock().unwrap();
        sessions.push((id, Arc::new(Mutex::new(session))));
        let excess = sessions.len().saturating_sub(state.config.max_sessions.max(1));
        sessions.drain(..excess);
        Ok(desc)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(desc)))
}

async fn update_prompts(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<MaskResponse>> {
    let session = state.session(&id)?;
    let req: PromptRequest = parse_json(&body)?;
    let masks = blocking(move || Ok(session.lock().unwrap().update_prompts(req.prompts)?)).await?;
    Ok(Json(MaskResponse { masks }))
}

async fn view_image(State(state): State<Arc<AppState>>, UrlPath((id, view)): UrlPath<(String, String)>) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let view: usize = view
        .parse()
        .map_err(|_| ApiError::not_found(format!("no view {view:?}")))?;
    let png = blocking(move || Ok(session.lock().unwrap().view_png(view)?)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn delete_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<StatusCode> {
    let mut sessions = state.sessions.lock().unwrap();
    let before = sessions.len();
    sessions.retain(|(k, _)| *k != id);
    if sessions.len() == before {
        return Err(ApiError::not_found(format!("unknown session {id:?}")));
    }
    Ok(StatusCode::NO_CONTENT)
}

async fn fallback() -> ApiError {
    ApiError::not_found("no such route")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/scenes", get(list_scenes))
        .route("/checkpoints", get(list_checkpoints))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", delete(delete_session))
        .route("/sessions/{id}/prompts", post(update_prompts))
        .route("/sessions/{id}/views/{view}/image", get(view_image))
        .fallback(fallback)
        .with_state(state)
}

/// Bind and serve until the process is stopped.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    let addr: SocketAddr = format!("{}:{}", config.host, config.port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bad address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(config))).await
}
