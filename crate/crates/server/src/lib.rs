//! HTTP service for live annotation sessions.
//!
//! Every study lives in memory behind its own lock and, when a data directory
//! is configured, in `<data_dir>/<study_id>/events.jsonl`. New log entries are
//! appended and synced before a request is answered.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use arena_core::service::{
    append_entries, JudgmentAck, JudgmentRequest, NextPair, RankingsView, SessionInfo, Study, StudySpec,
};
use arena_core::{Error, ErrorKind};
use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path as UrlPath, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use chrono::Utc;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub const LOG_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "rankings.json";

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    pub data_dir: Option<PathBuf>,
    /// Served under `/media`.
    pub media_dir: Option<PathBuf>,
    /// Shared token; when set, `/v1` requests need `Authorization: Bearer <token>`.
    pub token: Option<String>,
}

impl ServerConfig {
    /// Reads `ARENA_DATA_DIR`, `ARENA_MEDIA_DIR` and `ARENA_TOKEN`.
    pub fn from_env() -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        ServerConfig {
            data_dir: var("ARENA_DATA_DIR").map(PathBuf::from),
            media_dir: var("ARENA_MEDIA_DIR").map(PathBuf::from),
            token: var("ARENA_TOKEN"),
        }
    }
}

pub fn bind_addr_from_env() -> Result<SocketAddr, String> {
    let raw = std::env::var("ARENA_BIND_ADDR").unwrap_or_else(|_| "127.0.0.1:8080".into());
    raw.parse().map_err(|e| format!("ARENA_BIND_ADDR `{raw}`: {e}"))
}

struct Slot {
    study: Study,
    /// Log entries already on disk.
    persisted: usize,
}

struct StudyHandle {
    slot: Mutex<Slot>,
    last_seq: AtomicU64,
    rankings: RwLock<Option<Arc<RankingsView>>>,
    dir: Option<PathBuf>,
}

impl StudyHandle {
    fn lock(&self) -> std::sync::MutexGuard<'_, Slot> {
        // A panic mid-command leaves the study as the events applied so far,
        // which is still a valid state.
        self.slot.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Writes entries not yet on disk.
    fn persist(&self, slot: &mut Slot) -> Result<(), ApiError> {
        let log = slot.study.log();
        if let Some(dir) = &self.dir {
            append_entries(&dir.join(LOG_FILE), &log[slot.persisted..])?;
        }
        slot.persisted = log.len();
        self.last_seq.store(log.last().map_or(0, |e| e.seq), Ordering::Release);
        Ok(())
    }

    fn cached_rankings(&self) -> Option<Arc<RankingsView>> {
        let cached = self.rankings.read().unwrap_or_else(|e| e.into_inner()).clone()?;
        (cached.as_of_seq == self.last_seq.load(Ordering::Acquire)).then_some(cached)
    }

    /// Refits outside the study lock, then caches and snapshots the result.
    fn refresh_rankings(&self) -> Result<Arc<RankingsView>, ApiError> {
        if let Some(cached) = self.cached_rankings() {
            return Ok(cached);
        }
        let input = self.lock().study.rankings_input();
        let view = Arc::new(input.compute()?);
        {
            let mut cache = self.rankings.write().unwrap_or_else(|e| e.into_inner());
            if cache.as_ref().is_none_or(|c| c.as_of_seq < view.as_of_seq) {
                *cache = Some(view.clone());
            }
        }
        if let Some(dir) = &self.dir {
            write_snapshot(dir, &view)?;
        }
        Ok(view)
    }
}

fn write_snapshot(dir: &Path, view: &RankingsView) -> std::io::Result<()> {
    let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
    std::fs::write(&tmp, serde_json::to_vec_pretty(view)?)?;
    std::fs::rename(tmp, dir.join(SNAPSHOT_FILE))
}

#[derive(Default)]
struct Registry {
    studies: BTreeMap<String, Arc<StudyHandle>>,
    /// Session id to study id.
    sessions: BTreeMap<String, String>,
    next_study: u64,
}

#[derive(Clone)]
pub struct AppState {
    config: Arc<ServerConfig>,
    registry: Arc<RwLock<Registry>>,
}

impl AppState {
    /// Loads every study under the data directory and finishes any command a
    /// crash cut short.
    pub fn open(config: ServerConfig) -> Result<Self, Error> {
        let mut registry = Registry {
            next_study: 1,
            ..Default::default()
        };
        if let Some(root) = &config.data_dir {
            std::fs::create_dir_all(root)?;
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join(LOG_FILE).is_file())
                .collect();
            dirs.sort();
            for dir in dirs {
                let mut study = load_log(&dir.join(LOG_FILE))?;
                let persisted = study.log().len();
                let resumed = study.resume(Utc::now())?;
                if resumed > 0 {
                    tracing::warn!(study = %study.id, entries = resumed, "completed an interrupted command");
                }
                if let Some(n) = study.id.strip_prefix("study-").and_then(|n| n.parse::<u64>().ok()) {
                    registry.next_study = registry.next_study.max(n + 1);
                }
                let handle = Arc::new(StudyHandle {
                    last_seq: AtomicU64::new(0),
                    rankings: RwLock::new(None),
                    dir: Some(dir),
                    slot: Mutex::new(Slot { study, persisted }),
                });
                {
                    let mut slot = handle.lock();
                    handle.persist(&mut slot).map_err(|e| e.0)?;
                    for s in slot.study.sessions() {
                        registry.sessions.insert(s.id.clone(), slot.study.id.clone());
                    }
                }
                let id = handle.lock().study.id.clone();
                tracing::info!(study = %id, "loaded");
                registry.studies.insert(id, handle);
            }
        }
        Ok(AppState {
            config: Arc::new(config),
            registry: Arc::new(RwLock::new(registry)),
        })
    }

    fn study(&self, id: &str) -> Result<Arc<StudyHandle>, ApiError> {
        self.registry
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .studies
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("study `{id}`")).into())
    }

    fn study_of_session(&self, session_id: &str) -> Result<Arc<StudyHandle>, ApiError> {
        let study_id = self
            .registry
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .sessions
            .get(session_id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session `{session_id}`")))?;
        self.study(&study_id)
    }
}

/// Reads a study log, dropping a trailing partial line left by an
/// interrupted append.
fn load_log(path: &Path) -> Result<Study, Error> {
    let mut text = std::fs::read_to_string(path)?;
    if !text.is_empty() && !text.ends_with('\n') {
        let keep = text.rfind('\n').map_or(0, |i| i + 1);
        tracing::warn!(path = %path.display(), bytes = text.len() - keep, "dropping a torn final log line");
        text.truncate(keep);
        std::fs::write(path, &text)?;
    }
    Study::replay(text.as_bytes())
}

#[derive(Debug)]
pub struct ApiError(pub Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError(Error::Io(e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub kind: String,
    pub message: String,
}

fn error_response(status: StatusCode, kind: &str, message: String) -> Response {
    let body = ErrorBody {
        error: ErrorDetail {
            kind: kind.to_owned(),
            message,
        },
    };
    (status, axum::Json(body)).into_response()
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match self.0.kind() {
            ErrorKind::Validation => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            ErrorKind::Numeric => (StatusCode::UNPROCESSABLE_ENTITY, "numeric"),
            ErrorKind::NotFound => (StatusCode::NOT_FOUND, "not_found"),
            ErrorKind::Conflict => (StatusCode::CONFLICT, "conflict"),
            ErrorKind::Io => (StatusCode::INTERNAL_SERVER_ERROR, "io"),
        };
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        error_response(status, kind, self.0.to_string())
    }
}

/// JSON body extractor whose rejections use the service's error body.
pub struct Json<T>(pub T);

impl<S, T> FromRequest<S> for Json<T>
where
    axum::Json<T>: FromRequest<S, Rejection = JsonRejection>,
    S: Send + Sync,
{
    type Rejection = Response;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match axum::Json::<T>::from_request(req, state).await {
            Ok(axum::Json(v)) => Ok(Json(v)),
            Err(rejection) => Err(error_response(rejection.status(), "validation", rejection.body_text())),
        }
    }
}

impl<T: Serialize> IntoResponse for Json<T> {
    fn into_response(self) -> Response {
        axum::Json(self.0).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StudyCreated {
    pub study_id: String,
    pub models: Vec<String>,
    pub total_pairs: usize,
    pub static_pairs: usize,
    pub dynamic_batches: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewSession {
    pub annotator_id: String,
}

async fn create_study(State(app): State<AppState>, Json(spec): Json<StudySpec>) -> Result<Response, ApiError> {
    let now = Utc::now();
    let mut registry = app.registry.write().unwrap_or_else(|e| e.into_inner());
    let id = format!("study-{:04}", registry.next_study);
    let study = Study::create(&id, spec, now)?;
    let dir = match &app.config.data_dir {
        Some(root) => {
            let dir = root.join(&id);
            std::fs::create_dir_all(&dir)?;
            Some(dir)
        }
        None => None,
    };
    let plan = study.plan().clone();
    let handle = Arc::new(StudyHandle {
        slot: Mutex::new(Slot { study, persisted: 0 }),
        last_seq: AtomicU64::new(0),
        rankings: RwLock::new(None),
        dir,
    });
    handle.persist(&mut handle.lock())?;
    registry.next_study += 1;
    registry.studies.insert(id.clone(), handle);
    tracing::info!(study = %id, pairs = plan.total_pairs, "study created");
    let body = StudyCreated {
        study_id: id,
        models: plan.model_ids(),
        total_pairs: plan.total_pairs,
        static_pairs: plan.static_pair_count(),
        dynamic_batches: plan.dynamic_batches.len(),
    };
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn create_session(
    State(app): State<AppState>,
    UrlPath(study_id): UrlPath<String>,
    Json(req): Json<NewSession>,
) -> Result<Response, ApiError> {
    let handle = app.study(&study_id)?;
    let (info, existed) = {
        let mut slot = handle.lock();
        let existed = slot.study.sessions().any(|s| s.annotator_id == req.annotator_id);
        let info = slot.study.create_session(&req.annotator_id, Utc::now())?;
        handle.persist(&mut slot)?;
        (info, existed)
    };
    app.registry
        .write()
        .unwrap_or_else(|e| e.into_inner())
        .sessions
        .insert(info.session_id.clone(), study_id);
    let status = if existed { StatusCode::OK } else { StatusCode::CREATED };
    Ok((status, Json(info)).into_response())
}

async fn session_info(State(app): State<AppState>, UrlPath(session_id): UrlPath<String>) -> Result<Json<SessionInfo>, ApiError> {
    let handle = app.study_of_session(&session_id)?;
    let info = handle.lock().study.session_info(&session_id)?;
    Ok(Json(info))
}

async fn next_pair(State(app): State<AppState>, UrlPath(session_id): UrlPath<String>) -> Result<Json<NextPair>, ApiError> {
    let handle = app.study_of_session(&session_id)?;
    let next = handle.lock().study.next_pair(&session_id)?;
    Ok(Json(next))
}

async fn record_judgment(
    State(app): State<AppState>,
    UrlPath(session_id): UrlPath<String>,
    Json(req): Json<JudgmentRequest>,
) -> Result<Json<JudgmentAck>, ApiError> {
    let handle = app.study_of_session(&session_id)?;
    let ack = tokio::task::spawn_blocking({
        let handle = handle.clone();
        move || -> Result<JudgmentAck, ApiError> {
            let mut slot = handle.lock();
            let ack = slot.study.record_judgment(&session_id, &req, Utc::now())?;
            handle.persist(&mut slot)?;
            Ok(ack)
        }
    })
    .await
    .map_err(|e| Error::Io(std::io::Error::other(e)))??;
    if ack.updated && handle.dir.is_some() {
        // Keep the on-disk snapshot current without delaying the response.
        tokio::task::spawn_blocking(move || {
            if let Err(e) = handle.refresh_rankings() {
                tracing::warn!(error = %e.0, "rankings snapshot failed");
            }
        });
    }
    Ok(Json(ack))
}

async fn rankings(State(app): State<AppState>, UrlPath(study_id): UrlPath<String>) -> Result<Json<RankingsView>, ApiError> {
    let handle = app.study(&study_id)?;
    let view = tokio::task::spawn_blocking(move || handle.refresh_rankings())
        .await
        .map_err(|e| Error::Io(std::io::Error::other(e)))??;
    Ok(Json(view.as_ref().clone()))
}

async fn export(State(app): State<AppState>, UrlPath(study_id): UrlPath<String>) -> Result<Response, ApiError> {
    let handle = app.study(&study_id)?;
    let body = handle.lock().study.export_jsonl();
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn require_token(State(app): State<AppState>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(token) = &app.config.token {
        let presented = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return error_response(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token".into());
        }
    }
    next.run(req).await
}

pub fn router(app: AppState) -> Router {
    let api = Router::new()
        .route("/v1/studies", post(create_study))
        .route("/v1/studies/{id}/sessions", post(create_session))
        .route("/v1/studies/{id}/rankings", get(rankings))
        .route("/v1/studies/{id}/export", get(export))
        .route("/v1/sessions/{id}", get(session_info))
        .route("/v1/sessions/{id}/next", get(next_pair))
        .route("/v1/sessions/{id}/judgments", post(record_judgment))
        .route_layer(middleware::from_fn_with_state(app.clone(), require_token));
    let mut router = Router::new().route("/healthz", get(|| async { "ok" })).merge(api);
    if let Some(dir) = &app.config.media_dir {
        router = router.nest_service("/media", ServeDir::new(dir));
    }
    router.with_state(app)
}

/// Serves until ctrl-c.
pub async fn serve(config: ServerConfig, addr: SocketAddr) -> Result<(), Error> {
    let app = AppState::open(config)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
