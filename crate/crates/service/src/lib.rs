//! HTTP task queue for human-in-the-loop runs.
//!
//! The annotation client polls `GET /runs/{id}/tasks`, answers with
//! `POST /runs/{id}/annotations`, and the run advances by itself once every
//! task of a phase has an answer. Each run's mutations go through one lock
//! on a blocking thread; reads are served from a snapshot refreshed after
//! every mutation.

mod error;
mod images;
pub mod session;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use palps::dataset::{write_manifest, DatasetManifest};
use palps::engine::{read_run_log, DatasetSource, Engine, RunConfig, RunLogWriter};
use palps::oracle::OracleMode;
use serde::{Deserialize, Serialize};
use tokio::sync::watch;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use tower_http::services::ServeDir;

pub use error::ApiError;
use session::{AnnotationSubmission, AnnotationTask, RunSession, RunStatus, SubmissionAck, TaskKind, TaskState};

/// Longest a task poll may wait for new tasks.
pub const MAX_WAIT_MS: u64 = 30_000;

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Where run logs (and inline manifests) are written. Runs found here
    /// at startup are resumed by replay.
    pub log_dir: Option<PathBuf>,
    /// Base for relative manifest paths in submitted configs.
    pub base_dir: Option<PathBuf>,
    /// Allowed CORS origins; empty allows any origin.
    pub cors_origins: Vec<String>,
    /// Static files for the annotation client, served at `/`.
    pub ui_dir: Option<PathBuf>,
}

struct Snapshot {
    status: RunStatus,
    tasks: Vec<AnnotationTask>,
    log: Arc<String>,
    log_len: usize,
}

struct RunHandle {
    session: Mutex<RunSession>,
    snapshot: RwLock<Arc<Snapshot>>,
    version: watch::Sender<u64>,
    manifest: Arc<DatasetManifest>,
    image_base: Option<PathBuf>,
}

impl RunHandle {
    fn new(session: RunSession, manifest: Arc<DatasetManifest>, image_base: Option<PathBuf>) -> Self {
        let snapshot = Arc::new(Snapshot {
            status: session.status(),
            tasks: session.tasks().to_vec(),
            log: Arc::new(session.log_text()),
            log_len: session.logs().len(),
        });
        Self {
            session: Mutex::new(session),
            snapshot: RwLock::new(snapshot),
            version: watch::channel(0).0,
            manifest,
            image_base,
        }
    }

    fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn refresh(&self, session: &RunSession) {
        let old = self.snapshot();
        let log = if old.log_len == session.logs().len() {
            old.log.clone()
        } else {
            Arc::new(session.log_text())
        };
        let next = Arc::new(Snapshot {
            status: session.status(),
            tasks: session.tasks().to_vec(),
            log,
            log_len: session.logs().len(),
        });
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = next;
        self.version.send_modify(|v| *v += 1);
    }
}

struct Inner {
    config: ServiceConfig,
    runs: RwLock<BTreeMap<String, Arc<RunHandle>>>,
    next_id: Mutex<u64>,
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

fn run_number(id: &str) -> Option<u64> {
    id.strip_prefix("run-")?.parse().ok()
}

impl AppState {
    /// Creates the state, resuming every run log found in `log_dir`.
    pub fn new(config: ServiceConfig) -> Result<Self, ApiError> {
        let state = Self {
            inner: Arc::new(Inner {
                config,
                runs: RwLock::new(BTreeMap::new()),
                next_id: Mutex::new(1),
            }),
        };
        if let Some(dir) = state.inner.config.log_dir.clone() {
            fs::create_dir_all(&dir).map_err(ApiError::internal)?;
            let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(ApiError::internal)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
                .collect();
            paths.sort();
            for path in paths {
                state.resume_run(&dir, &path)?;
            }
        }
        Ok(state)
    }

    fn resume_run(&self, dir: &Path, path: &Path) -> Result<(), ApiError> {
        let run_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| ApiError::internal(format!("bad log file name {}", path.display())))?
            .to_string();
        let file = File::open(path).map_err(ApiError::internal)?;
        let log = read_run_log(BufReader::new(file)).map_err(ApiError::internal)?;
        if log.header.config.oracle.mode != OracleMode::Human {
            log::warn!("skipping {}: not a human-annotated run", path.display());
            return Ok(());
        }
        if log.truncated_tail {
            log::warn!("{run_id}: dropping an incomplete final record");
            rewrite_log(path, &log).map_err(ApiError::internal)?;
        }
        let config = &log.header.config;
        let manifest = Arc::new(config.dataset.load(Some(dir)).map_err(ApiError::internal)?);
        let detector = config.detector.build(config.seed).map_err(ApiError::internal)?;
        let (engine, first) = Engine::resume(&log, manifest.clone(), detector).map_err(ApiError::internal)?;
        let mut sink = RunLogWriter::append(OpenOptions::new().append(true).open(path).map_err(ApiError::internal)?);
        let mut logs = log.episodes;
        if let Some(first) = first {
            sink.write(&first).map_err(ApiError::internal)?;
            logs.push(first);
        }
        let image_base = image_base(&config.dataset, Some(dir));
        let session = RunSession::new(run_id.clone(), engine, logs, Some(sink)).map_err(ApiError::from)?;
        log::info!("resumed {run_id} at episode {}", session.engine().episodes_completed());
        if let Some(n) = run_number(&run_id) {
            let mut next = self.inner.next_id.lock().unwrap_or_else(|e| e.into_inner());
            *next = (*next).max(n + 1);
        }
        let handle = Arc::new(RunHandle::new(session, manifest, image_base));
        self.inner
            .runs
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(run_id, handle);
        Ok(())
    }

    fn run(&self, id: &str) -> Result<Arc<RunHandle>, ApiError> {
        self.inner
            .runs
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no run {id}")))
    }

    pub fn run_ids(&self) -> Vec<String> {
        self.inner
            .runs
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .keys()
            .cloned()
            .collect()
    }

    /// Starts a human-mode run: trains the initial model and opens the
    /// first phase. Blocking; call from a blocking context.
    pub fn create_run(&self, mut config: RunConfig) -> Result<String, ApiError> {
        if config.oracle.mode != OracleMode::Human {
            return Err(ApiError::bad_request("service runs need oracle mode \"human\""));
        }
        config.validate().map_err(ApiError::bad_request)?;
        let run_id = {
            let mut next = self.inner.next_id.lock().unwrap_or_else(|e| e.into_inner());
            let id = format!("run-{:04}", *next);
            *next += 1;
            id
        };
        let cfg = &self.inner.config;
        let base = cfg.base_dir.as_deref();
        let manifest = Arc::new(config.dataset.load(base).map_err(ApiError::bad_request)?);
        let image_base = image_base(&config.dataset, base);
        // Keep ground truth out of the run log header: an inline manifest is
        // stored beside the log and referenced by path.
        match &mut config.dataset {
            DatasetSource::Inline { .. } => {
                let name = format!("{run_id}.manifest.json");
                if let Some(dir) = &cfg.log_dir {
                    let file = File::create(dir.join(&name)).map_err(ApiError::internal)?;
                    write_manifest(&manifest, file).map_err(ApiError::internal)?;
                }
                config.dataset = DatasetSource::Manifest { path: name.into() };
            }
            DatasetSource::Manifest { path } => {
                if let (Some(b), true) = (base, path.is_relative()) {
                    *path = b.join(&*path);
                }
            }
            DatasetSource::Synthetic { .. } => {}
        }
        let detector = config.detector.build(config.seed).map_err(ApiError::bad_request)?;
        let (engine, first) = Engine::new(config, manifest.clone(), detector).map_err(ApiError::bad_request)?;
        let sink = match &cfg.log_dir {
            Some(dir) => {
                let file = File::create(dir.join(format!("{run_id}.jsonl"))).map_err(ApiError::internal)?;
                let mut w = RunLogWriter::new(file, engine.header()).map_err(ApiError::internal)?;
                w.write(&first).map_err(ApiError::internal)?;
                Some(w)
            }
            None => None,
        };
        let session = RunSession::new(run_id.clone(), engine, vec![first], sink)?;
        let handle = Arc::new(RunHandle::new(session, manifest, image_base));
        self.inner
            .runs
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(run_id.clone(), handle);
        log::info!("created {run_id}");
        Ok(run_id)
    }

    /// Applies one submission. Blocking; call from a blocking context.
    pub fn submit(&self, run_id: &str, sub: AnnotationSubmission) -> Result<SubmissionAck, ApiError> {
        let handle = self.run(run_id)?;
        let mut session = handle.session.lock().unwrap_or_else(|e| e.into_inner());
        let result = session.submit(sub);
        handle.refresh(&session);
        Ok(result?)
    }

    pub fn status(&self, run_id: &str) -> Result<RunStatus, ApiError> {
        Ok(self.run(run_id)?.snapshot().status.clone())
    }

    /// Waits until the run's phase is done, for callers that block on a
    /// human run.
    pub async fn wait_until_done(&self, run_id: &str) -> Result<RunStatus, ApiError> {
        let handle = self.run(run_id)?;
        let mut rx = handle.version.subscribe();
        loop {
            let status = handle.snapshot().status.clone();
            if status.phase == palps::engine::Phase::Done {
                return Ok(status);
            }
            if rx.changed().await.is_err() {
                return Ok(status);
            }
        }
    }
}

fn rewrite_log(path: &Path, log: &palps::engine::RunLog) -> Result<(), palps::engine::EngineError> {
    let tmp = path.with_extension("jsonl.tmp");
    let mut w = RunLogWriter::new(File::create(&tmp)?, &log.header)?;
    for e in &log.episodes {
        w.write(e)?;
    }
    drop(w);
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Directory that relative `image_uri`s resolve against.
fn image_base(source: &DatasetSource, base: Option<&Path>) -> Option<PathBuf> {
    match source {
        DatasetSource::Manifest { path } => {
            let full = match base {
                Some(b) if path.is_relative() => b.join(path),
                _ => path.clone(),
            };
            full.parent().map(Path::to_path_buf)
        }
        _ => base.map(Path::to_path_buf),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

#[derive(Serialize)]
struct Created {
    run_id: String,
}

async fn create_run(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let config: RunConfig = parse_body(&body)?;
    let run_id = blocking(move || state.create_run(config)).await?;
    Ok((StatusCode::CREATED, Json(Created { run_id })).into_response())
}

#[derive(Serialize)]
struct RunList {
    runs: Vec<RunStatus>,
}

async fn list_runs(State(state): State<AppState>) -> Result<Json<RunList>, ApiError> {
    let runs = state
        .run_ids()
        .iter()
        .map(|id| state.status(id))
        .collect::<Result<_, _>>()?;
    Ok(Json(RunList { runs }))
}

#[derive(Debug, Deserialize)]
struct TaskQuery {
    kind: Option<TaskKind>,
    limit: Option<usize>,
    wait_ms: Option<u64>,
}

#[derive(Serialize)]
struct TaskList {
    phase: palps::engine::Phase,
    tasks: Vec<AnnotationTask>,
}

async fn list_tasks(
    State(state): State<AppState>,
    UrlPath(run_id): UrlPath<String>,
    Query(q): Query<TaskQuery>,
) -> Result<Json<TaskList>, ApiError> {
    let handle = state.run(&run_id)?;
    let mut rx = handle.version.subscribe();
    let deadline = tokio::time::Instant::now() + Duration::from_millis(q.wait_ms.unwrap_or(0).min(MAX_WAIT_MS));
    loop {
        let snap = handle.snapshot();
        let tasks: Vec<AnnotationTask> = snap
            .tasks
            .iter()
            .filter(|t| t.state == TaskState::Pending && q.kind.is_none_or(|k| k == t.kind))
            .take(q.limit.unwrap_or(usize::MAX))
            .cloned()
            .collect();
        let done = snap.status.phase == palps::engine::Phase::Done;
        if !tasks.is_empty() || done || tokio::time::Instant::now() >= deadline {
            return Ok(Json(TaskList {
                phase: snap.status.phase,
                tasks,
            }));
        }
        if tokio::time::timeout_at(deadline, rx.changed()).await.is_err() {
            continue;
        }
    }
}

async fn submit(
    State(state): State<AppState>,
    UrlPath(run_id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<SubmissionAck>, ApiError> {
    let sub: AnnotationSubmission = parse_body(&body)?;
    state.run(&run_id)?;
    let ack = blocking(move || state.submit(&run_id, sub)).await?;
    Ok(Json(ack))
}

async fn status(State(state): State<AppState>, UrlPath(run_id): UrlPath<String>) -> Result<Json<RunStatus>, ApiError> {
    Ok(Json(state.status(&run_id)?))
}

async fn run_log(State(state): State<AppState>, UrlPath(run_id): UrlPath<String>) -> Result<Response, ApiError> {
    let log = state.run(&run_id)?.snapshot().log.clone();
    Ok((
        [(header::CONTENT_TYPE, HeaderValue::from_static("application/x-ndjson"))],
        log.as_str().to_owned(),
    )
        .into_response())
}

async fn image(
    State(state): State<AppState>,
    UrlPath((run_id, image_id)): UrlPath<(String, String)>,
) -> Result<Response, ApiError> {
    let handle = state.run(&run_id)?;
    let record = handle
        .manifest
        .get(&image_id)
        .ok_or_else(|| ApiError::not_found(format!("no image {image_id} in {run_id}")))?;
    images::serve(record, handle.image_base.as_deref()).await
}

/// Builds the router with CORS and, if configured, the static client.
pub fn router(state: AppState) -> Router {
    let cfg = &state.inner.config;
    let origin = if cfg.cors_origins.is_empty() {
        AllowOrigin::from(Any)
    } else {
        AllowOrigin::list(cfg.cors_origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    let mut app = Router::new()
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}/tasks", get(list_tasks))
        .route("/runs/{id}/annotations", post(submit))
        .route("/runs/{id}/status", get(status))
        .route("/runs/{id}/log", get(run_log))
        .route("/runs/{id}/images/{image_id}", get(image));
    if let Some(dir) = &cfg.ui_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    app.layer(cors).with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    state: AppState,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
