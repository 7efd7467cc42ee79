//! Annotation queue over HTTP.
//!
//! Data directory layout:
//!
//! ```text
//! manifests/<image_id>.json   annotation manifests (input, never modified)
//! images/<image_id>.png       images shown to annotators
//! labels/<image_id>.png       ground truth, read only by the simulated oracle
//! meta                        class names, one per line
//! events.jsonl                append-only label log (source of truth)
//! ```
//!
//! Endpoints live under `/v1`; see [`AnnotationService::router`].

mod state;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pointadapt::acquisition::AnnotationManifest;
use pointadapt::data::{DenseLabelMap, SegImage};
use pointadapt::datasets::{read_meta, write_meta};
use pointadapt::eval::class_palette;
use pointadapt::pngio::{read_label_png, write_image_png, write_label_png};
use serde::{Deserialize, Serialize};

pub use state::{LabelEvent, QueueState, SubmitOutcome};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SIM_ORACLE_ANNOTATOR: &str = "simulated-oracle";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] pointadapt::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt event log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("unknown request {0}")]
    UnknownRequest(String),
    #[error("request {request_id} already labeled {existing}, refusing {submitted}")]
    Conflict { request_id: String, existing: u8, submitted: u8 },
    #[error("class {class_id} is out of range for {classes} classes")]
    ClassOutOfRange { class_id: u64, classes: usize },
    #[error("the simulated oracle is disabled (set PADAPT_ALLOW_SIM_ORACLE=1)")]
    OracleDisabled,
    #[error("no ground truth for image {0}")]
    MissingTruth(String),
    #[error("duplicate request id {0} across manifests")]
    DuplicateRequest(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot start the async runtime: {0}")]
    Runtime(#[source] std::io::Error),
    #[error("invalid environment: {0}")]
    Env(String),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ServiceError + '_ {
    move |source| ServiceError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub port: u16,
    pub allow_sim_oracle: bool,
}

impl ServiceConfig {
    /// Reads `PADAPT_DATA_DIR` (required), `PADAPT_PORT` (default 8080) and
    /// `PADAPT_ALLOW_SIM_ORACLE` (`0`/`1`, default 0).
    pub fn from_env() -> Result<Self> {
        let data_dir = std::env::var("PADAPT_DATA_DIR")
            .map_err(|_| ServiceError::Env("PADAPT_DATA_DIR is not set".into()))?;
        let port = match std::env::var("PADAPT_PORT") {
            Ok(p) => p.parse().map_err(|_| ServiceError::Env(format!("PADAPT_PORT={p:?} is not a port")))?,
            Err(_) => 8080,
        };
        let allow_sim_oracle = match std::env::var("PADAPT_ALLOW_SIM_ORACLE").as_deref() {
            Ok("1") => true,
            Ok("0") | Err(_) => false,
            Ok(other) => return Err(ServiceError::Env(format!("PADAPT_ALLOW_SIM_ORACLE={other:?} must be 0 or 1"))),
        };
        Ok(Self { data_dir: data_dir.into(), port, allow_sim_oracle })
    }
}

/// Writes a service data directory. Ground truth is optional and only
/// needed for the simulated oracle.
pub fn prepare_data_dir(
    dir: &Path,
    manifests: &[AnnotationManifest],
    images: &[SegImage],
    truth: Option<&BTreeMap<String, DenseLabelMap>>,
    class_names: &[String],
) -> Result<()> {
    let mdir = dir.join("manifests");
    let idir = dir.join("images");
    std::fs::create_dir_all(&mdir).map_err(io_err(&mdir))?;
    std::fs::create_dir_all(&idir).map_err(io_err(&idir))?;
    for m in manifests {
        m.save(&mdir)?;
    }
    let wanted: std::collections::BTreeSet<&str> = manifests.iter().map(|m| m.image_id.as_str()).collect();
    for img in images.iter().filter(|i| wanted.contains(i.id())) {
        write_image_png(idir.join(format!("{}.png", img.id())), img)?;
        if let Some(gt) = truth.and_then(|t| t.get(img.id())) {
            let ldir = dir.join("labels");
            std::fs::create_dir_all(&ldir).map_err(io_err(&ldir))?;
            write_label_png(ldir.join(format!("{}.png", img.id())), gt)?;
        }
    }
    write_meta(dir, class_names)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub answered: usize,
    pub pending: usize,
    pub total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Point {
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub id: usize,
    pub name: String,
    pub color: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub request_id: String,
    pub image_id: String,
    pub point: Point,
    pub patch_index: usize,
    pub image_png_url: String,
    pub classes: Vec<PaletteEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub class_id: u64,
    #[serde(default)]
    pub annotator: String,
}

struct Shared {
    data_dir: PathBuf,
    allow_sim_oracle: bool,
    palette: Vec<PaletteEntry>,
    state: RwLock<QueueState>,
}

/// Handle to a loaded queue; cheap to clone.
#[derive(Clone)]
pub struct AnnotationService {
    shared: Arc<Shared>,
}

impl AnnotationService {
    /// Loads the manifests and rebuilds state by replaying `events.jsonl`.
    pub fn open(data_dir: impl AsRef<Path>, allow_sim_oracle: bool) -> Result<Self> {
        let data_dir = data_dir.as_ref().to_path_buf();
        let classes = read_meta(&data_dir)?;
        let manifests = AnnotationManifest::load_dir(data_dir.join("manifests"))?;
        let state = QueueState::replay(manifests, classes.len(), &data_dir.join(EVENTS_FILE))?;
        let palette = class_palette(classes.len())
            .iter()
            .zip(&classes)
            .enumerate()
            .map(|(id, (rgb, name))| PaletteEntry {
                id,
                name: name.clone(),
                color: format!("#{:02x}{:02x}{:02x}", rgb[0], rgb[1], rgb[2]),
            })
            .collect();
        Ok(Self { shared: Arc::new(Shared { data_dir, allow_sim_oracle, palette, state: RwLock::new(state) }) })
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, QueueState> {
        self.shared.state.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, QueueState> {
        self.shared.state.write().unwrap_or_else(|p| p.into_inner())
    }

    pub fn data_dir(&self) -> &Path {
        &self.shared.data_dir
    }

    pub fn progress(&self) -> Progress {
        let s = self.read();
        Progress { answered: s.answered_count(), pending: s.total() - s.answered_count(), total: s.total() }
    }

    /// Copy of the current state.
    pub fn snapshot(&self) -> QueueState {
        self.read().clone()
    }

    /// Highest-scoring pending request (ties by request id); read only.
    pub fn next_task(&self) -> Option<TaskView> {
        let s = self.read();
        s.next_pending().map(|r| TaskView {
            request_id: r.request_id.clone(),
            image_id: r.image_id.clone(),
            point: Point { x: r.x, y: r.y },
            patch_index: r.patch_index,
            image_png_url: format!("/v1/images/{}.png", r.image_id),
            classes: self.shared.palette.clone(),
        })
    }

    pub fn submit(&self, request_id: &str, class_id: u64, annotator: &str) -> Result<SubmitOutcome> {
        let event = LabelEvent {
            request_id: request_id.to_string(),
            class_id,
            annotator: annotator.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        let mut s = self.write();
        s.submit(event, &self.shared.data_dir.join(EVENTS_FILE))
    }

    /// Answers every pending request from `labels/`. Returns how many.
    pub fn run_oracle(&self) -> Result<usize> {
        if !self.shared.allow_sim_oracle {
            return Err(ServiceError::OracleDisabled);
        }
        let mut s = self.write();
        let pending = s.pending_requests();
        let mut truth: BTreeMap<String, DenseLabelMap> = BTreeMap::new();
        let mut events = Vec::with_capacity(pending.len());
        for r in pending {
            if !truth.contains_key(&r.image_id) {
                let path = self.shared.data_dir.join("labels").join(format!("{}.png", r.image_id));
                if !path.exists() {
                    return Err(ServiceError::MissingTruth(r.image_id.clone()));
                }
                truth.insert(r.image_id.clone(), read_label_png(&path)?);
            }
            let gt = &truth[&r.image_id];
            if r.x >= gt.width() || r.y >= gt.height() {
                return Err(ServiceError::MissingTruth(format!("{} at ({}, {})", r.image_id, r.x, r.y)));
            }
            events.push(LabelEvent {
                request_id: r.request_id.clone(),
                class_id: u64::from(gt.get(r.x, r.y)),
                annotator: SIM_ORACLE_ANNOTATOR.into(),
                timestamp: chrono::Utc::now().to_rfc3339(),
            });
        }
        let n = events.len();
        s.submit_batch(events, &self.shared.data_dir.join(EVENTS_FILE))?;
        tracing::info!(answered = n, "simulated oracle run");
        Ok(n)
    }

    /// Input manifests with `status`/`answer` filled from the log.
    pub fn answered_manifests(&self) -> Vec<AnnotationManifest> {
        self.read().answered_manifests()
    }

    /// Writes [`Self::answered_manifests`] to `out_dir`.
    pub fn export_answers(&self, out_dir: impl AsRef<Path>) -> Result<Vec<AnnotationManifest>> {
        let manifests = self.answered_manifests();
        for m in &manifests {
            m.save(out_dir.as_ref())?;
        }
        Ok(manifests)
    }

    fn image_bytes(&self, image_id: &str) -> Option<Vec<u8>> {
        if !self.read().has_image(image_id) {
            return None;
        }
        std::fs::read(self.shared.data_dir.join("images").join(format!("{image_id}.png"))).ok()
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/v1/tasks/next", get(next_handler))
            .route("/v1/tasks/{request_id}/label", post(label_handler))
            .route("/v1/progress", get(progress_handler))
            .route("/v1/images/{file}", get(image_handler))
            .route("/v1/oracle/run", post(oracle_handler))
            .with_state(self.clone())
    }
}

fn error_json(status: StatusCode, message: String, extra: Option<(&str, serde_json::Value)>) -> Response {
    let mut body = serde_json::json!({ "error": message });
    if let Some((k, v)) = extra {
        body[k] = v;
    }
    (status, Json(body)).into_response()
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::UnknownRequest(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict { .. } => StatusCode::CONFLICT,
            ServiceError::ClassOutOfRange { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::OracleDisabled => StatusCode::FORBIDDEN,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let extra = match &self {
            ServiceError::Conflict { existing, .. } => Some(("existing_class_id", serde_json::json!(existing))),
            _ => None,
        };
        error_json(status, self.to_string(), extra)
    }
}

async fn next_handler(State(svc): State<AnnotationService>) -> Response {
    match svc.next_task() {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn label_handler(
    State(svc): State<AnnotationService>,
    UrlPath(request_id): UrlPath<String>,
    Json(body): Json<LabelSubmission>,
) -> Response {
    match svc.submit(&request_id, body.class_id, &body.annotator) {
        Ok(_) => Json(serde_json::json!({ "status": "accepted" })).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn progress_handler(State(svc): State<AnnotationService>) -> Json<Progress> {
    Json(svc.progress())
}

async fn image_handler(State(svc): State<AnnotationService>, UrlPath(file): UrlPath<String>) -> Response {
    let Some(id) = file.strip_suffix(".png") else {
        return StatusCode::NOT_FOUND.into_response();
    };
    match svc.image_bytes(id) {
        Some(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn oracle_handler(State(svc): State<AnnotationService>) -> Response {
    match svc.run_oracle() {
        Ok(n) => Json(serde_json::json!({ "answered": n })).into_response(),
        Err(e) => e.into_response(),
    }
}

/// A server running on a background thread.
pub struct RunningService {
    pub addr: SocketAddr,
    pub service: AnnotationService,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl RunningService {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Graceful stop; waits for the server thread.
    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for RunningService {
    fn drop(&mut self) {
        self.halt();
    }
}

/// Opens the queue and serves it on `addr` (port 0 picks a free port).
pub fn spawn(data_dir: impl AsRef<Path>, addr: SocketAddr, allow_sim_oracle: bool) -> Result<RunningService> {
    let service = AnnotationService::open(data_dir, allow_sim_oracle)?;
    let router = service.router();
    let (tx_addr, rx_addr) = std::sync::mpsc::channel();
    let (tx_stop, rx_stop) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = match tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build() {
            Ok(rt) => rt,
            Err(e) => {
                let _ = tx_addr.send(Err(ServiceError::Runtime(e)));
                return;
            }
        };
        rt.block_on(async move {
            let listener = match tokio::net::TcpListener::bind(addr).await {
                Ok(l) => l,
                Err(source) => {
                    let _ = tx_addr.send(Err(ServiceError::Bind { addr, source }));
                    return;
                }
            };
            let local = listener.local_addr().expect("bound listener has an address");
            let _ = tx_addr.send(Ok(local));
            let _ = axum::serve(listener, router)
                .with_graceful_shutdown(async {
                    let _ = rx_stop.await;
                })
                .await;
        });
    });
    let bound = rx_addr
        .recv()
        .map_err(|_| ServiceError::Env("server thread exited before binding".into()))??;
    tracing::info!(%bound, "annotation service listening");
    Ok(RunningService { addr: bound, service, shutdown: Some(tx_stop), thread: Some(thread) })
}

/// Serves until Ctrl-C.
pub async fn serve(cfg: ServiceConfig) -> Result<()> {
    let service = AnnotationService::open(&cfg.data_dir, cfg.allow_sim_oracle)?;
    let addr = SocketAddr::from(([0, 0, 0, 0], cfg.port));
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind { addr, source })?;
    tracing::info!(%addr, data_dir = %cfg.data_dir.display(), "annotation service listening");
    axum::serve(listener, service.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|source| ServiceError::Io { path: cfg.data_dir.clone(), source })
}
