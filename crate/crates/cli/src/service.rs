//! HTTP inspection service.
//!
//! Uploaded boards become jobs that run on a small blocking worker pool.
//! Finished reports stay in memory together with their normalized maps, so
//! the inspector can move the threshold slider without any model work.
//!
//! | route | |
//! |---|---|
//! | `GET  /api/health` | version, loaded regions, backbone |
//! | `GET  /api/regions` | loaded bundles and their geometry |
//! | `POST /api/boards` | multipart upload, field `image` |
//! | `GET  /api/jobs/{job_id}` | job state |
//! | `GET  /api/boards/{id}/report?threshold=` | JSON report |
//! | `GET  /api/boards/{id}/overlay.png?threshold=` | board with red outlines |
//! | `GET  /api/boards/{id}/board.png` | the registered board |
//! | `GET  /api/boards/{id}/regions/{region}/map` | raw `AMAP` map bytes |
//! | `POST /api/boards/{id}/verdicts` | inspector decision, appended to the audit log |

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use log::{error, info};
use pcb_sentinel_core::imaging::decode_raster;
use pcb_sentinel_core::partition::RegionGrid;
use pcb_sentinel_core::pipeline::BoardReport;
use pcb_sentinel_core::{Error, FeatureExtractor, ModelBundle, Raster};
use serde::{Deserialize, Serialize};
use tokio::io::AsyncWriteExt;
use tokio::sync::Semaphore;
use tower_http::services::ServeDir;
use uuid::Uuid;

use crate::config::Config;
use crate::workflow::{self, RegistrationSummary};

pub const AUDIT_LOG: &str = "verdicts.ndjson";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Register,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub board_id: String,
    /// Stage the job is in, or ended in.
    pub kind: JobKind,
    pub state: JobState,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    /// Report URL once done.
    pub result_ref: Option<String>,
    pub error: Option<String>,
}

/// Inspector decision on a region or a whole board.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Unreviewed,
    ConfirmedModification,
    FalseAlarm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRequest {
    /// Whole board when absent.
    #[serde(default)]
    pub region_id: Option<String>,
    pub verdict: Verdict,
    #[serde(default)]
    pub inspector: Option<String>,
    #[serde(default)]
    pub note: Option<String>,
    /// Threshold the inspector was looking at.
    #[serde(default)]
    pub threshold: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub recorded_at: DateTime<Utc>,
    pub board_id: String,
    pub job_id: String,
    #[serde(flatten)]
    pub verdict: VerdictRequest,
}

struct BoardEntry {
    job_id: String,
    grid: RegionGrid,
    board: Raster,
    report: BoardReport,
    registration: Option<RegistrationSummary>,
}

pub struct ServiceState {
    cfg: Config,
    models: Arc<BTreeMap<String, ModelBundle>>,
    extractor: Arc<FeatureExtractor>,
    reference: Option<Arc<Raster>>,
    /// Grid fixed by the config or the reference image, if any.
    fixed_grid: Option<RegionGrid>,
    jobs: Mutex<HashMap<String, JobRecord>>,
    board_jobs: Mutex<HashMap<String, String>>,
    boards: Mutex<HashMap<String, Arc<BoardEntry>>>,
    workers: Semaphore,
    audit_path: PathBuf,
    audit_lock: tokio::sync::Mutex<()>,
}

impl ServiceState {
    /// Loads every bundle and checks that each is calibrated and, when the
    /// board size is known up front, that the grid is fully covered.
    pub fn new(cfg: Config, extractor: FeatureExtractor) -> anyhow::Result<ServiceState> {
        let models = workflow::load_all_models(&cfg.models_dir)?;
        if models.is_empty() {
            anyhow::bail!("no model bundles under {}", cfg.models_dir.display());
        }
        if let Some(b) = models.values().find(|b| b.norm_range.is_none()) {
            return Err(Error::UncalibratedModel {
                region_id: b.region_id.clone(),
            }
            .into());
        }
        let reference = workflow::load_reference(&cfg)?;
        let kind = cfg.dataset.as_ref().map(|d| d.kind);
        let fixed_grid = match (&reference, cfg.grid.board_w, cfg.grid.board_h) {
            (_, Some(w), Some(h)) => Some(workflow::grid_for(&cfg, kind, (w, h))?),
            (Some(r), _, _) => Some(workflow::grid_for(&cfg, kind, (r.width(), r.height()))?),
            _ => None,
        };
        if let Some(g) = &fixed_grid {
            if let Some(s) = g
                .regions
                .iter()
                .find(|s| !models.contains_key(&s.region_id))
            {
                return Err(Error::MissingModel {
                    region_id: s.region_id.clone(),
                }
                .into());
            }
        }
        let work_dir = cfg.work_dir();
        std::fs::create_dir_all(&work_dir)
            .with_context(|| format!("creating {}", work_dir.display()))?;
        info!(
            "{} bundle(s), backbone {}, {} worker(s)",
            models.len(),
            extractor.source(),
            cfg.service.workers
        );
        Ok(ServiceState {
            workers: Semaphore::new(cfg.service.workers),
            audit_path: work_dir.join(AUDIT_LOG),
            cfg,
            models: Arc::new(models),
            extractor: Arc::new(extractor),
            reference: reference.map(Arc::new),
            fixed_grid,
            jobs: Mutex::default(),
            board_jobs: Mutex::default(),
            boards: Mutex::default(),
            audit_lock: tokio::sync::Mutex::new(()),
        })
    }

    fn update_job(&self, job_id: &str, f: impl FnOnce(&mut JobRecord)) {
        if let Some(j) = self.jobs.lock().unwrap().get_mut(job_id) {
            f(j);
            j.updated_at = Utc::now();
        }
    }

    fn job(&self, job_id: &str) -> Option<JobRecord> {
        self.jobs.lock().unwrap().get(job_id).cloned()
    }

    /// The finished board, or why it is not available.
    fn finished(&self, board_id: &str) -> Result<Arc<BoardEntry>, ApiError> {
        if let Some(b) = self.boards.lock().unwrap().get(board_id) {
            return Ok(b.clone());
        }
        let job_id = self
            .board_jobs
            .lock()
            .unwrap()
            .get(board_id)
            .cloned()
            .ok_or_else(|| {
                ApiError::new(StatusCode::NOT_FOUND, format!("unknown board {board_id}"))
            })?;
        let job = self
            .job(&job_id)
            .expect("board jobs are registered together");
        Err(match job.state {
            JobState::Failed => ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                job.error.unwrap_or_else(|| "job failed".into()),
            ),
            _ => ApiError::new(
                StatusCode::CONFLICT,
                format!("job {job_id} is still {:?}", job.state).to_lowercase(),
            ),
        })
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, message)
    }
}

/// Status for a pipeline failure: caller mistakes are 400, boards that cannot
/// be processed are 422, anything else is ours.
pub fn status_for(e: &anyhow::Error) -> StatusCode {
    match e.downcast_ref::<Error>() {
        Some(
            Error::Argument(_) | Error::Format(_) | Error::Shape(_) | Error::ShapeMismatch { .. },
        ) => StatusCode::BAD_REQUEST,
        Some(
            Error::InsufficientFeatures { .. }
            | Error::NoConsensus { .. }
            | Error::DegenerateConfiguration
            | Error::RegistrationQuality { .. }
            | Error::MissingModel { .. },
        ) => StatusCode::UNPROCESSABLE_ENTITY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<anyhow::Error> for ApiError {
    fn from(e: anyhow::Error) -> Self {
        ApiError::new(status_for(&e), format!("{e:#}"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            error!("{}", self.message);
        }
        (
            self.status,
            Json(serde_json::json!({ "error": self.message })),
        )
            .into_response()
    }
}

type Shared = Arc<ServiceState>;

pub fn router(state: Shared) -> Router {
    let limit = state.cfg.service.max_upload;
    let static_dir = state.cfg.service.static_dir.clone();
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/regions", get(regions))
        .route("/api/boards", post(upload))
        .route("/api/jobs/{job_id}", get(job))
        .route("/api/boards/{board_id}/report", get(report))
        .route("/api/boards/{board_id}/overlay.png", get(overlay))
        .route("/api/boards/{board_id}/board.png", get(board_png))
        .route(
            "/api/boards/{board_id}/regions/{region_id}/map",
            get(region_map),
        )
        .route("/api/boards/{board_id}/verdicts", post(verdict))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(cfg: Config, extractor: FeatureExtractor) -> anyhow::Result<()> {
    let bind = cfg.service.bind.clone();
    let state = Arc::new(ServiceState::new(cfg, extractor)?);
    let listener = tokio::net::TcpListener::bind(&bind)
        .await
        .with_context(|| format!("binding {bind}"))?;
    info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

async fn health(State(s): State<Shared>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "regions": s.models.keys().collect::<Vec<_>>(),
        "backbone": s.extractor.source().to_string(),
        "backbone_hash": s.extractor.weights_hash(),
        "registration": s.reference.is_some(),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RegionInfo {
    pub region_id: String,
    /// Board-space placement, known only when the board size is fixed.
    pub x0: Option<usize>,
    pub y0: Option<usize>,
    pub side: Option<usize>,
    pub input_side: usize,
    pub norm_range: Option<(f32, f32)>,
    pub operating_threshold: Option<f32>,
}

async fn regions(State(s): State<Shared>) -> Json<Vec<RegionInfo>> {
    Json(
        s.models
            .values()
            .map(|b| {
                let spec = s.fixed_grid.as_ref().and_then(|g| g.get(&b.region_id));
                RegionInfo {
                    region_id: b.region_id.clone(),
                    x0: spec.map(|r| r.x0),
                    y0: spec.map(|r| r.y0),
                    side: spec.map(|r| r.side),
                    input_side: b.config().input_side,
                    norm_range: b.norm_range,
                    operating_threshold: b.operating_threshold,
                }
            })
            .collect(),
    )
}

fn valid_board_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UploadResponse {
    pub job_id: String,
    pub board_id: String,
}

async fn upload(
    State(s): State<Shared>,
    mut form: Multipart,
) -> Result<(StatusCode, Json<UploadResponse>), ApiError> {
    let mut bytes: Option<Bytes> = None;
    let mut board_id: Option<String> = None;
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(format!("malformed multipart body: {e}")))?
    {
        match field.name() {
            Some("image") => {
                bytes = Some(
                    field
                        .bytes()
                        .await
                        .map_err(|e| ApiError::bad_request(e.to_string()))?,
                )
            }
            Some("board_id") => {
                board_id = Some(
                    field
                        .text()
                        .await
                        .map_err(|e| ApiError::bad_request(e.to_string()))?,
                )
            }
            _ => {}
        }
    }
    let bytes = bytes.ok_or_else(|| ApiError::bad_request("missing multipart field `image`"))?;
    let img = decode_raster(&bytes)
        .map_err(|e| ApiError::bad_request(format!("not a readable image: {e}")))?;
    let board_id = board_id.unwrap_or_else(|| Uuid::new_v4().to_string());
    if !valid_board_id(&board_id) {
        return Err(ApiError::bad_request(
            "board_id may only contain letters, digits, '-', '_' and '.'",
        ));
    }
    let job_id = Uuid::new_v4().to_string();
    {
        let mut board_jobs = s.board_jobs.lock().unwrap();
        if board_jobs.contains_key(&board_id) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("board {board_id} already exists"),
            ));
        }
        board_jobs.insert(board_id.clone(), job_id.clone());
    }
    let now = Utc::now();
    s.jobs.lock().unwrap().insert(
        job_id.clone(),
        JobRecord {
            job_id: job_id.clone(),
            board_id: board_id.clone(),
            kind: if s.reference.is_some() {
                JobKind::Register
            } else {
                JobKind::Infer
            },
            state: JobState::Queued,
            created_at: now,
            updated_at: now,
            result_ref: None,
            error: None,
        },
    );
    tokio::spawn(run_job(s.clone(), job_id.clone(), board_id.clone(), img));
    Ok((
        StatusCode::ACCEPTED,
        Json(UploadResponse { job_id, board_id }),
    ))
}

async fn run_job(s: Shared, job_id: String, board_id: String, img: Raster) {
    let _permit = s
        .workers
        .acquire()
        .await
        .expect("the semaphore is never closed");
    s.update_job(&job_id, |j| j.state = JobState::Running);
    let worker = s.clone();
    let (jid, bid) = (job_id.clone(), board_id.clone());
    let outcome = tokio::task::spawn_blocking(move || -> anyhow::Result<BoardEntry> {
        let s = worker;
        let prepared = workflow::prepare_board(&s.cfg, s.reference.as_deref(), img)?;
        s.update_job(&jid, |j| j.kind = JobKind::Infer);
        let board = prepared.board;
        let grid = match &s.fixed_grid {
            Some(g) => g.clone(),
            None => workflow::grid_for(
                &s.cfg,
                s.cfg.dataset.as_ref().map(|d| d.kind),
                (board.width(), board.height()),
            )?,
        };
        let report = workflow::infer_prepared(&bid, &board, &grid, &s.models, &s.extractor, None)?;
        Ok(BoardEntry {
            job_id: jid,
            grid,
            board,
            report,
            registration: prepared.registration,
        })
    })
    .await
    .unwrap_or_else(|e| Err(anyhow::anyhow!("worker panicked: {e}")));
    match outcome {
        Ok(entry) => {
            info!(
                "board {board_id}: {} region(s) flagged",
                entry.report.verdicts.iter().filter(|v| v.detected).count()
            );
            s.boards
                .lock()
                .unwrap()
                .insert(board_id.clone(), Arc::new(entry));
            s.update_job(&job_id, |j| {
                j.state = JobState::Done;
                j.result_ref = Some(format!("/api/boards/{board_id}/report"));
            });
        }
        Err(e) => {
            error!("board {board_id}: {e:#}");
            s.update_job(&job_id, |j| {
                j.state = JobState::Failed;
                j.error = Some(format!("{e:#}"));
            });
        }
    }
}

async fn job(
    State(s): State<Shared>,
    Path(job_id): Path<String>,
) -> Result<Json<JobRecord>, ApiError> {
    s.job(&job_id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job {job_id}")))
}

#[derive(Debug, Deserialize)]
pub struct ThresholdQuery {
    pub threshold: Option<f32>,
}

/// The stored report, re-binarized when a threshold is given.
fn thresholded(entry: &BoardEntry, threshold: Option<f32>) -> Result<BoardReport, ApiError> {
    match threshold {
        None => Ok(entry.report.clone()),
        Some(t) if (0.0..=1.0).contains(&t) => Ok(entry.report.rethreshold(&entry.grid, t)?),
        Some(t) => Err(ApiError::bad_request(format!(
            "threshold {t} outside [0, 1]"
        ))),
    }
}

#[derive(Serialize)]
struct ReportBody<'a> {
    job_id: &'a str,
    #[serde(flatten)]
    report: BoardReport,
    board_w: usize,
    board_h: usize,
    regions: &'a [pcb_sentinel_core::partition::RegionSpec],
    registration: &'a Option<RegistrationSummary>,
}

async fn report(
    State(s): State<Shared>,
    Path(board_id): Path<String>,
    Query(q): Query<ThresholdQuery>,
) -> Result<Response, ApiError> {
    let entry = s.finished(&board_id)?;
    let report = thresholded(&entry, q.threshold)?;
    Ok(Json(ReportBody {
        job_id: &entry.job_id,
        report,
        board_w: entry.grid.board_w,
        board_h: entry.grid.board_h,
        regions: &entry.grid.regions,
        registration: &entry.registration,
    })
    .into_response())
}

async fn overlay(
    State(s): State<Shared>,
    Path(board_id): Path<String>,
    Query(q): Query<ThresholdQuery>,
) -> Result<Response, ApiError> {
    let entry = s.finished(&board_id)?;
    let report = thresholded(&entry, q.threshold)?;
    let mask = report
        .board_mask
        .as_ref()
        .expect("assembled reports carry a mask");
    let png = workflow::overlay_png(&entry.board, mask)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

/// The board as scored, after registration.
async fn board_png(
    State(s): State<Shared>,
    Path(board_id): Path<String>,
) -> Result<Response, ApiError> {
    let entry = s.finished(&board_id)?;
    let png = pcb_sentinel_core::imaging::encode_png(&entry.board.to_dynamic())?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn region_map(
    State(s): State<Shared>,
    Path((board_id, region_id)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let entry = s.finished(&board_id)?;
    let map = entry
        .report
        .verdicts
        .iter()
        .find(|v| v.region_id == region_id)
        .and_then(|v| v.anomaly_map.as_ref())
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                format!("no region {region_id} on board {board_id}"),
            )
        })?;
    Ok((
        [(header::CONTENT_TYPE, "application/octet-stream")],
        map.to_bytes(),
    )
        .into_response())
}

async fn verdict(
    State(s): State<Shared>,
    Path(board_id): Path<String>,
    Json(req): Json<VerdictRequest>,
) -> Result<(StatusCode, Json<AuditEntry>), ApiError> {
    let entry = s.finished(&board_id)?;
    if let Some(r) = &req.region_id {
        if entry.grid.get(r).is_none() {
            return Err(ApiError::bad_request(format!(
                "no region {r} on board {board_id}"
            )));
        }
    }
    if let Some(t) = req.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(ApiError::bad_request(format!(
                "threshold {t} outside [0, 1]"
            )));
        }
    }
    let record = AuditEntry {
        recorded_at: Utc::now(),
        board_id,
        job_id: entry.job_id.clone(),
        verdict: req,
    };
    let mut line = serde_json::to_string(&record).map_err(anyhow::Error::from)?;
    line.push('\n');
    let _guard = s.audit_lock.lock().await;
    let mut f = tokio::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&s.audit_path)
        .await
        .with_context(|| format!("opening {}", s.audit_path.display()))?;
    f.write_all(line.as_bytes())
        .await
        .context("appending to the audit log")?;
    f.flush().await.context("appending to the audit log")?;
    Ok((StatusCode::CREATED, Json(record)))
}
