//! HTTP backend of the dual-view annotation tool. Serves the expert split of
//! a generated dataset as two-view tasks, records submitted screw poses in an
//! append-only store and scores them against the hidden ground truth.

pub mod error;
pub mod scoring;
pub mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use drrpose::experiments::{Dataset, EXPERT};
use drrpose::phantom::ScrewModel;
use drrpose::renderer::{encode_png8, window_to_8bit};
use drrpose::{ImagePose, ProjectionGeometry, Vec3, WorldPose};
use serde::{Deserialize, Serialize};

pub use error::{ServiceError, ServiceResult};
use scoring::{score, ScoringView, ViewErrors};
pub use store::{AnnotationRecord, Store};

/// Identifier of the only screw model a dataset carries.
pub const SCREW_MODEL_ID: &str = "default";

/// `Study` withholds errors until the annotator closes the session;
/// `Practice` returns them with every submission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Study,
    Practice,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "study" => Ok(Mode::Study),
            "practice" => Ok(Mode::Practice),
            _ => Err(format!("unknown mode `{s}` (expected study or practice)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub dataset_dir: PathBuf,
    pub store_path: PathBuf,
    pub mode: Mode,
}

#[derive(Debug, Clone)]
struct ViewEntry {
    image_id: String,
    angle_deg: f64,
    geometry: ProjectionGeometry,
    truth: ImagePose,
}

#[derive(Debug, Clone)]
struct TaskEntry {
    id: String,
    truth: WorldPose,
    views: Vec<ViewEntry>,
}

impl TaskEntry {
    fn scoring_views(&self) -> Vec<ScoringView<'_>> {
        self.views
            .iter()
            .map(|v| ScoringView {
                image_id: &v.image_id,
                geometry: &v.geometry,
                truth: &v.truth,
            })
            .collect()
    }
}

#[derive(Debug)]
struct Expert {
    tasks: Vec<TaskEntry>,
    png: HashMap<String, Vec<u8>>,
}

struct Inner {
    mode: Mode,
    screw: ScrewModel,
    expert: Option<Expert>,
    store: Store,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Opens the dataset and the store and pre-encodes every expert image.
    /// A dataset without an expert split still starts; task routes then 404.
    pub fn load(cfg: &ServiceConfig) -> drrpose::Result<Self> {
        let dataset = Dataset::open(&cfg.dataset_dir)?;
        let store = Store::open(&cfg.store_path)?;
        let (expert, screw) = match dataset.split(EXPERT) {
            Ok(split) if !split.tasks.is_empty() => {
                let mut png = HashMap::new();
                for rec in &split.images {
                    let img = dataset.load_image(split, rec)?;
                    let (lo, hi) = img
                        .pixels
                        .iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &p| (a.min(p as f64), b.max(p as f64)));
                    let bytes = encode_png8(img.width, img.height, &window_to_8bit(&img, lo, hi.max(lo + 1e-9)))?;
                    png.insert(rec.id.clone(), bytes);
                }
                let mut tasks = Vec::with_capacity(split.tasks.len());
                for t in &split.tasks {
                    let views = t
                        .images
                        .iter()
                        .map(|id| {
                            let rec = split
                                .find(id)
                                .ok_or_else(|| drrpose::Error::Format(format!("task {} names unknown image {id}", t.id)))?;
                            Ok(ViewEntry {
                                image_id: id.clone(),
                                angle_deg: split.views[rec.view].angle_deg,
                                geometry: split.geometry(rec).clone(),
                                truth: rec.image_pose,
                            })
                        })
                        .collect::<drrpose::Result<Vec<_>>>()?;
                    tasks.push(TaskEntry {
                        id: t.id.clone(),
                        truth: t.world_pose,
                        views,
                    });
                }
                (Some(Expert { tasks, png }), split.screw.clone())
            }
            _ => (None, ScrewModel::default()),
        };
        log::info!(
            "serving {} tasks in {:?} mode, store {}",
            expert.as_ref().map_or(0, |e| e.tasks.len()),
            cfg.mode,
            store.path().display()
        );
        Ok(AppState(Arc::new(Inner {
            mode: cfg.mode,
            screw,
            expert,
            store,
        })))
    }

    fn expert(&self) -> ServiceResult<&Expert> {
        self.0
            .expert
            .as_ref()
            .ok_or_else(|| ServiceError::NotFound("dataset has no expert split".into()))
    }

    fn task(&self, id: &str) -> ServiceResult<&TaskEntry> {
        self.expert()?
            .tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| ServiceError::NotFound(format!("no task `{id}`")))
    }

    pub fn store(&self) -> &Store {
        &self.0.store
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/tasks", get(list_tasks))
        .route("/api/tasks/{id}", get(get_task))
        .route("/api/tasks/{id}/annotations", post(submit))
        .route("/api/tasks/{id}/reference", get(reference))
        .route("/api/images/{file}", get(image_png))
        .route("/api/screw/{id}", get(screw))
        .route("/api/results.csv", get(results_csv))
        .route("/api/session/close", post(close_session))
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(cfg: &ServiceConfig, addr: SocketAddr) -> drrpose::Result<()> {
    let app = router(AppState::load(cfg)?);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| drrpose::Error::Format(format!("cannot bind {addr}: {e}")))?;
    log::info!("listening on {addr}");
    axum::serve(listener, app)
        .await
        .map_err(|e| drrpose::Error::Format(format!("server error: {e}")))
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Default, Deserialize)]
pub struct AnnotatorQuery {
    pub annotator: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Pending,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub id: String,
    pub status: TaskStatus,
    pub attempts: usize,
}

async fn attempts_of(state: &AppState, annotator: Option<&str>) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    if let Some(who) = annotator {
        for r in state.store().records().await.iter().filter(|r| r.annotator == who) {
            *out.entry(r.task_id.clone()).or_default() += 1;
        }
    }
    out
}

fn status_of(attempts: usize) -> TaskStatus {
    if attempts > 0 {
        TaskStatus::Done
    } else {
        TaskStatus::Pending
    }
}

async fn list_tasks(State(state): State<AppState>, Query(q): Query<AnnotatorQuery>) -> ServiceResult<Json<Vec<TaskSummary>>> {
    let expert = state.expert()?;
    let attempts = attempts_of(&state, q.annotator.as_deref()).await;
    Ok(Json(
        expert
            .tasks
            .iter()
            .map(|t| {
                let n = attempts.get(&t.id).copied().unwrap_or(0);
                TaskSummary {
                    id: t.id.clone(),
                    status: status_of(n),
                    attempts: n,
                }
            })
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub view: usize,
    pub image_id: String,
    pub image_url: String,
    pub angle_deg: f64,
    pub geometry: ProjectionGeometry,
}

/// Everything the client needs to draw a task; carries no ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub id: String,
    pub screw_model: String,
    pub status: TaskStatus,
    pub views: Vec<TaskView>,
}

async fn get_task(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<AnnotatorQuery>,
) -> ServiceResult<Json<AnnotationTask>> {
    let t = state.task(&id)?;
    let n = attempts_of(&state, q.annotator.as_deref()).await.get(&id).copied().unwrap_or(0);
    Ok(Json(AnnotationTask {
        id: t.id.clone(),
        screw_model: SCREW_MODEL_ID.into(),
        status: status_of(n),
        views: t
            .views
            .iter()
            .enumerate()
            .map(|(i, v)| TaskView {
                view: i,
                image_id: v.image_id.clone(),
                image_url: format!("/api/images/{}.png", v.image_id),
                angle_deg: v.angle_deg,
                geometry: v.geometry.clone(),
            })
            .collect(),
    }))
}

async fn image_png(State(state): State<AppState>, Path(file): Path<String>) -> ServiceResult<impl IntoResponse> {
    let id = file
        .strip_suffix(".png")
        .ok_or_else(|| ServiceError::NotFound(format!("no image `{file}`")))?;
    let bytes = state
        .expert()?
        .png
        .get(id)
        .ok_or_else(|| ServiceError::NotFound(format!("no image `{file}`")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes.clone()))
}

/// Screw outline in local coordinates: `x` along the axis from the head
/// point, `y` across it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrewGeometry {
    pub id: String,
    pub outline: Vec<[f64; 2]>,
    pub shaft_length: f64,
    pub shaft_radius: f64,
    pub head_length: f64,
    pub head_radius: f64,
}

async fn screw(State(state): State<AppState>, Path(id): Path<String>) -> ServiceResult<Json<ScrewGeometry>> {
    if id != SCREW_MODEL_ID {
        return Err(ServiceError::NotFound(format!("no screw model `{id}`")));
    }
    let s = &state.0.screw;
    Ok(Json(ScrewGeometry {
        id,
        outline: s.outline(),
        shaft_length: s.shaft_length,
        shaft_radius: s.shaft_radius,
        head_length: s.head_length,
        head_radius: s.head_radius,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseInput {
    pub origin: [f64; 3],
    pub axis: [f64; 3],
    #[serde(default)]
    pub roll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub annotator: String,
    #[serde(default)]
    pub attempt: Option<u32>,
    pub pose: PoseInput,
    #[serde(default)]
    pub started_at_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewResult {
    pub view: usize,
    pub image_id: String,
    pub image_pose: ImagePose,
    /// Absent while a study session is open.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub errors: Option<ViewErrors>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordResponse {
    pub task_id: String,
    pub annotator: String,
    pub attempt: u32,
    pub pose: WorldPose,
    pub started_at_ms: Option<u64>,
    pub submitted_at_ms: u64,
    pub views: Vec<ViewResult>,
}

fn response_of(r: &AnnotationRecord, with_errors: bool) -> RecordResponse {
    RecordResponse {
        task_id: r.task_id.clone(),
        annotator: r.annotator.clone(),
        attempt: r.attempt,
        pose: r.pose,
        started_at_ms: r.started_at_ms,
        submitted_at_ms: r.submitted_at_ms,
        views: r
            .views
            .iter()
            .map(|v| ViewResult {
                view: v.view,
                image_id: v.image_id.clone(),
                image_pose: v.image_pose,
                errors: with_errors.then_some(v.errors),
            })
            .collect(),
    }
}

fn check_annotator(a: &str) -> ServiceResult<()> {
    if a.trim().is_empty() || a.len() > 64 || a.chars().any(|c| c.is_control()) {
        return Err(ServiceError::BadRequest("annotator must be 1 to 64 printable characters".into()));
    }
    Ok(())
}

async fn errors_visible(state: &AppState, annotator: &str) -> bool {
    state.0.mode == Mode::Practice || state.store().is_closed(annotator).await
}

async fn submit(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<Submission>, JsonRejection>,
) -> ServiceResult<Json<RecordResponse>> {
    let Json(sub) = body.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    let task = state.task(&id)?;
    check_annotator(&sub.annotator)?;
    let p = sub.pose;
    let pose = WorldPose::new(Vec3::from(p.origin), Vec3::from(p.axis), p.roll)
        .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let views = score(&pose, &task.truth, &task.scoring_views())
        .map_err(|e| ServiceError::BadRequest(format!("pose cannot be traced in every view: {e}")))?;
    let submitted_at_ms = now_ms();
    let rec = state
        .store()
        .insert(
            |attempt| AnnotationRecord {
                task_id: id.clone(),
                annotator: sub.annotator.clone(),
                attempt,
                pose,
                started_at_ms: sub.started_at_ms,
                submitted_at_ms,
                views,
            },
            &id,
            &sub.annotator,
            sub.attempt,
        )
        .await?
        .ok_or_else(|| {
            ServiceError::Conflict(format!(
                "attempt {} of task {id} already recorded for {}",
                sub.attempt.unwrap_or_default(),
                sub.annotator
            ))
        })?;
    let visible = errors_visible(&state, &rec.annotator).await;
    Ok(Json(response_of(&rec, visible)))
}

/// Ground truth of a task, for the client's overlay self-test. Available in
/// practice mode, and in study mode once the annotator's session is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub task_id: String,
    pub world_pose: WorldPose,
    pub image_poses: Vec<ImagePose>,
}

async fn reference(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<AnnotatorQuery>,
) -> ServiceResult<Json<Reference>> {
    let task = state.task(&id)?;
    let allowed = match (state.0.mode, q.annotator.as_deref()) {
        (Mode::Practice, _) => true,
        (Mode::Study, Some(a)) => state.store().is_closed(a).await,
        (Mode::Study, None) => false,
    };
    if !allowed {
        return Err(ServiceError::Forbidden("ground truth is hidden until the session is closed".into()));
    }
    Ok(Json(Reference {
        task_id: task.id.clone(),
        world_pose: task.truth,
        image_poses: task.views.iter().map(|v| v.truth).collect(),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloseRequest {
    pub annotator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub annotator: String,
    pub records: Vec<RecordResponse>,
}

async fn close_session(
    State(state): State<AppState>,
    body: Result<Json<CloseRequest>, JsonRejection>,
) -> ServiceResult<Json<SessionSummary>> {
    let Json(req) = body.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    check_annotator(&req.annotator)?;
    state.store().close(&req.annotator, now_ms()).await?;
    let records = state
        .store()
        .records()
        .await
        .iter()
        .filter(|r| r.annotator == req.annotator)
        .map(|r| response_of(r, true))
        .collect();
    Ok(Json(SessionSummary {
        annotator: req.annotator,
        records,
    }))
}

pub const RESULTS_HEADER: [&str; 10] = [
    "task_id",
    "annotator",
    "attempt",
    "view",
    "image_id",
    "pos_err_mm",
    "fwd_angle_err_deg",
    "tilt_gt_deg",
    "started_at_ms",
    "submitted_at_ms",
];

/// One row per scored view. In study mode only closed sessions are listed.
pub fn results_table(records: &[AnnotationRecord], include: impl Fn(&AnnotationRecord) -> bool) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER).expect("in-memory csv");
    for r in records.iter().filter(|r| include(r)) {
        for v in &r.views {
            w.write_record([
                r.task_id.clone(),
                r.annotator.clone(),
                r.attempt.to_string(),
                v.view.to_string(),
                v.image_id.clone(),
                v.errors.position_error_mm.to_string(),
                v.errors.forward_angle_error_deg.to_string(),
                v.errors.tilt_gt_deg.to_string(),
                r.started_at_ms.map(|t| t.to_string()).unwrap_or_default(),
                r.submitted_at_ms.to_string(),
            ])
            .expect("in-memory csv");
        }
    }
    w.into_inner().expect("in-memory csv")
}

async fn results_csv(State(state): State<AppState>) -> impl IntoResponse {
    let records = state.store().records().await;
    let closed = state.store().closed().await;
    let mode = state.0.mode;
    let body = results_table(&records, |r| mode == Mode::Practice || closed.contains(&r.annotator));
    ([(header::CONTENT_TYPE, "text/csv")], body)
}
