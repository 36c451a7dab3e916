//! HTTP service for the viewer.
//!
//! * `GET /tasks` lists the task index.
//! * `POST /edit` runs one intervention edit.
//! * `POST /sweep` runs a strength sweep.
//!
//! The service holds no per-request state. Errors are `{"error": "..."}`
//! with status 400 for bad requests, 404 for unknown tasks and 500 when
//! sampling fails.

use std::net::{Ipv4Addr, SocketAddr};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use velomask::{
    alpha_sweep, report, sample, Distance, EditTask, InterventionConfig, LatentGrid, Mask, Shape,
    DEFAULT_EPSILON,
};

use crate::commands::{strengths_or_default, single_edit_metrics, ModelSource, EDIT_TAU, SWEEP_TAU};
use crate::files::{load_index, load_task_dir, ConfigEcho, IndexEntry, MetricsJson};
use crate::{pgm, CliError, ServeArgs};

/// Everything a request can read.
pub struct AppState {
    pub source: ModelSource,
    pub index: Vec<IndexEntry>,
    pub tasks: Vec<EditTask>,
}

impl AppState {
    /// Loads the task directory and model named by `args`.
    pub fn load(args: &ServeArgs) -> Result<Self, CliError> {
        Ok(Self {
            source: ModelSource::load(&args.model)?,
            index: load_index(&args.tasks)?,
            tasks: load_task_dir(&args.tasks)?,
        })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/tasks", get(list_tasks))
        .route("/edit", post(edit))
        .route("/sweep", post(sweep))
        .with_state(state)
}

/// Serves on `127.0.0.1:port` until the process is stopped.
pub fn serve_blocking(args: &ServeArgs) -> Result<(), CliError> {
    let state = Arc::new(AppState::load(args)?);
    let runtime = tokio::runtime::Runtime::new()
        .map_err(|e| CliError::Runtime(format!("starting runtime: {e}")))?;
    runtime.block_on(async {
        let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, args.port));
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Runtime(format!("binding {addr}: {e}")))?;
        println!("serving {} tasks on http://{addr}", state.tasks.len());
        axum::serve(listener, router(state))
            .await
            .map_err(|e| CliError::Runtime(format!("server: {e}")))
    })
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message: message.into() }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        match e {
            CliError::Usage(m) => Self::bad_request(m),
            CliError::Runtime(message) => Self { status: StatusCode::INTERNAL_SERVER_ERROR, message },
        }
    }
}

impl From<velomask::Error> for ApiError {
    fn from(e: velomask::Error) -> Self {
        CliError::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

async fn list_tasks(State(state): State<Arc<AppState>>) -> Json<Vec<IndexEntry>> {
    Json(state.index.clone())
}

/// Sampler fields shared by both POST bodies; absent fields take the CLI
/// defaults.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub task_id: String,
    #[serde(rename = "T", default = "default_steps")]
    pub steps: usize,
    #[serde(rename = "N", default = "default_intervene")]
    pub intervene: usize,
    pub tau: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRequest {
    pub task_id: String,
    #[serde(rename = "T", default = "default_steps")]
    pub steps: usize,
    #[serde(rename = "N", default = "default_intervene")]
    pub intervene: usize,
    pub tau: Option<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    pub strengths: Option<Vec<f64>>,
    #[serde(default)]
    pub allow_extrapolation: bool,
}

fn default_steps() -> usize {
    6
}
fn default_intervene() -> usize {
    1
}
fn default_alpha() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

/// A grid in a response: flat row-major values plus a base64 PGM.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridJson {
    pub shape: Shape,
    pub values: Vec<f64>,
    pub pgm: String,
}

impl GridJson {
    fn new(grid: &LatentGrid) -> Self {
        Self {
            shape: grid.shape(),
            values: grid.as_slice().to_vec(),
            pgm: base64::engine::general_purpose::STANDARD.encode(pgm::encode(grid)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskJson {
    pub shape: Shape,
    pub high: Vec<bool>,
}

impl MaskJson {
    fn new(mask: &Mask) -> Self {
        Self { shape: mask.shape(), high: mask.as_slice().to_vec() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditResponse {
    pub task_id: String,
    pub config: ConfigEcho,
    pub image: GridJson,
    /// One map per intervened step, in sampling order.
    pub similarity_maps: Vec<GridJson>,
    pub masks: Vec<MaskJson>,
    pub metrics: MetricsJson,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResponse {
    pub task_id: String,
    pub config: ConfigEcho,
    pub strengths: Vec<f64>,
    /// One image per strength.
    pub images: Vec<GridJson>,
    pub metrics: MetricsJson,
    pub errors: Vec<String>,
}

fn find_task<'a>(state: &'a AppState, id: &str) -> Result<&'a EditTask, ApiError> {
    state.tasks.iter().find(|t| t.id == id).ok_or_else(|| ApiError {
        status: StatusCode::NOT_FOUND,
        message: format!("unknown task {id:?}"),
    })
}

fn config_of(steps: usize, intervene: usize, tau: f64, alpha: f64, epsilon: f64, seed: u64) -> Result<InterventionConfig, ApiError> {
    let config = InterventionConfig { steps, intervene, tau, alpha, epsilon, seed };
    config.validate()?;
    Ok(config)
}

async fn edit(
    State(state): State<Arc<AppState>>,
    body: Result<Json<EditRequest>, JsonRejection>,
) -> Result<Json<EditResponse>, ApiError> {
    let Json(req) = body?;
    let task = find_task(&state, &req.task_id)?;
    let config = config_of(req.steps, req.intervene, req.tau.unwrap_or(EDIT_TAU), req.alpha, req.epsilon, req.seed)?;
    let model = state.source.for_task(task)?;
    let traj = sample(&model, &task.x_orig, &task.condition(), &config)?;
    let mut errors = Vec::new();
    let metrics = single_edit_metrics(task, traj.output(), config.alpha, &mut errors)?;
    Ok(Json(EditResponse {
        task_id: task.id.clone(),
        config: config.into(),
        image: GridJson::new(traj.output()),
        similarity_maps: traj.similarity_maps.iter().map(|s| GridJson::new(s.values())).collect(),
        masks: traj.masks.iter().map(|m| MaskJson::new(&m.high)).collect(),
        metrics,
        errors,
    }))
}

async fn sweep(
    State(state): State<Arc<AppState>>,
    body: Result<Json<SweepRequest>, JsonRejection>,
) -> Result<Json<SweepResponse>, ApiError> {
    let Json(req) = body?;
    let task = find_task(&state, &req.task_id)?;
    let strengths = strengths_or_default(req.strengths.as_deref(), req.allow_extrapolation)?;
    let tau = req.tau.unwrap_or(SWEEP_TAU);
    let config = config_of(req.steps, req.intervene, tau, strengths[0], req.epsilon, req.seed)?;
    let model = state.source.for_task(task)?;
    let (_, sweep) = alpha_sweep(&model, task, &config, &strengths)?;
    let r = report(task, &sweep, &Distance::L2)?;
    let mut errors = Vec::new();
    let metrics = MetricsJson::from_report(&r, &mut errors);
    Ok(Json(SweepResponse {
        task_id: task.id.clone(),
        config: ConfigEcho { alpha: None, ..config.into() },
        strengths,
        images: sweep.edited().iter().map(GridJson::new).collect(),
        metrics,
        errors,
    }))
}
