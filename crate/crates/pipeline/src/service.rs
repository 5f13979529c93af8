//! HTTP service for the annotation front end.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/asset/views` | four base64 PNGs plus depth links for the loaded asset |
//! | GET | `/asset/views/{i}/depth` | raw depth frame, see [`encode_depth_frame`] |
//! | POST | `/drags` | validate a DragSet and project it onto the asset views |
//! | POST | `/runs` | queue a pipeline run |
//! | GET | `/runs/{id}` | status, status history and manifest |
//! | GET | `/runs/{id}/artifacts/{name}` | any file listed in the run manifest |
//!
//! Runs execute one at a time on a single background worker, in
//! submission order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use splatdrag_core::asset::load_asset;
use splatdrag_core::render::render_rig;
use splatdrag_core::views::encode_png;
use splatdrag_core::{DragSet, MultiViewImageSet, ViewImage};
use tokio::sync::mpsc;

use crate::config::RunConfig;
use crate::error::{PipelineError, Result};
use crate::manifest::RunManifest;
use crate::run::run_pipeline_with;
use crate::stages;

/// Environment variable naming the directory that holds run outputs.
pub const ARTIFACT_ROOT_ENV: &str = "SPLATDRAG_ARTIFACT_ROOT";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub artifact_root: PathBuf,
    /// Asset rendered for `/asset/views` and used by runs that name none.
    pub asset: Option<PathBuf>,
    /// Defaults under each submitted run config.
    pub base: RunConfig,
}

/// JSON header of a depth frame. Depth is camera-space z per pixel,
/// row-major, `+inf` on background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthHeader {
    pub dtype: String,
    pub byte_order: String,
    /// `[rows, columns]`.
    pub shape: [usize; 2],
    pub view: usize,
    pub azimuth: f64,
}

/// Frame layout: header length as little-endian u32, the UTF-8 JSON
/// header, then `rows * columns` little-endian f32 values.
pub fn encode_depth_frame(view: usize, azimuth: f64, image: &ViewImage) -> Vec<u8> {
    let (h, w) = image.depth.dim();
    let header = DepthHeader {
        dtype: "float32".into(),
        byte_order: "little".into(),
        shape: [h, w],
        view,
        azimuth,
    };
    let head = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(4 + head.len() + 4 * h * w);
    out.extend_from_slice(&(head.len() as u32).to_le_bytes());
    out.extend_from_slice(&head);
    for &d in image.depth.iter() {
        out.extend_from_slice(&(d as f32).to_le_bytes());
    }
    out
}

pub fn decode_depth_frame(bytes: &[u8]) -> Result<(DepthHeader, Vec<f32>)> {
    let bad = |m: &str| PipelineError::Core(splatdrag_core::Error::Format(format!("depth frame: {m}")));
    let len = bytes.get(..4).ok_or_else(|| bad("truncated length"))?;
    let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
    let head = bytes.get(4..4 + len).ok_or_else(|| bad("truncated header"))?;
    let header: DepthHeader = serde_json::from_slice(head)?;
    if header.dtype != "float32" || header.byte_order != "little" {
        return Err(bad("unsupported dtype or byte order"));
    }
    let body = &bytes[4 + len..];
    if body.len() != 4 * header.shape[0] * header.shape[1] {
        return Err(bad("payload size does not match shape"));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, data))
}

struct LoadedAsset {
    path: PathBuf,
    radius: f64,
    views: MultiViewImageSet,
    pngs: Vec<String>,
    depth: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Complete,
    Failed,
}

struct Job {
    config: RunConfig,
    status: JobStatus,
    history: Vec<JobStatus>,
    manifest: Option<RunManifest>,
    error: Option<String>,
}

impl Job {
    fn set(&mut self, status: JobStatus) {
        self.status = status;
        self.history.push(status);
    }
}

pub struct AppState {
    root: PathBuf,
    base: RunConfig,
    asset: Option<LoadedAsset>,
    jobs: Mutex<BTreeMap<String, Job>>,
    queue: mpsc::UnboundedSender<String>,
    next_id: AtomicU64,
}

/// Builds the router and starts the run worker. Must be called from
/// within a Tokio runtime.
pub fn build(config: ServiceConfig) -> Result<Router> {
    fs::create_dir_all(&config.artifact_root).map_err(|e| PipelineError::io(&config.artifact_root, e))?;
    let asset = config.asset.as_deref().map(|p| load_views(p, &config.base)).transpose()?;
    let (tx, mut rx) = mpsc::unbounded_channel::<String>();
    let state = Arc::new(AppState {
        next_id: AtomicU64::new(first_free_id(&config.artifact_root)),
        root: config.artifact_root,
        base: config.base,
        asset,
        jobs: Mutex::new(BTreeMap::new()),
        queue: tx,
    });
    let worker = state.clone();
    tokio::spawn(async move {
        while let Some(id) = rx.recv().await {
            let st = worker.clone();
            if let Err(e) = tokio::task::spawn_blocking(move || run_job(&st, &id)).await {
                log::error!("run worker panicked: {e}");
            }
        }
    });
    Ok(Router::new()
        .route("/asset/views", get(asset_views))
        .route("/asset/views/{view}/depth", get(asset_depth))
        .route("/drags", post(post_drags))
        .route("/runs", post(post_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/artifacts/{*name}", get(get_artifact))
        .with_state(state))
}

pub async fn serve(addr: std::net::SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    let app = build(config).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await
}

fn load_views(path: &Path, base: &RunConfig) -> Result<LoadedAsset> {
    let asset = load_asset(path)?;
    let views = render_rig(&asset, &base.rig)?;
    let pngs = views.views.iter().map(|v| Ok(BASE64.encode(encode_png(&v.rgb)?))).collect::<Result<_>>()?;
    let depth = views.views.iter().enumerate().map(|(i, v)| encode_depth_frame(i, views.azimuths[i], v)).collect();
    Ok(LoadedAsset {
        path: path.to_path_buf(),
        radius: asset.radius(),
        views,
        pngs,
        depth,
    })
}

fn first_free_id(root: &Path) -> u64 {
    fs::read_dir(root)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| e.file_name().to_str()?.strip_prefix("run-")?.parse::<u64>().ok())
        .max()
        .map_or(1, |n| n + 1)
}

fn run_job(state: &AppState, id: &str) {
    let config = {
        let mut jobs = state.jobs.lock().unwrap();
        let job = jobs.get_mut(id).expect("queued job exists");
        job.set(JobStatus::Running);
        job.config.clone()
    };
    let mut observe = |m: &RunManifest| {
        if let Some(job) = state.jobs.lock().unwrap().get_mut(id) {
            job.manifest = Some(m.clone());
        }
    };
    let result = run_pipeline_with(&config, &mut observe);
    let mut jobs = state.jobs.lock().unwrap();
    let job = jobs.get_mut(id).expect("running job exists");
    match result {
        Ok(m) => {
            job.error = m.failed().and_then(|r| r.error.clone().map(|e| format!("{}: {e}", r.stage)));
            job.set(if m.is_complete() { JobStatus::Complete } else { JobStatus::Failed });
            job.manifest = Some(m);
        }
        Err(e) => {
            job.error = Some(e.to_string());
            job.set(JobStatus::Failed);
        }
    }
}

fn reject(status: StatusCode, error: impl ToString, field: Option<String>) -> Response {
    (status, Json(json!({ "error": error.to_string(), "field": field }))).into_response()
}

fn not_found(what: impl ToString) -> Response {
    reject(StatusCode::NOT_FOUND, what, None)
}

/// Parses JSON, reporting the failing field path on type errors.
fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> std::result::Result<T, Response> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = (path != ".").then_some(path);
        reject(StatusCode::BAD_REQUEST, e.into_inner(), field)
    })
}

async fn asset_views(State(state): State<Arc<AppState>>) -> Response {
    let Some(asset) = &state.asset else {
        return not_found("no asset loaded");
    };
    let views: Vec<Value> = (0..4)
        .map(|i| {
            json!({
                "index": i,
                "azimuth": asset.views.azimuths[i],
                "png": asset.pngs[i],
                "depth": format!("/asset/views/{i}/depth"),
            })
        })
        .collect();
    Json(json!({
        "asset": asset.path,
        "resolution": asset.views.resolution(),
        "rig": state.base.rig,
        "views": views,
    }))
    .into_response()
}

async fn asset_depth(State(state): State<Arc<AppState>>, UrlPath(view): UrlPath<usize>) -> Response {
    match state.asset.as_ref().and_then(|a| a.depth.get(view)) {
        Some(frame) => ([(header::CONTENT_TYPE, "application/octet-stream")], frame.clone()).into_response(),
        None => not_found(format!("no depth for view {view}")),
    }
}

async fn post_drags(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let drags: DragSet = match parse(&body) {
        Ok(d) => d,
        Err(r) => return r,
    };
    if let Err(e) = drags.validate() {
        return reject(StatusCode::UNPROCESSABLE_ENTITY, e, Some("pairs".into()));
    }
    let Some(asset) = &state.asset else {
        return Json(json!({ "drags": drags, "fully_occluded": [] })).into_response();
    };
    match stages::project(&drags, &asset.views, &state.base.rig, asset.radius) {
        Ok(projected) => {
            let hidden = projected.fully_occluded();
            Json(json!({ "drags": projected, "fully_occluded": hidden })).into_response()
        }
        Err(e) => reject(StatusCode::UNPROCESSABLE_ENTITY, e, None),
    }
}

#[derive(Deserialize)]
struct RunRequest {
    /// Inline drags; written into the run directory.
    drags: Option<DragSet>,
    /// Partial RunConfig merged over the service defaults.
    #[serde(default)]
    config: Value,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

async fn post_runs(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let request: RunRequest = match parse(&body) {
        Ok(r) => r,
        Err(r) => return r,
    };
    if let Some(Err(e)) = request.drags.as_ref().map(DragSet::validate) {
        return reject(StatusCode::UNPROCESSABLE_ENTITY, e, Some("drags.pairs".into()));
    }
    let mut doc = serde_json::to_value(&state.base).expect("config serializes");
    if !request.config.is_null() {
        merge(&mut doc, request.config);
    }
    let mut config: RunConfig = match serde_path_to_error::deserialize(doc) {
        Ok(c) => c,
        Err(e) => return reject(StatusCode::BAD_REQUEST, e.inner(), Some(format!("config.{}", e.path()))),
    };
    let id = format!("run-{:04}", state.next_id.fetch_add(1, Ordering::SeqCst));
    let dir = state.root.join(&id);
    config.output = dir.clone();
    if config.asset.as_os_str().is_empty() {
        if let Some(asset) = &state.asset {
            config.asset = asset.path.clone();
        }
    }
    if let Some(drags) = &request.drags {
        let path = dir.join("drags.json");
        let written = fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e)).and_then(|_| {
            splatdrag_core::drag::save_dragset(drags, &path).map_err(PipelineError::from)
        });
        if let Err(e) = written {
            return reject(StatusCode::INTERNAL_SERVER_ERROR, e, None);
        }
        config.drags = path;
    }
    if let Err(e) = config.validate() {
        let _ = fs::remove_dir_all(&dir);
        return reject(StatusCode::UNPROCESSABLE_ENTITY, e, Some("config".into()));
    }
    state.jobs.lock().unwrap().insert(
        id.clone(),
        Job {
            config,
            status: JobStatus::Queued,
            history: vec![JobStatus::Queued],
            manifest: None,
            error: None,
        },
    );
    if state.queue.send(id.clone()).is_err() {
        return reject(StatusCode::SERVICE_UNAVAILABLE, "run worker has stopped", None);
    }
    (StatusCode::ACCEPTED, Json(json!({ "id": id, "status": JobStatus::Queued }))).into_response()
}

async fn get_run(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let jobs = state.jobs.lock().unwrap();
    let Some(job) = jobs.get(&id) else {
        return not_found(format!("unknown run {id}"));
    };
    Json(json!({
        "id": id,
        "status": job.status,
        "history": job.history,
        "stage": job.manifest.as_ref().and_then(RunManifest::running),
        "error": job.error,
        "manifest": job.manifest,
    }))
    .into_response()
}

async fn get_artifact(State(state): State<Arc<AppState>>, UrlPath((id, name)): UrlPath<(String, String)>) -> Response {
    let listed = {
        let jobs = state.jobs.lock().unwrap();
        let Some(job) = jobs.get(&id) else {
            return not_found(format!("unknown run {id}"));
        };
        job.manifest.as_ref().is_some_and(|m| m.artifact(&name).is_some())
    };
    // Only names recorded in the manifest are served, which also rules
    // out path traversal.
    if !listed {
        return not_found(format!("run {id} has no artifact {name}"));
    }
    let path = state.root.join(&id).join(&name);
    let content_type = match Path::new(&name).extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("json") => "application/json",
        _ => "application/octet-stream",
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type)], bytes).into_response(),
        Err(e) => reject(StatusCode::INTERNAL_SERVER_ERROR, PipelineError::io(path, e), None),
    }
}
