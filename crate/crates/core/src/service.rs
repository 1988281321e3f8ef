//! HTTP API over the pipeline.
//!
//! Runs are submitted with a multipart upload, processed on blocking worker
//! threads and polled by id. Extraction is serialized through one
//! [`ExtractorSlot`]; segmentation of different runs proceeds concurrently.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::multipart::MultipartError;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::masking::{select_regions, BinaryMask, LabelMask};
use crate::metrics::{compute_metrics, confusion_counts, ConfusionCounts, MetricReport};
use crate::pipeline::{
    extract_capture, run_pipeline, sha256_hex, ExtractorSlot, PipelineError, PipelineInput,
    RunConfig, RunOptions, CAPTURE_FILE, MANIFEST_FILE, SELECTION_FILE,
};
use crate::raster;

pub const DEFAULT_MAX_UPLOAD: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Uploads and run artifacts live under this directory.
    pub data_dir: PathBuf,
    pub max_upload_bytes: usize,
    /// Defaults that per-run `params` are layered over.
    pub base_config: RunConfig,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            max_upload_bytes: DEFAULT_MAX_UPLOAD,
            base_config: RunConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunState {
    Queued,
    Extracting,
    Segmenting,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: RunState,
    pub at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactLink {
    pub name: String,
    pub url: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Public view of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub state: RunState,
    pub transitions: Vec<Transition>,
    pub config: RunConfig,
    pub error: Option<String>,
    /// Content-derived id from the run manifest.
    pub manifest_id: Option<String>,
    pub label_count: Option<usize>,
    pub artifacts: Vec<ArtifactLink>,
    pub selection: Option<SelectionResponse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResponse {
    pub labels: Vec<u32>,
    pub mask_url: String,
    pub counts: Option<ConfusionCounts>,
    pub metrics: Option<MetricReport>,
}

#[derive(Debug, Deserialize)]
pub struct SelectionRequest {
    pub labels: Vec<u32>,
}

struct RunEntry {
    record: RunRecord,
    dir: PathBuf,
    capture: Option<PathBuf>,
    labels: Option<Arc<LabelMask>>,
    ground_truth: Option<Arc<BinaryMask>>,
}

struct Inner {
    config: ServiceConfig,
    slot: ExtractorSlot,
    runs: Mutex<HashMap<String, RunEntry>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(config: ServiceConfig) -> std::io::Result<Self> {
        fs::create_dir_all(config.data_dir.join("runs"))?;
        fs::create_dir_all(config.data_dir.join("uploads"))?;
        Ok(Self(Arc::new(Inner {
            config,
            slot: ExtractorSlot::new(),
            runs: Mutex::new(HashMap::new()),
        })))
    }

    fn runs(&self) -> std::sync::MutexGuard<'_, HashMap<String, RunEntry>> {
        self.0.runs.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn set_state(&self, id: &str, state: RunState) {
        if let Some(e) = self.runs().get_mut(id) {
            e.record.state = state;
            e.record.transitions.push(Transition { state, at: now() });
        }
    }

    pub fn record(&self, id: &str) -> Option<RunRecord> {
        self.runs().get(id).map(|e| e.record.clone())
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn router(state: AppState) -> Router {
    let limit = state.0.config.max_upload_bytes;
    Router::new()
        .route("/api/health", get(health))
        .route("/api/runs", post(create_run))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/runs/{id}/artifacts/{name}", get(get_artifact))
        .route("/api/runs/{id}/selection", post(post_selection))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            field: None,
        }
    }

    fn field(status: StatusCode, field: &str, message: impl Into<String>) -> Self {
        Self {
            field: Some(field.to_string()),
            ..Self::new(status, message)
        }
    }

    fn not_found() -> Self {
        Self::new(StatusCode::NOT_FOUND, "no such run")
    }
}

impl From<MultipartError> for ApiError {
    fn from(e: MultipartError) -> Self {
        Self::new(e.status(), e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = match self.field {
            Some(f) => json!({ "error": self.message, "field": f }),
            None => json!({ "error": self.message }),
        };
        (self.status, Json(body)).into_response()
    }
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Default)]
struct Submission {
    image: Option<Bytes>,
    archive: Option<Bytes>,
    archive_ref: Option<String>,
    prompt: Option<String>,
    params: Option<String>,
    gt: Option<Bytes>,
}

async fn read_submission(mut mp: Multipart) -> Result<Submission, ApiError> {
    let mut s = Submission::default();
    while let Some(field) = mp.next_field().await? {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "image" => s.image = Some(field.bytes().await?),
            "archive" => s.archive = Some(field.bytes().await?),
            "gt" => s.gt = Some(field.bytes().await?),
            "archive_ref" => s.archive_ref = Some(field.text().await?),
            "prompt" => s.prompt = Some(field.text().await?),
            "params" => s.params = Some(field.text().await?),
            other => {
                return Err(ApiError::field(
                    StatusCode::BAD_REQUEST,
                    other,
                    format!("unknown form field '{other}'"),
                ))
            }
        }
    }
    Ok(s)
}

/// Layers a partial JSON object over the base config.
fn merged_config(base: &RunConfig, params: Option<&str>) -> Result<RunConfig, ApiError> {
    let bad = |field: &str, msg: String| ApiError::field(StatusCode::BAD_REQUEST, field, msg);
    let Some(params) = params.filter(|p| !p.trim().is_empty()) else {
        return Ok(base.clone());
    };
    let overlay: Value = serde_json::from_str(params).map_err(|e| bad("params", e.to_string()))?;
    let Value::Object(overlay) = overlay else {
        return Err(bad("params", "params must be a JSON object".into()));
    };
    if overlay.contains_key("extractor") {
        return Err(bad("extractor", "the extractor is fixed by the server".into()));
    }
    let mut merged = serde_json::to_value(base).expect("config serializes");
    deep_merge(&mut merged, Value::Object(overlay));
    serde_json::from_value(merged).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.starts_with("unknown field"))
            .unwrap_or("params")
            .to_string();
        bad(&field, msg)
    })
}

fn deep_merge(into: &mut Value, from: Value) {
    match (into, from) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                deep_merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

fn write_upload(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, ApiError> {
    let path = dir.join(name);
    fs::write(&path, bytes)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(path)
}

enum Source {
    Image(PathBuf),
    Archive(PathBuf),
}

async fn create_run(
    State(state): State<AppState>,
    mp: Multipart,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let sub = read_submission(mp).await?;
    let bad = |field: &str, msg: &str| ApiError::field(StatusCode::BAD_REQUEST, field, msg);

    let mut config = merged_config(&state.0.config.base_config, sub.params.as_deref())?;
    if let Some(p) = sub.prompt {
        config.prompt = p;
    }
    config.extractor = state.0.config.base_config.extractor.clone();
    if let Err(e) = config.validate() {
        return Err(match e {
            PipelineError::Config { field, detail } => ApiError::field(StatusCode::BAD_REQUEST, field, detail),
            other => ApiError::new(StatusCode::BAD_REQUEST, other.to_string()),
        });
    }

    let inputs = [sub.image.is_some(), sub.archive.is_some(), sub.archive_ref.is_some()];
    if inputs.iter().filter(|&&b| b).count() != 1 {
        return Err(bad("input", "send exactly one of image, archive or archive_ref"));
    }
    if sub.image.is_some() && config.extractor.is_none() {
        return Err(bad("image", "no extractor is configured; upload an archive instead"));
    }
    if let Some(b) = &sub.image {
        image::load_from_memory(b).map_err(|e| bad("image", &format!("undecodable image: {e}")))?;
    }
    let referenced = match &sub.archive_ref {
        Some(r) => {
            let runs = state.runs();
            let entry = runs.get(r).ok_or_else(|| bad("archive_ref", "unknown run id"))?;
            Some(
                entry
                    .capture
                    .clone()
                    .ok_or_else(|| bad("archive_ref", "referenced run has no capture yet"))?,
            )
        }
        None => None,
    };

    let id = uuid::Uuid::new_v4().simple().to_string();
    let uploads = state.0.config.data_dir.join("uploads").join(&id);
    fs::create_dir_all(&uploads)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let source = if let Some(b) = &sub.image {
        Source::Image(write_upload(&uploads, "image", b)?)
    } else if let Some(b) = &sub.archive {
        Source::Archive(write_upload(&uploads, "capture.atnp", b)?)
    } else {
        Source::Archive(referenced.expect("one input is present"))
    };
    let gt = match &sub.gt {
        Some(b) => {
            let mask = raster::decode_binary_mask(b).map_err(|e| bad("gt", &e.to_string()))?;
            Some((write_upload(&uploads, "gt.png", b)?, Arc::new(mask)))
        }
        None => None,
    };

    let dir = state.0.config.data_dir.join("runs").join(&id);
    let capture = match &source {
        Source::Archive(p) => Some(p.clone()),
        Source::Image(_) => None,
    };
    state.runs().insert(
        id.clone(),
        RunEntry {
            record: RunRecord {
                id: id.clone(),
                state: RunState::Queued,
                transitions: vec![Transition {
                    state: RunState::Queued,
                    at: now(),
                }],
                config: config.clone(),
                error: None,
                manifest_id: None,
                label_count: None,
                artifacts: Vec::new(),
                selection: None,
            },
            dir: dir.clone(),
            capture,
            labels: None,
            ground_truth: gt.as_ref().map(|g| g.1.clone()),
        },
    );

    let worker = state.clone();
    let run_id = id.clone();
    tokio::task::spawn_blocking(move || {
        let gt_path = gt.map(|g| g.0);
        if let Err(e) = execute(&worker, &run_id, &config, source, gt_path, &dir) {
            tracing::warn!(run = %run_id, error = %e, "run failed");
            if let Some(entry) = worker.runs().get_mut(&run_id) {
                entry.record.error = Some(e.to_string());
            }
            worker.set_state(&run_id, RunState::Failed);
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "run_id": id }))))
}

fn execute(
    state: &AppState,
    id: &str,
    config: &RunConfig,
    source: Source,
    gt: Option<PathBuf>,
    dir: &Path,
) -> Result<(), PipelineError> {
    let (archive, base_image) = match source {
        Source::Image(image) => {
            state.set_state(id, RunState::Extracting);
            let capture = cached_capture(state, config, &image, dir)?;
            if let Some(e) = state.runs().get_mut(id) {
                e.capture = Some(capture.clone());
            }
            (capture, Some(image))
        }
        Source::Archive(p) => (p, None),
    };
    state.set_state(id, RunState::Segmenting);
    let options = RunOptions {
        ground_truth: gt,
        base_image,
        output_size: None,
    };
    let outcome = run_pipeline(
        config,
        &PipelineInput::Archive(archive),
        &options,
        dir,
        &state.0.slot,
    )?;
    {
        let mut runs = state.runs();
        let entry = runs.get_mut(id).expect("run registered");
        entry.record.manifest_id = Some(outcome.manifest.run_id.clone());
        entry.record.label_count = Some(outcome.segmentation.labels.label_count);
        entry.record.artifacts = outcome
            .manifest
            .artifacts
            .iter()
            .map(|a| ArtifactLink {
                url: artifact_url(id, &a.name, &a.sha256),
                name: a.name.clone(),
                sha256: a.sha256.clone(),
                bytes: a.bytes,
            })
            .collect();
        let manifest_bytes = fs::read(dir.join(MANIFEST_FILE)).unwrap_or_default();
        let manifest_sha = sha256_hex(&manifest_bytes);
        entry.record.artifacts.push(ArtifactLink {
            name: MANIFEST_FILE.into(),
            url: artifact_url(id, MANIFEST_FILE, &manifest_sha),
            sha256: manifest_sha,
            bytes: manifest_bytes.len() as u64,
        });
        let selection_url = outcome
            .manifest
            .artifact(SELECTION_FILE)
            .map(|a| artifact_url(id, &a.name, &a.sha256))
            .unwrap_or_default();
        entry.record.selection = outcome.selection.map(|s| SelectionResponse {
            mask_url: selection_url,
            labels: s.labels,
            counts: s.counts,
            metrics: s.metrics,
        });
        entry.labels = Some(Arc::new(outcome.segmentation.labels));
    }
    state.set_state(id, RunState::Done);
    Ok(())
}

/// The content hash in the query makes links safe to cache forever.
/// Extraction is the expensive step, so captures are cached by the digest of
/// everything that determines them.
fn cached_capture(
    state: &AppState,
    config: &RunConfig,
    image: &Path,
    dir: &Path,
) -> Result<PathBuf, PipelineError> {
    let image_digest = crate::pipeline::sha256_file(image)?;
    let key = serde_json::to_vec(&json!([
        image_digest,
        config.prompt,
        config.timestep,
        config.working_size,
        config.extractor,
    ]))
    .expect("json");
    let cache_dir = state.0.config.data_dir.join("cache");
    let cached = cache_dir.join(format!("{}.atnp", sha256_hex(&key)));
    let capture = dir.join(CAPTURE_FILE);
    if cached.is_file() {
        fs::create_dir_all(dir).map_err(crate::pipeline::io_err(dir))?;
        fs::copy(&cached, &capture).map_err(crate::pipeline::io_err(&capture))?;
        tracing::info!(capture = %cached.display(), "reusing cached capture");
        return Ok(capture);
    }
    let (capture, _) = extract_capture(config, image, dir, &state.0.slot)?;
    fs::create_dir_all(&cache_dir).map_err(crate::pipeline::io_err(&cache_dir))?;
    fs::copy(&capture, &cached).map_err(crate::pipeline::io_err(&cached))?;
    Ok(capture)
}

fn artifact_url(id: &str, name: &str, sha256: &str) -> String {
    format!("/api/runs/{id}/artifacts/{name}?v={}", &sha256[..16])
}

async fn get_run(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<RunRecord>, ApiError> {
    state.record(&id).map(Json).ok_or_else(ApiError::not_found)
}

fn content_type(name: &str) -> &'static str {
    match Path::new(name).extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("json") => "application/json",
        _ => "application/octet-stream",
    }
}

async fn get_artifact(
    State(state): State<AppState>,
    UrlPath((id, name)): UrlPath<(String, String)>,
) -> Result<Response, ApiError> {
    // only names recorded for the run are served, which rules out traversal
    let (path, sha) = {
        let runs = state.runs();
        let entry = runs.get(&id).ok_or_else(ApiError::not_found)?;
        let link = entry
            .record
            .artifacts
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no such artifact"))?;
        (entry.dir.join(&name), link.sha256.clone())
    };
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "artifact missing on disk"))?;
    Ok((
        [
            (header::CONTENT_TYPE, content_type(&name).to_string()),
            (header::ETAG, format!("\"{sha}\"")),
            (header::CACHE_CONTROL, "public, max-age=31536000, immutable".to_string()),
        ],
        bytes,
    )
        .into_response())
}

async fn post_selection(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<SelectionRequest>,
) -> Result<Json<SelectionResponse>, ApiError> {
    let (labels, gt, dir) = {
        let runs = state.runs();
        let entry = runs.get(&id).ok_or_else(ApiError::not_found)?;
        match (&entry.record.state, &entry.labels) {
            (RunState::Done, Some(l)) => (l.clone(), entry.ground_truth.clone(), entry.dir.clone()),
            (s, _) => {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    format!("run is {s:?}, selections need a finished run").to_lowercase(),
                ))
            }
        }
    };
    let ids: BTreeSet<u32> = req.labels.iter().copied().collect();
    let mask = select_regions(&labels, &ids)
        .map_err(|e| ApiError::field(StatusCode::UNPROCESSABLE_ENTITY, "labels", e.to_string()))?;
    let png = raster::binary_mask_png(&mask)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let key: Vec<String> = ids.iter().map(u32::to_string).collect();
    let name = format!("selection-{}.png", &sha256_hex(key.join(",").as_bytes())[..12]);
    tokio::fs::write(dir.join(&name), &png)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let counts = match gt {
        Some(g) => Some(
            confusion_counts(&mask, &g)
                .map_err(|e| ApiError::field(StatusCode::UNPROCESSABLE_ENTITY, "gt", e.to_string()))?,
        ),
        None => None,
    };
    let png_sha = sha256_hex(&png);
    let response = SelectionResponse {
        labels: ids.into_iter().collect(),
        mask_url: artifact_url(&id, &name, &png_sha),
        counts,
        metrics: counts.map(compute_metrics),
    };
    let mut runs = state.runs();
    if let Some(entry) = runs.get_mut(&id) {
        let link = ArtifactLink {
            url: response.mask_url.clone(),
            sha256: png_sha,
            bytes: png.len() as u64,
            name,
        };
        entry.record.artifacts.retain(|a| a.name != link.name);
        entry.record.artifacts.push(link);
        entry.record.selection = Some(response.clone());
    }
    Ok(Json(response))
}

/// Binds and serves until the process is stopped.
pub async fn serve(addr: std::net::SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    let app = router(AppState::new(config)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, app).await
}
