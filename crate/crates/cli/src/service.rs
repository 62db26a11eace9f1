//! Single-session HTTP service: slices, annotation upload and segmentation jobs.
//!
//! Reads never wait on a running job; the job works on its own thread and
//! publishes progress into a shared [`JobState`].

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use base64::Engine;
use geoflow_core::pipeline::{run_pipeline_with_progress, PipelineConfig, Progress, ResultManifest, Stage};
use geoflow_core::volume::load_volume;
use geoflow_core::{AnnotationSet, Error as CoreError, LabelVolume, ScalarVolume, VolumeGeometry};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::slices::{gray8, png_gray};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStage {
    Queued,
    Bias,
    Edges,
    Distance,
    Flow,
    Done,
    Failed,
}

impl From<Stage> for JobStage {
    fn from(s: Stage) -> Self {
        match s {
            Stage::Bias => JobStage::Bias,
            Stage::Edges => JobStage::Edges,
            Stage::Distance => JobStage::Distance,
            Stage::Flow => JobStage::Flow,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupProgress {
    pub iteration: usize,
    pub max_iter: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JobState {
    pub id: u64,
    pub stage: JobStage,
    /// `[done, total]` edge patches.
    pub patches: Option<[usize; 2]>,
    pub groups: BTreeMap<u8, GroupProgress>,
    pub error: Option<String>,
    pub manifest: Option<ResultManifest>,
}

#[derive(Default)]
struct Layers {
    corrected: Option<Arc<ScalarVolume>>,
    edges: Option<Arc<ScalarVolume>>,
    labels: Option<Arc<LabelVolume>>,
}

#[derive(Default)]
struct Jobs {
    next: u64,
    active: Option<u64>,
    states: BTreeMap<u64, Arc<Mutex<JobState>>>,
}

pub struct Session {
    pub id: String,
    config: PipelineConfig,
    t1: Arc<ScalarVolume>,
    annotations: RwLock<AnnotationSet>,
    layers: RwLock<Layers>,
    jobs: Mutex<Jobs>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        ApiError {
            status,
            body: json!({ "error": msg.into() }),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn annotation_error(e: CoreError) -> ApiError {
    match e {
        CoreError::Polygon { index, ref reason } => ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: json!({ "error": format!("polygon #{index} rejected: {reason}"), "polygon": index }),
        },
        e => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    }
}

impl Session {
    /// Loads the config's T1 volume and, if present, its annotation file.
    pub fn open(config: PipelineConfig) -> anyhow::Result<Arc<Session>> {
        let t1 = load_volume(&config.t1).with_context(|| format!("loading {}", config.t1.display()))?;
        let annotations = if config.annotations.is_file() {
            AnnotationSet::load(&config.annotations)?
        } else {
            AnnotationSet::default()
        };
        annotations.validate(t1.geometry())?;
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0);
        Ok(Arc::new(Session {
            id: format!("{:016x}", nanos as u64 ^ std::process::id() as u64),
            config,
            t1: Arc::new(t1),
            annotations: RwLock::new(annotations),
            layers: RwLock::new(Layers::default()),
            jobs: Mutex::new(Jobs::default()),
        }))
    }

    pub fn geometry(&self) -> VolumeGeometry {
        *self.t1.geometry()
    }

    pub fn annotations(&self) -> AnnotationSet {
        self.annotations.read().unwrap().clone()
    }

    /// Replaces the annotations if every polygon is acceptable.
    pub fn put_annotations(&self, set: AnnotationSet) -> Result<geoflow_core::geodesic::ValidationReport, CoreError> {
        let report = set.validate(&self.geometry())?;
        *self.annotations.write().unwrap() = set;
        Ok(report)
    }

    pub fn job(&self, id: u64) -> Option<JobState> {
        let jobs = self.jobs.lock().unwrap();
        jobs.states.get(&id).map(|s| s.lock().unwrap().clone())
    }

    /// Where jobs persist the annotations they run with.
    pub fn annotation_path(&self) -> PathBuf {
        self.config.output_dir.join("annotations.json")
    }

    /// Starts a pipeline run on a worker thread. Bias and edge stages are
    /// reused from earlier jobs whenever their inputs are unchanged.
    pub fn start_job(self: &Arc<Self>) -> ApiResult<JobState> {
        let mut jobs = self.jobs.lock().unwrap();
        if let Some(active) = jobs.active {
            return Err(ApiError {
                status: StatusCode::CONFLICT,
                body: json!({ "error": "busy: a segmentation job is running", "active_job": active }),
            });
        }
        let ann = self.annotations();
        if ann.is_empty() {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "no annotations uploaded"));
        }
        let report = ann.validate(&self.geometry()).map_err(annotation_error)?;
        if !report.missing_markers.is_empty() {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("groups without markers: {:?}", report.missing_markers),
            ));
        }
        let path = self.annotation_path();
        std::fs::create_dir_all(&self.config.output_dir)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        ann.save(&path)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;

        jobs.next += 1;
        let id = jobs.next;
        let state = Arc::new(Mutex::new(JobState {
            id,
            stage: JobStage::Queued,
            patches: None,
            groups: BTreeMap::new(),
            error: None,
            manifest: None,
        }));
        jobs.states.insert(id, state.clone());
        jobs.active = Some(id);
        let snapshot = state.lock().unwrap().clone();
        drop(jobs);

        let mut cfg = self.config.clone();
        cfg.annotations = path;
        cfg.resume = true;
        let session = Arc::clone(self);
        std::thread::spawn(move || session.run_job(cfg, state));
        Ok(snapshot)
    }

    fn run_job(&self, cfg: PipelineConfig, state: Arc<Mutex<JobState>>) {
        let progress = JobProgress(state.clone());
        let result = run_pipeline_with_progress(&cfg, &progress);
        let mut s = state.lock().unwrap();
        match result {
            Ok(out) => {
                let mut layers = self.layers.write().unwrap();
                layers.corrected = Some(Arc::new(out.corrected));
                layers.edges = Some(Arc::new(out.edges));
                layers.labels = Some(Arc::new(out.segmentation.labels));
                s.manifest = Some(out.manifest);
                s.stage = JobStage::Done;
            }
            Err(e) => {
                log::error!("job {} failed: {e}", s.id);
                s.error = Some(e.to_string());
                s.stage = JobStage::Failed;
            }
        }
        drop(s);
        self.jobs.lock().unwrap().active = None;
    }
}

struct JobProgress(Arc<Mutex<JobState>>);

impl Progress for JobProgress {
    fn stage(&self, stage: Stage) {
        let mut s = self.0.lock().unwrap();
        s.stage = s.stage.max(stage.into());
    }

    fn patches(&self, done: usize, total: usize) {
        self.0.lock().unwrap().patches = Some([done, total]);
    }

    fn flow_iteration(&self, group: u8, iteration: usize, max_iter: usize) {
        let mut s = self.0.lock().unwrap();
        let g = s
            .groups
            .entry(group)
            .or_insert(GroupProgress { iteration: 0, max_iter });
        g.iteration = g.iteration.max(iteration);
    }
}

type Shared = Arc<Session>;

pub fn router(session: Shared) -> Router {
    Router::new()
        .route("/api/meta", get(meta))
        .route("/api/slice/{layer}/{z}", get(slice))
        .route("/api/annotations", get(get_annotations).put(put_annotations))
        .route("/api/segment", axum::routing::post(start_segment))
        .route("/api/segment/{id}", get(poll_segment))
        .route("/api/result/labels/{z}", get(result_labels))
        .with_state(session)
}

pub async fn serve(session: Shared, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    log::info!("serving session {} on http://{}", session.id, listener.local_addr()?);
    axum::serve(listener, router(session))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn meta(State(s): State<Shared>) -> Json<Value> {
    let g = s.geometry();
    let layers = s.layers.read().unwrap();
    let ann = s.annotations();
    Json(json!({
        "session": s.id,
        "dims": g.dims,
        "fov_mm": g.fov_mm,
        "spacing_mm": g.spacing(),
        "layers": {
            "t1": true,
            "corrected": layers.corrected.is_some(),
            "edge": layers.edges.is_some(),
            "label": layers.labels.is_some(),
        },
        "groups": ann.groups(),
        "annotated_slices": s.config.annotated_slices,
        "active_job": s.jobs.lock().unwrap().active,
    }))
}

#[derive(Debug, Deserialize)]
struct SliceQuery {
    #[serde(default)]
    format: Option<String>,
}

fn check_z(g: &VolumeGeometry, z: usize) -> ApiResult<()> {
    if z >= g.dims[2] {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("slice {z} out of range (volume has {} slices)", g.dims[2]),
        ));
    }
    Ok(())
}

fn not_ready(layer: &str) -> ApiError {
    ApiError::new(
        StatusCode::CONFLICT,
        format!("layer `{layer}` not ready: run a segmentation job first"),
    )
}

async fn slice(
    State(s): State<Shared>,
    Path((layer, z)): Path<(String, usize)>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Response> {
    let g = s.geometry();
    let (pixels, window, palette) = {
        let layers = s.layers.read().unwrap();
        let scalar = |v: Option<&Arc<ScalarVolume>>| -> ApiResult<(Vec<u8>, [f64; 2], bool)> {
            let v = v.ok_or_else(|| not_ready(&layer))?;
            check_z(&g, z)?;
            let (px, w) = gray8(v.slice(z));
            Ok((px, w, false))
        };
        match layer.as_str() {
            "t1" => scalar(Some(&s.t1))?,
            "corrected" => scalar(layers.corrected.as_ref())?,
            "edge" => scalar(layers.edges.as_ref())?,
            "label" => {
                let l = layers.labels.as_ref().ok_or_else(|| not_ready(&layer))?;
                check_z(&g, z)?;
                let n = g.slice_len();
                (l.data()[z * n..(z + 1) * n].to_vec(), [0.0, 255.0], true)
            }
            other => {
                return Err(ApiError::new(
                    StatusCode::BAD_REQUEST,
                    format!("unknown layer `{other}` (t1, corrected, edge, label)"),
                ))
            }
        }
    };
    let [w, h, _] = g.dims;
    match q.format.as_deref().unwrap_or("png") {
        "png" => {
            let png =
                png_gray(&pixels, w, h).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
            Ok((
                [
                    (header::CONTENT_TYPE, "image/png".to_string()),
                    (header::HeaderName::from_static("x-window-min"), window[0].to_string()),
                    (header::HeaderName::from_static("x-window-max"), window[1].to_string()),
                    (header::HeaderName::from_static("x-palette"), palette.to_string()),
                ],
                png,
            )
                .into_response())
        }
        "raw" => Ok(Json(json!({
            "layer": layer,
            "z": z,
            "width": w,
            "height": h,
            "window": window,
            "palette": palette,
            "data": base64::engine::general_purpose::STANDARD.encode(&pixels),
        }))
        .into_response()),
        other => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("unknown format `{other}` (png, raw)"),
        )),
    }
}

async fn get_annotations(State(s): State<Shared>) -> Json<AnnotationSet> {
    Json(s.annotations())
}

async fn put_annotations(State(s): State<Shared>, body: Bytes) -> ApiResult<Json<Value>> {
    let set: AnnotationSet = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed annotations: {e}")))?;
    let report = s.put_annotations(set).map_err(annotation_error)?;
    Ok(Json(json!({ "accepted": true, "report": report })))
}

async fn start_segment(State(s): State<Shared>) -> ApiResult<(StatusCode, Json<JobState>)> {
    s.start_job().map(|j| (StatusCode::ACCEPTED, Json(j)))
}

async fn poll_segment(State(s): State<Shared>, Path(id): Path<u64>) -> ApiResult<Json<JobState>> {
    s.job(id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no job {id}")))
}

async fn result_labels(State(s): State<Shared>, Path(z): Path<usize>) -> ApiResult<Json<Value>> {
    let g = s.geometry();
    let layers = s.layers.read().unwrap();
    let l = layers.labels.as_ref().ok_or_else(|| not_ready("label"))?;
    check_z(&g, z)?;
    let n = g.slice_len();
    let data = &l.data()[z * n..(z + 1) * n];
    let mut present: Vec<u8> = data.iter().copied().filter(|&v| v != 0).collect();
    present.sort_unstable();
    present.dedup();
    Ok(Json(json!({
        "z": z,
        "width": g.dims[0],
        "height": g.dims[1],
        "groups": present,
        "data": base64::engine::general_purpose::STANDARD.encode(data),
    })))
}
