//! Annotation service: serves trajectories for end-frame marking and turns
//! the marks into per-source task-end cutoffs.
//!
//! Routes (all JSON, errors as `{"code", "message"}`):
//!
//! - `GET /sources`
//! - `GET /sources/{s}/trajectories?n=&seed=`
//! - `GET /trajectories/{id}`
//! - `GET /trajectories/{id}/frames/{t}`
//! - `POST /annotations` with `{traj_id, end_frame, annotator}`
//! - `GET /sources/{s}/cutoff?min_count=`

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use trajreward::annotate::{compute_cutoff, validate_annotation, Annotation, AnnotationLog, DEFAULT_MIN_COUNT};
use trajreward::trajdata::{load_manifest, set_source_cutoff};
use trajreward::{Dataset, Error as CoreError, Quality};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server: {0}")]
    Server(#[from] std::io::Error),
}

/// JSON error body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(skip)]
    status: u16,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            code: code.to_string(),
            message: message.into(),
            status: status.as_u16(),
        }
    }

    fn not_found(what: &str, key: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} {key:?}"))
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InsufficientAnnotations { .. } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "insufficient_annotations", e.to_string())
            }
            CoreError::InvalidArgument(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", e.to_string()),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Shared service state. Readers share the dataset; appends go through the
/// single log mutex, so they are serialized and visible once acknowledged.
pub struct AppState {
    dataset_dir: PathBuf,
    dataset: RwLock<Dataset>,
    log: Mutex<AnnotationLog>,
}

impl AppState {
    /// Loads the dataset and replays `annotations` (created if missing).
    pub fn open(dataset_dir: &Path, annotations: &Path) -> Result<Arc<Self>, CoreError> {
        let dataset = load_manifest(dataset_dir)?;
        let log = AnnotationLog::open(annotations)?;
        log::info!(
            "loaded {} trajectories, replayed {} annotations",
            dataset.len(),
            log.entries().len()
        );
        Ok(Arc::new(AppState {
            dataset_dir: dataset_dir.to_path_buf(),
            dataset: RwLock::new(dataset),
            log: Mutex::new(log),
        }))
    }

    pub fn annotations(&self) -> Vec<Annotation> {
        self.log.lock().expect("annotation log poisoned").entries().to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub id: String,
    pub source: String,
    pub instruction: String,
    pub quality: Quality,
    pub num_frames: usize,
    pub frame_shape: Option<[usize; 3]>,
    pub final_progress: Option<f64>,
    pub cutoff: Option<f64>,
}

fn meta(t: &trajreward::Trajectory) -> TrajectoryMeta {
    TrajectoryMeta {
        id: t.id.clone(),
        source: t.source.clone(),
        instruction: t.instruction.clone(),
        quality: t.quality,
        num_frames: t.num_frames,
        frame_shape: t.frame_shape().map(|(c, h, w)| [c, h, w]),
        final_progress: t.final_progress,
        cutoff: t.cutoff,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameBody {
    pub traj_id: String,
    pub t: usize,
    pub shape: [usize; 3],
    /// `C×H×W` nested arrays of values in `[0, 1]`.
    pub data: Vec<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewAnnotation {
    pub traj_id: String,
    pub end_frame: usize,
    pub annotator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffBody {
    pub source: String,
    pub cutoff: f64,
    pub count: usize,
    /// Manifest records updated with the new cutoff.
    pub updated: usize,
}

#[derive(Debug, Deserialize)]
struct SampleQuery {
    n: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct CutoffQuery {
    min_count: Option<usize>,
}

async fn list_sources(State(st): State<Arc<AppState>>) -> Json<Vec<String>> {
    Json(st.dataset.read().expect("dataset lock poisoned").sources())
}

async fn sample_trajectories(
    State(st): State<Arc<AppState>>,
    UrlPath(source): UrlPath<String>,
    Query(q): Query<SampleQuery>,
) -> ApiResult<Vec<TrajectoryMeta>> {
    let ds = st.dataset.read().expect("dataset lock poisoned");
    let pool: Vec<&trajreward::Trajectory> = ds.trajectories.iter().filter(|t| t.source == source).collect();
    if pool.is_empty() {
        return Err(ApiError::not_found("source", &source));
    }
    let n = q.n.unwrap_or(DEFAULT_MIN_COUNT).min(pool.len());
    let mut rng = trajreward::rng::rng_for(&[0x5A3F, q.seed.unwrap_or(0)]);
    let picked = rand::seq::index::sample(&mut rng, pool.len(), n);
    Ok(Json(picked.into_iter().map(|i| meta(pool[i])).collect()))
}

async fn get_trajectory(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<TrajectoryMeta> {
    let ds = st.dataset.read().expect("dataset lock poisoned");
    ds.get(&id).map(|t| Json(meta(t))).ok_or_else(|| ApiError::not_found("trajectory", &id))
}

async fn get_frame(
    State(st): State<Arc<AppState>>,
    UrlPath((id, t)): UrlPath<(String, usize)>,
) -> ApiResult<FrameBody> {
    let ds = st.dataset.read().expect("dataset lock poisoned");
    let traj = ds.get(&id).ok_or_else(|| ApiError::not_found("trajectory", &id))?;
    let frame = traj.frames.get(t).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("frame {t} out of range for {} frames", traj.num_frames),
        )
    })?;
    let (c, h, w) = frame.shape();
    Ok(Json(FrameBody {
        traj_id: id,
        t,
        shape: [c, h, w],
        data: frame.to_nested(),
    }))
}

async fn post_annotation(
    State(st): State<Arc<AppState>>,
    Json(body): Json<NewAnnotation>,
) -> Result<(StatusCode, Json<Annotation>), ApiError> {
    let ann = Annotation {
        traj_id: body.traj_id,
        end_frame: body.end_frame,
        annotator: body.annotator,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    {
        let ds = st.dataset.read().expect("dataset lock poisoned");
        if ds.get(&ann.traj_id).is_none() {
            return Err(ApiError::not_found("trajectory", &ann.traj_id));
        }
        validate_annotation(&ds, &ann)?;
    }
    st.log.lock().expect("annotation log poisoned").append(ann.clone())?;
    Ok((StatusCode::CREATED, Json(ann)))
}

async fn get_cutoff(
    State(st): State<Arc<AppState>>,
    UrlPath(source): UrlPath<String>,
    Query(q): Query<CutoffQuery>,
) -> ApiResult<CutoffBody> {
    let min_count = q.min_count.unwrap_or(DEFAULT_MIN_COUNT);
    let anns = st.annotations();
    let mut ds = st.dataset.write().expect("dataset lock poisoned");
    if !ds.trajectories.iter().any(|t| t.source == source) {
        return Err(ApiError::not_found("source", &source));
    }
    let count = anns
        .iter()
        .filter(|a| ds.get(&a.traj_id).is_some_and(|t| t.source == source))
        .count();
    let cutoff = compute_cutoff(&ds, &source, &anns, min_count)?;
    let updated = set_source_cutoff(&st.dataset_dir, &source, cutoff)?;
    for t in ds.trajectories.iter_mut().filter(|t| t.source == source) {
        t.cutoff = Some(cutoff);
    }
    Ok(Json(CutoffBody {
        source,
        cutoff,
        count,
        updated,
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sources", get(list_sources))
        .route("/sources/{source}/trajectories", get(sample_trajectories))
        .route("/sources/{source}/cutoff", get(get_cutoff))
        .route("/trajectories/{id}", get(get_trajectory))
        .route("/trajectories/{id}/frames/{t}", get(get_frame))
        .route("/annotations", post(post_annotation))
        .with_state(state)
}

/// Binds `addr`, then serves until the task is cancelled.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> Result<(), ServeError> {
    let listener = bind(addr).await?;
    serve_on(state, listener).await
}

pub async fn bind(addr: SocketAddr) -> Result<tokio::net::TcpListener, ServeError> {
    tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })
}

pub async fn serve_on(state: Arc<AppState>, listener: tokio::net::TcpListener) -> Result<(), ServeError> {
    if let Ok(a) = listener.local_addr() {
        log::info!("annotator listening on http://{a}");
    }
    axum::serve(listener, router(state)).await?;
    Ok(())
}
