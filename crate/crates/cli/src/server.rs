//! HTTP backend of the review gallery.
//!
//! | route                        | result                                   |
//! |------------------------------|------------------------------------------|
//! | `GET /runs`                  | runs with a manifest                     |
//! | `GET /regions?run=`          | rank-ordered regions with verdicts       |
//! | `GET /crops/{rank}.png?run=` | region thumbnail                         |
//! | `POST /labels`               | `{run?, rank, verdict}`, appended to log |
//! | `GET /metrics?run=`          | human and automatic recall curves        |
//!
//! `run` may be omitted when the run directory holds exactly one run.
//! Unknown runs give 404, malformed requests 400. Every JSON body carries
//! the run format `version`.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use objctx::retrieval::{evaluate_recall_at_k, CandidateRegion, Verdict};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::CliError;
use crate::labels::LabelStore;
use crate::runs::{list_runs, RunDir, RUN_VERSION};

#[derive(Clone)]
pub struct AppState {
    run_dir: PathBuf,
    /// One open log per run; the lock serializes appends.
    stores: Arc<Mutex<HashMap<String, LabelStore>>>,
}

impl AppState {
    pub fn new(run_dir: PathBuf) -> Self {
        Self {
            run_dir,
            stores: Arc::default(),
        }
    }

    fn with_store<T>(
        &self,
        run: &RunDir,
        f: impl FnOnce(&mut LabelStore) -> Result<T, ApiError>,
    ) -> Result<T, ApiError> {
        let mut stores = self.stores.lock().unwrap_or_else(|e| e.into_inner());
        if !stores.contains_key(&run.id) {
            stores.insert(run.id.clone(), LabelStore::open(&run.labels_path())?);
        }
        f(stores.get_mut(&run.id).expect("inserted above"))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({ "error": self.message, "version": RUN_VERSION })),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Default, Deserialize)]
pub struct RunQuery {
    run: Option<String>,
}

fn resolve_run(state: &AppState, run: Option<&str>) -> ApiResult<RunDir> {
    match run {
        Some(id) => {
            let dir = RunDir::new(&state.run_dir, id)
                .map_err(|_| ApiError::not_found(format!("unknown run `{id}`")))?;
            if !dir.exists() {
                return Err(ApiError::not_found(format!("unknown run `{id}`")));
            }
            Ok(dir)
        }
        None => {
            let mut runs = list_runs(&state.run_dir)?;
            match runs.len() {
                1 => Ok(runs.remove(0)),
                0 => Err(ApiError::not_found("no runs")),
                n => Err(ApiError::bad_request(format!("{n} runs; pass ?run="))),
            }
        }
    }
}

#[derive(Debug, Serialize)]
struct RegionView {
    rank: usize,
    score: f64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    image: String,
    clamped: bool,
    verdict: Verdict,
}

fn region_views(state: &AppState, run: &RunDir) -> ApiResult<Vec<RegionView>> {
    let mut regions: Vec<CandidateRegion> = run.regions()?;
    regions.sort_by_key(|r| r.rank);
    state.with_store(run, |store| {
        Ok(regions
            .into_iter()
            .map(|r| RegionView {
                rank: r.rank,
                score: r.score,
                bbox: [r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h],
                verdict: store.verdict(&run.id, r.rank),
                image: r.image,
                clamped: r.clamped,
            })
            .collect())
    })
}

async fn get_runs(State(state): State<AppState>) -> ApiResult<Json<serde_json::Value>> {
    let mut out = Vec::new();
    for run in list_runs(&state.run_dir)? {
        let m = run.manifest()?;
        out.push(json!({
            "run": m.run,
            "mode": m.mode,
            "context": m.context,
            "split": m.split,
            "regions": m.regions,
            "has_truth": run.truth_path().is_file(),
        }));
    }
    Ok(Json(json!({ "version": RUN_VERSION, "runs": out })))
}

async fn get_regions(
    State(state): State<AppState>,
    Query(q): Query<RunQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let run = resolve_run(&state, q.run.as_deref())?;
    let regions = region_views(&state, &run)?;
    Ok(Json(
        json!({ "version": RUN_VERSION, "run": run.id, "regions": regions }),
    ))
}

async fn get_crop(
    State(state): State<AppState>,
    UrlPath(file): UrlPath<String>,
    Query(q): Query<RunQuery>,
) -> ApiResult<Response> {
    let run = resolve_run(&state, q.run.as_deref())?;
    let rank: usize = file
        .strip_suffix(".png")
        .and_then(|r| r.parse().ok())
        .ok_or_else(|| ApiError::not_found(format!("no crop `{file}`")))?;
    let path = run.crop_path(rank);
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|_| ApiError::not_found(format!("no crop for rank {rank}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRequest {
    #[serde(default)]
    run: Option<String>,
    rank: usize,
    verdict: Verdict,
}

/// The body is parsed here rather than by an extractor so that every
/// malformed label is a 400.
async fn post_label(
    State(state): State<AppState>,
    body: Bytes,
) -> ApiResult<Json<serde_json::Value>> {
    let req: LabelRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request(format!("malformed label: {e}")))?;
    let run = resolve_run(&state, req.run.as_deref())?;
    let count = run.regions()?.len();
    if req.rank == 0 || req.rank > count {
        return Err(ApiError::bad_request(format!(
            "rank {} outside 1..={count}",
            req.rank
        )));
    }
    let rec = state.with_store(&run, |store| {
        Ok(store.record(&run.id, req.rank, req.verdict)?)
    })?;
    Ok(Json(json!({
        "version": RUN_VERSION,
        "run": rec.run,
        "rank": rec.rank,
        "verdict": rec.verdict,
        "timestamp": rec.timestamp,
    })))
}

#[derive(Debug, Serialize)]
struct CurvePoint {
    k: usize,
    recall: f64,
}

fn curve(points: impl IntoIterator<Item = (usize, f64)>) -> Vec<CurvePoint> {
    points
        .into_iter()
        .map(|(k, recall)| CurvePoint { k, recall })
        .collect()
}

/// Human recall at k: regions labeled true among the top k, over the
/// ground-truth total when the run has one and over all true labels
/// otherwise.
pub fn human_recall(verdicts: &[Verdict], total: Option<usize>) -> Vec<(usize, f64)> {
    let denom = total.unwrap_or_else(|| verdicts.iter().filter(|v| **v == Verdict::True).count());
    let mut hits = 0;
    verdicts
        .iter()
        .enumerate()
        .map(|(i, v)| {
            hits += (*v == Verdict::True) as usize;
            let r = if denom == 0 {
                0.0
            } else {
                hits as f64 / denom as f64
            };
            (i + 1, r)
        })
        .collect()
}

async fn get_metrics(
    State(state): State<AppState>,
    Query(q): Query<RunQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let run = resolve_run(&state, q.run.as_deref())?;
    let views = region_views(&state, &run)?;
    let verdicts: Vec<Verdict> = views.iter().map(|v| v.verdict).collect();
    let truth = run.truth()?;
    let total = truth
        .as_ref()
        .map(|t| t.iter().map(|g| g.boxes.len()).sum::<usize>());
    let automatic = match &truth {
        Some(t) => {
            let regions = run.regions()?;
            let ks: Vec<usize> = (1..=regions.len()).collect();
            evaluate_recall_at_k(&regions, t, &ks).map(curve)
        }
        None => None,
    };
    let labeled = verdicts
        .iter()
        .filter(|v| **v != Verdict::Unlabeled)
        .count();
    Ok(Json(json!({
        "version": RUN_VERSION,
        "run": run.id,
        "regions": views.len(),
        "labeled": labeled,
        "ground_truth_total": total,
        "human": curve(human_recall(&verdicts, total)),
        "automatic": automatic,
    })))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/runs", get(get_runs))
        .route("/regions", get(get_regions))
        .route("/crops/{file}", get(get_crop))
        .route("/labels", post(post_label))
        .route("/metrics", get(get_metrics))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub fn serve(run_dir: PathBuf, addr: &str) -> Result<(), CliError> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Runtime(format!("bind {addr}: {e}")))?;
        let local = listener
            .local_addr()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("serving {} on http://{local}", run_dir.display());
        axum::serve(listener, router(AppState::new(run_dir)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))
    })
}
