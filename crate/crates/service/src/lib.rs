//! HTTP facade over the workbench core: sessions, slices, markers, filter
//! learning and labeling, scoring, selection and training jobs.

pub mod error;
pub mod jobs;
pub mod render;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use flim_core::criterion::{
    binarize_values, otsu_values, rank_and_recommend, FilterId, FilterLabel, Mask,
};
use flim_core::dataset::{Dataset, Modality, Split};
use flim_core::flim::{MarkerEntry, MarkerSet};
use flim_core::io::{parse_case_markers, save_checkpoint};
use flim_core::session::{Session, SessionConfig};
use flim_core::sunet::ArchSpec;
use flim_core::train::TrainConfig;
use flim_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use error::{ApiError, ApiResult};
use jobs::{Job, JobHandle, JobKind, JobSnapshot};
use render::{label_overlay, mask_overlay, render_png, slice_grid, ACTIVATION_COLOR};

pub struct SessionEntry {
    pub id: String,
    pub manifest_path: PathBuf,
    pub dataset: Arc<Dataset>,
    session: Mutex<Session>,
    /// Id of the mutating job in flight. Held while a mutation runs so
    /// writers are exclusive per session.
    active_job: Mutex<Option<String>>,
}

impl SessionEntry {
    /// A copy of the current state.
    pub fn snapshot(&self) -> Session {
        self.session.lock().expect("session lock").clone()
    }

    fn read<R>(&self, f: impl FnOnce(&Session) -> R) -> R {
        f(&self.session.lock().expect("session lock"))
    }

    /// Runs a synchronous mutation unless a job is in flight.
    fn mutate<R>(
        &self,
        f: impl FnOnce(&mut Session, &Dataset) -> flim_core::Result<R>,
    ) -> ApiResult<R> {
        let active = self.active_job.lock().expect("job slot lock");
        if let Some(j) = active.as_ref() {
            return Err(ApiError::conflict(format!("job {j} is running")));
        }
        let mut s = self.session.lock().expect("session lock");
        Ok(f(&mut s, &self.dataset)?)
    }
}

#[derive(Default)]
pub struct AppState {
    pub data_root: PathBuf,
    sessions: RwLock<HashMap<String, Arc<SessionEntry>>>,
    jobs: RwLock<HashMap<String, JobHandle>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(data_root: impl Into<PathBuf>) -> Arc<Self> {
        Arc::new(AppState {
            data_root: data_root.into(),
            ..AppState::default()
        })
    }

    fn fresh_id(&self, prefix: &str) -> String {
        format!(
            "{prefix}{}",
            self.next_id.fetch_add(1, Ordering::SeqCst) + 1
        )
    }

    pub fn session(&self, id: &str) -> ApiResult<Arc<SessionEntry>> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id:?}")))
    }

    pub fn job(&self, id: &str) -> ApiResult<JobHandle> {
        self.jobs
            .read()
            .expect("jobs lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown job {id:?}")))
    }

    /// Asks every unfinished job to stop at its next checkpoint.
    pub fn cancel_all(&self) {
        for j in self.jobs.read().expect("jobs lock").values() {
            if !j.snapshot().state.is_terminal() {
                j.request_cancel();
            }
        }
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_root.join(p)
        }
    }
}

type Work = Box<dyn FnOnce(&mut Session, &Dataset, &Job) -> flim_core::Result<Value> + Send>;

/// Starts a background job on a clone of the session. When `writes` is
/// set the clone replaces the session on success.
fn spawn_job(
    app: &Arc<AppState>,
    entry: &Arc<SessionEntry>,
    kind: JobKind,
    writes: bool,
    precheck: impl FnOnce(&Session) -> ApiResult<()>,
    work: Work,
) -> ApiResult<Response> {
    let mut active = entry.active_job.lock().expect("job slot lock");
    if let Some(j) = active.as_ref() {
        return Err(ApiError::conflict(format!("job {j} is running")));
    }
    let mut working = entry.snapshot();
    precheck(&working)?;
    let id = app.fresh_id("j");
    let job = Arc::new(Job::new(id.clone(), entry.id.clone(), kind));
    app.jobs
        .write()
        .expect("jobs lock")
        .insert(id.clone(), job.clone());
    if writes {
        *active = Some(id.clone());
    }
    drop(active);
    let entry = entry.clone();
    tokio::task::spawn_blocking(move || {
        job.start();
        let out = work(&mut working, &entry.dataset, &job);
        // Release the slot before publishing the terminal state so a client
        // that sees `done` can mutate immediately.
        let mut active = entry.active_job.lock().expect("job slot lock");
        let ok = match &out {
            Ok(_) if job.cancelled() => false,
            Ok(_) => {
                if writes {
                    *entry.session.lock().expect("session lock") = working;
                }
                true
            }
            Err(_) => false,
        };
        if writes {
            *active = None;
        }
        drop(active);
        match out {
            Ok(v) if ok => job.finish(v),
            Ok(_) => job.fail("cancelled".into()),
            Err(e) => job.fail(e.to_string()),
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": id }))).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(session_summary))
        .route("/api/sessions/{id}/images", get(list_images))
        .route("/api/sessions/{id}/images/{case}/slice", get(slice))
        .route(
            "/api/sessions/{id}/markers/{case}",
            put(put_markers).get(get_markers),
        )
        .route("/api/sessions/{id}/learn", post(learn))
        .route("/api/sessions/{id}/filters", get(filters))
        .route("/api/sessions/{id}/filters/{fid}/label", put(label_filter))
        .route("/api/sessions/{id}/score", post(score))
        .route("/api/sessions/{id}/ranking", get(ranking))
        .route("/api/sessions/{id}/select", post(select))
        .route(
            "/api/sessions/{id}/train-encoder-rest",
            post(train_encoder_rest),
        )
        .route("/api/sessions/{id}/train-decoder", post(train_decoder))
        .route("/api/sessions/{id}/evaluate", post(evaluate))
        .route("/api/sessions/{id}/metrics", get(metrics))
        .route("/api/sessions/{id}/checkpoint", post(checkpoint))
        .route("/api/jobs/{id}", get(job_status))
        .route("/api/jobs/{id}/cancel", post(cancel_job))
        .with_state(state)
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    manifest_path: String,
    budget: Option<usize>,
    seed: Option<u64>,
    stop_threshold: Option<f64>,
    arch: Option<ArchSpec>,
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> ApiResult<Response> {
    let manifest_path = app.resolve(&req.manifest_path);
    let path = manifest_path.clone();
    let dataset = tokio::task::spawn_blocking(move || Dataset::load(&path))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("bad manifest: {e}")))?;
    let mut config = SessionConfig::default();
    if let Some(b) = req.budget {
        config.budget = b;
    }
    if let Some(s) = req.seed {
        config.seed = s;
    }
    if req.stop_threshold.is_some() {
        config.stop_threshold = req.stop_threshold;
    }
    if let Some(a) = req.arch {
        config.arch = a;
    }
    let budget = config.budget;
    let session = Session::new(config)?;
    let id = app.fresh_id("s");
    let entry = Arc::new(SessionEntry {
        id: id.clone(),
        manifest_path,
        dataset: Arc::new(dataset),
        session: Mutex::new(session),
        active_job: Mutex::new(None),
    });
    app.sessions
        .write()
        .expect("sessions lock")
        .insert(id.clone(), entry);
    Ok((
        StatusCode::CREATED,
        Json(json!({ "id": id, "budget": budget })),
    )
        .into_response())
}

#[derive(Serialize)]
pub struct SessionSummary {
    pub id: String,
    pub manifest_path: PathBuf,
    pub budget: usize,
    pub selected: Vec<String>,
    pub marked: Vec<String>,
    pub encoder_layers: HashMap<Modality, usize>,
    pub filter_count: usize,
    pub scores_stale: bool,
    pub recommendation: Option<String>,
    pub trained: bool,
    pub active_job: Option<String>,
    pub audit: Vec<flim_core::session::SelectionEvent>,
}

async fn session_summary(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<SessionSummary>> {
    let e = app.session(&id)?;
    let active_job = e.active_job.lock().expect("job slot lock").clone();
    Ok(Json(e.read(|s| {
        SessionSummary {
            id: id.clone(),
            manifest_path: e.manifest_path.clone(),
            budget: s.config().budget,
            selected: s.selected().to_vec(),
            marked: s.all_markers().map(|m| m.image_id.clone()).collect(),
            encoder_layers: Modality::BOTH
                .iter()
                .map(|&m| (m, s.encoder(m).len()))
                .collect(),
            filter_count: s.filters().len(),
            scores_stale: s.scores_stale(),
            recommendation: s.recommendation().map(str::to_string),
            trained: s.net().is_some(),
            active_job,
            audit: s.audit().to_vec(),
        }
    })))
}

async fn list_images(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<Value>> {
    let e = app.session(&id)?;
    let selected = e.read(|s| s.selected().to_vec());
    let cases: Vec<Value> = e
        .dataset
        .cases
        .iter()
        .map(|c| {
            json!({
                "case_id": c.id,
                "split": c.split,
                "dims": c.dims(),
                "has_gt": c.gt.is_some(),
                "selected": selected.contains(&c.id),
            })
        })
        .collect();
    Ok(Json(Value::Array(cases)))
}

#[derive(Deserialize)]
struct SliceQuery {
    #[serde(default)]
    axis: usize,
    #[serde(default)]
    index: usize,
    channel: Option<String>,
    overlay: Option<String>,
}

async fn slice(
    State(app): State<Arc<AppState>>,
    UrlPath((id, case_id)): UrlPath<(String, String)>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Response> {
    let e = app.session(&id)?;
    let case = e.dataset.get(&case_id)?;
    let modality: Modality = q.channel.as_deref().unwrap_or("flair").parse()?;
    let grid = slice_grid(case.dims(), q.axis, q.index)?;
    let overlay = match q.overlay.as_deref().unwrap_or("none") {
        "none" => None,
        "gt" => Some(label_overlay(case.gt()?)),
        "prediction" => {
            let net = e.read(|s| s.net().cloned());
            let net = net.ok_or_else(|| ApiError::conflict("the decoder has not been trained"))?;
            Some(label_overlay(&net.predict(&case.flair, &case.t1gd)?))
        }
        other => match other.strip_prefix("activation:") {
            Some(fid) => {
                let fid: FilterId = fid.parse()?;
                let acts = e.read(|s| s.layer1_activations(case))?;
                let act = acts
                    .get(&fid)
                    .ok_or_else(|| Error::UnknownFilter(fid.to_string()))?;
                Some(mask_overlay(
                    &activation_mask(act, case.dims())?,
                    ACTIVATION_COLOR,
                ))
            }
            None => {
                return Err(ApiError::unprocessable(format!(
                    "unknown overlay {other:?}"
                )))
            }
        },
    };
    let png = render_png(case.image(modality).channel(0), &grid, overlay.as_deref());
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

/// Otsu-binarized activation, as the criterion sees it. A constant map has
/// no foreground.
pub fn activation_mask(act: &[f32], dims: &[usize]) -> flim_core::Result<Mask> {
    match otsu_values(act) {
        Ok(t) => Ok(binarize_values(act, dims, t)),
        Err(Error::ConstantInput) => Ok(Mask::new(dims.to_vec(), vec![false; act.len()])),
        Err(e) => Err(e),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MarkerBody {
    image_id: Option<String>,
    entries: Vec<MarkerEntry>,
}

fn parse_marker_body(
    headers: &HeaderMap,
    body: &str,
    case_id: &str,
    dims: &[usize],
) -> ApiResult<MarkerSet> {
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("json"));
    if !is_json {
        return Ok(parse_case_markers(body, case_id, dims)?);
    }
    let parsed: MarkerBody = serde_json::from_str(body)
        .map_err(|e| ApiError::unprocessable(format!("marker JSON: {e}")))?;
    if parsed.image_id.as_deref().is_some_and(|i| i != case_id) {
        return Err(ApiError::unprocessable(
            "image_id does not match the case in the path",
        ));
    }
    Ok(MarkerSet {
        image_id: case_id.to_string(),
        entries: parsed.entries,
    })
}

async fn put_markers(
    State(app): State<Arc<AppState>>,
    UrlPath((id, case_id)): UrlPath<(String, String)>,
    headers: HeaderMap,
    body: String,
) -> ApiResult<Json<MarkerSet>> {
    let e = app.session(&id)?;
    let case = e.dataset.get(&case_id)?;
    let set = parse_marker_body(&headers, &body, &case_id, case.dims())?;
    let stored = set.clone();
    e.mutate(|s, ds| s.set_markers(ds, set))?;
    Ok(Json(stored))
}

async fn get_markers(
    State(app): State<Arc<AppState>>,
    UrlPath((id, case_id)): UrlPath<(String, String)>,
) -> ApiResult<Json<MarkerSet>> {
    let e = app.session(&id)?;
    e.dataset.get(&case_id)?;
    let m = e.read(|s| s.markers(&case_id).cloned());
    Ok(Json(m.unwrap_or_else(|| MarkerSet::new(case_id.as_str()))))
}

async fn learn(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let e = app.session(&id)?;
    spawn_job(
        &app,
        &e,
        JobKind::LearnLayer1,
        true,
        |s| {
            if s.selected().iter().any(|c| s.markers(c).is_some()) {
                Ok(())
            } else {
                Err(ApiError::conflict("no selected image has markers"))
            }
        },
        Box::new(|s, ds, _| {
            s.learn_layer1(ds)?;
            let scored = s.annotations().has_labels();
            if scored {
                s.score(ds)?;
            }
            Ok(json!({ "filters": s.filters().len(), "scored": scored }))
        }),
    )
}

async fn filters(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<Value>> {
    let e = app.session(&id)?;
    Ok(Json(e.read(|s| json!(s.filters()))))
}

#[derive(Deserialize)]
struct LabelBody {
    label: String,
}

async fn label_filter(
    State(app): State<Arc<AppState>>,
    UrlPath((id, fid)): UrlPath<(String, String)>,
    Json(body): Json<LabelBody>,
) -> ApiResult<Json<Value>> {
    let e = app.session(&id)?;
    let fid: FilterId = fid.parse()?;
    let label: FilterLabel = body.label.parse()?;
    e.mutate(|s, _| {
        s.label_filter(fid, label)?;
        Ok(())
    })?;
    Ok(Json(json!({ "id": fid, "label": label })))
}

async fn score(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let e = app.session(&id)?;
    spawn_job(
        &app,
        &e,
        JobKind::Score,
        true,
        |s| {
            if !s.has_layer1() {
                Err(ApiError::conflict("layer 1 has not been learned"))
            } else if !s.annotations().has_labels() {
                Err(Error::NoLabeledFilters.into())
            } else {
                Ok(())
            }
        },
        Box::new(|s, ds, _| {
            let rows = s.score(ds)?.rows.len();
            Ok(json!({ "rows": rows, "recommended": s.recommendation() }))
        }),
    )
}

async fn ranking(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let e = app.session(&id)?;
    let table = e.read(|s| s.ranking().map(|(t, _)| t.clone()))?;
    if table.is_empty() {
        return Ok(StatusCode::NO_CONTENT.into_response());
    }
    let recommended = rank_and_recommend(&table)?;
    Ok(Json(json!({ "table": table, "recommended": recommended })).into_response())
}

#[derive(Deserialize)]
struct SelectBody {
    case_id: String,
}

async fn select(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<SelectBody>,
) -> ApiResult<Json<Value>> {
    let e = app.session(&id)?;
    let ev = e.mutate(|s, ds| s.select(ds, &body.case_id))?;
    Ok(Json(json!(ev)))
}

async fn train_encoder_rest(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let e = app.session(&id)?;
    spawn_job(
        &app,
        &e,
        JobKind::TrainEncoderRest,
        true,
        |s| {
            if s.has_layer1() {
                Ok(())
            } else {
                Err(ApiError::conflict("layer 1 has not been learned"))
            }
        },
        Box::new(|s, ds, _| {
            s.train_encoder_rest(ds)?;
            Ok(json!({ "layers": s.encoder(Modality::Flair).len() }))
        }),
    )
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainBody {
    config: Option<TrainConfig>,
}

async fn train_decoder(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let e = app.session(&id)?;
    let req: TrainBody = if body.iter().all(u8::is_ascii_whitespace) {
        TrainBody::default()
    } else {
        serde_json::from_slice(&body)
            .map_err(|e| ApiError::unprocessable(format!("train config: {e}")))?
    };
    let config = req.config.unwrap_or_default();
    config.validate()?;
    let has_gt = e.dataset.split(Split::Train).any(|c| c.gt.is_some());
    spawn_job(
        &app,
        &e,
        JobKind::TrainDecoder,
        true,
        move |s| {
            if !s.encoders_complete() {
                Err(ApiError::conflict("encoders are incomplete"))
            } else if !has_gt {
                Err(ApiError::unprocessable("no training case has ground truth"))
            } else {
                Ok(())
            }
        },
        Box::new(move |s, ds, job| {
            let total = config.epochs;
            let log = s.train_decoder(ds, &config, &mut |ep, _| {
                job.record_epoch(*ep, total);
                !job.cancelled()
            })?;
            Ok(
                json!({ "epochs": log.epochs.len(), "final_loss": log.epochs.last().map(|e| e.mean_loss) }),
            )
        }),
    )
}

async fn evaluate(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let e = app.session(&id)?;
    spawn_job(
        &app,
        &e,
        JobKind::Evaluate,
        false,
        |s| {
            if s.net().is_some() {
                Ok(())
            } else {
                Err(ApiError::conflict("the decoder has not been trained"))
            }
        },
        Box::new(|s, ds, _| Ok(json!(s.evaluate(ds)?))),
    )
}

async fn metrics(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<Value>> {
    let e = app.session(&id)?;
    let s = e.snapshot();
    let ds = e.dataset.clone();
    let report = tokio::task::spawn_blocking(move || s.evaluate(&ds))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(json!(report)))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct CheckpointBody {
    path: Option<String>,
}

async fn checkpoint(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let e = app.session(&id)?;
    let req: CheckpointBody = if body.iter().all(u8::is_ascii_whitespace) {
        CheckpointBody::default()
    } else {
        serde_json::from_slice(&body)
            .map_err(|e| ApiError::unprocessable(format!("checkpoint request: {e}")))?
    };
    let path = match req.path {
        Some(p) => app.resolve(&p),
        None => app.data_root.join("checkpoints").join(format!("{id}.json")),
    };
    let ck = e.read(|s| s.checkpoint());
    save_checkpoint(&ck, &path)?;
    Ok(Json(json!({ "path": path })))
}

async fn job_status(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<JobSnapshot>> {
    Ok(Json(app.job(&id)?.snapshot()))
}

async fn cancel_job(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<JobSnapshot>> {
    let job = app.job(&id)?;
    job.request_cancel();
    Ok(Json(job.snapshot()))
}

/// Serves until `shutdown` resolves, then cancels running jobs.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = router(state.clone());
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            shutdown.await;
            state.cancel_all();
        })
        .await
}
