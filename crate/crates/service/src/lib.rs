//! HTTP job service over the session store: uploads start abduction jobs,
//! edit requests start sampling jobs, clients poll for progress and fetch
//! images by content hash.

pub mod jobs;
mod openapi;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::multipart::MultipartError;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use tower_http::cors::{Any, CorsLayer};

use dac_core::abduction::{AbductionConfig, AbductionObserver, Stage};
use dac_core::editor::{
    echo_for, find_cached, list_edits, predict_edit, save_result, score_result, valid_hash, EditContext, EditRequest,
};
use dac_core::eval::Metrics;
use dac_core::generator::{open_backend, BackendKind, LoadedBackend};
use dac_core::imaging::Image;
use dac_core::lora::{check_beta, check_eta};
use dac_core::session::{eta_key, SessionStatus, SessionStore, EDITS_DIR, PROGRESS_WINDOW, SOURCE_FILE};
use dac_core::{DacError, Device, Result};

pub use jobs::{EditBody, Job, JobKind, JobOutput, JobProgress, JobStatus};

/// Most images one edit request may ask for.
pub const MAX_IMAGES_PER_REQUEST: usize = 64;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub backend: BackendKind,
    pub model: PathBuf,
    pub sessions: PathBuf,
    /// Upper bound on an upload request body, in bytes.
    pub max_upload_bytes: usize,
    pub abduction_workers: usize,
    pub edit_workers: usize,
    /// Origin allowed by CORS; any origin when unset.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Toy,
            model: PathBuf::from("models/toy"),
            sessions: PathBuf::from("sessions"),
            max_upload_bytes: 8 << 20,
            abduction_workers: 1,
            edit_workers: 2,
            cors_origin: None,
        }
    }
}

pub struct AppState {
    backend: LoadedBackend,
    store: SessionStore,
    config: ServiceConfig,
    jobs: Mutex<BTreeMap<String, Job>>,
    abduction_slots: Arc<Semaphore>,
    edit_slots: Arc<Semaphore>,
    /// Serializes the jobs writing into one session directory.
    session_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    images: Mutex<HashMap<String, PathBuf>>,
}

/// What a restart found in the session store.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Recovery {
    /// Jobs interrupted while running, now failed.
    pub interrupted: Vec<String>,
    /// Jobs that had not started, queued again.
    pub requeued: Vec<String>,
}

impl AppState {
    pub fn new(backend: LoadedBackend, config: ServiceConfig) -> Result<Arc<Self>> {
        if config.abduction_workers == 0 || config.edit_workers == 0 {
            return Err(DacError::Config("worker counts must be positive".into()));
        }
        Ok(Arc::new(Self {
            store: SessionStore::new(&config.sessions)?,
            abduction_slots: Arc::new(Semaphore::new(config.abduction_workers)),
            edit_slots: Arc::new(Semaphore::new(config.edit_workers)),
            backend,
            config,
            jobs: Mutex::new(BTreeMap::new()),
            session_locks: Mutex::new(HashMap::new()),
            images: Mutex::new(HashMap::new()),
        }))
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        self.jobs.lock().unwrap().get(id).cloned()
    }

    /// Rebuilds the job table from disk: sessions and edit jobs left running
    /// by a previous process are failed, queued ones are queued again. Must
    /// run inside the tokio runtime.
    pub fn recover(self: &Arc<Self>) -> Result<Recovery> {
        let mut report = Recovery::default();
        for id in self.store.recover()? {
            report.interrupted.push(jobs::abduct_job_id(&id));
        }
        for m in self.store.list()? {
            let job = Job::from_manifest(&m);
            let queued = job.status == JobStatus::Queued;
            let id = job.id.clone();
            self.jobs.lock().unwrap().insert(id.clone(), job);
            if queued {
                report.requeued.push(id);
                self.spawn_abduction(m.id.clone());
            }
            for mut job in Job::load_all(&self.store.root().join(&m.id))? {
                match job.status {
                    JobStatus::Running => {
                        job.transition(JobStatus::Failed)?;
                        job.error = Some("interrupted by a service restart".into());
                        job.persist(self.store.root())?;
                        report.interrupted.push(job.id.clone());
                    }
                    JobStatus::Queued => report.requeued.push(job.id.clone()),
                    _ => {}
                }
                let requeue = job.status == JobStatus::Queued;
                let id = job.id.clone();
                self.jobs.lock().unwrap().insert(id.clone(), job);
                if requeue {
                    self.spawn_edit(id);
                }
            }
        }
        Ok(report)
    }

    fn update_job(&self, id: &str, f: impl FnOnce(&mut Job) -> Result<()>) -> Result<Job> {
        let mut jobs = self.jobs.lock().unwrap();
        let job = jobs
            .get_mut(id)
            .ok_or_else(|| DacError::NotFound(format!("job `{id}`")))?;
        f(job)?;
        Ok(job.clone())
    }

    fn session_lock(&self, session_id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.session_locks
            .lock()
            .unwrap()
            .entry(session_id.to_string())
            .or_default()
            .clone()
    }

    fn fail_job(&self, id: &str, err: &DacError) {
        log::warn!("job {id} failed: {err}");
        let updated = self.update_job(id, |j| {
            if j.status == JobStatus::Queued {
                j.transition(JobStatus::Running)?;
            }
            if !j.status.is_finished() {
                j.transition(JobStatus::Failed)?;
            }
            j.error = Some(err.to_string());
            Ok(())
        });
        if let Ok(job) = updated {
            if let Err(e) = job.persist(self.store.root()) {
                log::warn!("could not persist job {id}: {e}");
            }
        }
    }

    fn spawn_abduction(self: &Arc<Self>, session_id: String) {
        let state = self.clone();
        tokio::spawn(async move {
            let job_id = jobs::abduct_job_id(&session_id);
            let _permit = state.abduction_slots.clone().acquire_owned().await.expect("semaphore is never closed");
            let _guard = state.session_lock(&session_id).lock_owned().await;
            let worker = state.clone();
            let id = job_id.clone();
            let outcome = tokio::task::spawn_blocking(move || worker.run_abduction(&id, &session_id)).await;
            match outcome {
                Ok(Ok(())) => {}
                Ok(Err(e)) => state.fail_job(&job_id, &e),
                Err(e) => state.fail_job(&job_id, &DacError::State(format!("worker panicked: {e}"))),
            }
        });
    }

    fn run_abduction(&self, job_id: &str, session_id: &str) -> Result<()> {
        self.update_job(job_id, |j| j.transition(JobStatus::Running))?;
        let mut session = self.store.open(session_id)?;
        let mut observer = JobObserver {
            state: self,
            job_id,
            window: VecDeque::new(),
        };
        session.abduct(self.backend.backend.as_ref(), &mut observer)?;
        self.update_job(job_id, |j| {
            j.progress.iteration = j.progress.total;
            j.transition(JobStatus::Done)
        })?;
        Ok(())
    }

    /// Whether an edit needs a text adapter that has not been abducted yet.
    fn needs_abduction(&self, session_id: &str, eta: Option<f64>) -> bool {
        let Some(eta) = eta else { return false };
        match self.store.open(session_id) {
            Ok(s) => {
                let key = eta_key(eta);
                key != eta_key(s.manifest().config.eta) && !s.manifest().delta_cache.contains_key(&key)
            }
            Err(_) => false,
        }
    }

    fn spawn_edit(self: &Arc<Self>, job_id: String) {
        let state = self.clone();
        tokio::spawn(async move {
            let Some(job) = state.job(&job_id) else { return };
            let eta = job.request.as_ref().and_then(|r| r.eta);
            // A new annealing floor trains an adapter, which counts against
            // the abduction pool; take that slot first so the order is fixed.
            let _abduct = if state.needs_abduction(&job.session_id, eta) {
                Some(state.abduction_slots.clone().acquire_owned().await.expect("semaphore is never closed"))
            } else {
                None
            };
            let _permit = state.edit_slots.clone().acquire_owned().await.expect("semaphore is never closed");
            let _guard = state.session_lock(&job.session_id).lock_owned().await;
            let worker = state.clone();
            let id = job_id.clone();
            let outcome = tokio::task::spawn_blocking(move || worker.run_edit(&id)).await;
            match outcome {
                Ok(Ok(())) => {}
                Ok(Err(e)) => state.fail_job(&job_id, &e),
                Err(e) => state.fail_job(&job_id, &DacError::State(format!("worker panicked: {e}"))),
            }
        });
    }

    fn run_edit(&self, job_id: &str) -> Result<()> {
        let job = self.update_job(job_id, |j| j.transition(JobStatus::Running))?;
        job.persist(self.store.root())?;
        let body = job.request.clone().ok_or_else(|| DacError::State("edit job without a request".into()))?;
        let backend = self.backend.backend.as_ref();
        let mut session = self.store.open(&job.session_id)?;
        let ctx = EditContext::load(&mut session, backend, body.eta)?;
        let metrics = Metrics::toy(backend, self.backend.corpus.clone());
        for req in edit_requests(&body) {
            let echo = echo_for(&ctx, &req);
            let output = match find_cached(session.dir(), &echo)? {
                Some(record) => JobOutput {
                    url: image_url(&record.hash),
                    hash: record.hash,
                    beta: echo.beta,
                    eta: echo.eta,
                    seed: echo.seed,
                    image_alignment: record.scores.as_ref().map(|s| s.image_alignment),
                    text_alignment: record.scores.as_ref().map(|s| s.text_alignment),
                    cached: true,
                },
                None => {
                    let mut result = predict_edit(backend, &ctx, &req)?;
                    score_result(&mut result, session.source(), &metrics)?;
                    let (png, _) = save_result(session.dir(), &result)?;
                    self.images.lock().unwrap().insert(result.hash.clone(), png);
                    JobOutput {
                        url: image_url(&result.hash),
                        beta: echo.beta,
                        eta: echo.eta,
                        seed: echo.seed,
                        image_alignment: result.scores.as_ref().map(|s| s.image_alignment),
                        text_alignment: result.scores.as_ref().map(|s| s.text_alignment),
                        hash: result.hash,
                        cached: false,
                    }
                }
            };
            let job = self.update_job(job_id, |j| {
                j.outputs.push(output);
                j.progress.iteration = j.outputs.len();
                Ok(())
            })?;
            job.persist(self.store.root())?;
        }
        let job = self.update_job(job_id, |j| j.transition(JobStatus::Done))?;
        job.persist(self.store.root())
    }

    /// Path of a stored PNG by content hash: an edit output or a session source.
    fn find_image(&self, hash: &str) -> Result<Option<PathBuf>> {
        if let Some(p) = self.images.lock().unwrap().get(hash) {
            return Ok(Some(p.clone()));
        }
        for m in self.store.list()? {
            let dir = self.store.root().join(&m.id);
            let edit = dir.join(EDITS_DIR).join(format!("{hash}.png"));
            let found = if edit.is_file() {
                Some(edit)
            } else if m.source_hash == hash {
                Some(dir.join(SOURCE_FILE))
            } else {
                None
            };
            if let Some(p) = found {
                self.images.lock().unwrap().insert(hash.to_string(), p.clone());
                return Ok(Some(p));
            }
        }
        Ok(None)
    }
}

/// The individual edits a request expands to: sweeps in ascending β from
/// one seed, otherwise consecutive seeds.
fn edit_requests(body: &EditBody) -> Vec<EditRequest> {
    let base = EditRequest {
        beta: body.beta,
        eta_override: body.eta,
        seed: body.seed,
        steps: body.steps,
        use_t_aux: body.use_t_aux,
        anneal: body.anneal,
    };
    match &body.sweep_betas {
        Some(betas) => {
            let mut betas = betas.clone();
            betas.sort_by(|a, b| a.total_cmp(b));
            betas
                .into_iter()
                .map(|beta| EditRequest { beta, ..base.clone() })
                .collect()
        }
        None => (0..body.n_seeds as u64)
            .map(|i| EditRequest {
                seed: body.seed.wrapping_add(i),
                ..base.clone()
            })
            .collect(),
    }
}

fn image_url(hash: &str) -> String {
    format!("/images/{hash}")
}

struct JobObserver<'a> {
    state: &'a AppState,
    job_id: &'a str,
    window: VecDeque<f64>,
}

impl AbductionObserver for JobObserver<'_> {
    fn on_iteration(&mut self, stage: Stage, iteration: usize, _total: usize, loss: f64) -> Result<()> {
        if iteration == 1 {
            self.window.clear();
        }
        self.window.push_back(loss);
        if self.window.len() > PROGRESS_WINDOW {
            self.window.pop_front();
        }
        let smoothed = self.window.iter().sum::<f64>() / self.window.len() as f64;
        self.state.update_job(self.job_id, |j| {
            j.record_iteration(stage, iteration, loss, smoothed);
            Ok(())
        })?;
        Ok(())
    }
}

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

    fn unprocessable(err: impl ToString) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, err.to_string())
    }
}

impl From<DacError> for ApiError {
    fn from(e: DacError) -> Self {
        let status = match &e {
            DacError::NotFound(_) => StatusCode::NOT_FOUND,
            DacError::Validation(_) | DacError::Config(_) | DacError::Range { .. } => StatusCode::BAD_REQUEST,
            DacError::State(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<MultipartError> for ApiError {
    fn from(e: MultipartError) -> Self {
        Self::new(e.status(), e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

/// Applies JSON overrides to a base configuration, rejecting unknown keys.
fn merge_config(base: &AbductionConfig, overrides: serde_json::Map<String, Value>) -> ApiResult<AbductionConfig> {
    let mut value = serde_json::to_value(base).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let obj = value.as_object_mut().expect("config serializes to an object");
    for (k, v) in overrides {
        if !obj.contains_key(&k) {
            return Err(ApiError::bad_request(format!("unknown field `{k}`")));
        }
        obj.insert(k, v);
    }
    let cfg: AbductionConfig =
        serde_json::from_value(value).map_err(|e| ApiError::bad_request(format!("invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

async fn create_session(State(st): State<Arc<AppState>>, mut form: Multipart) -> ApiResult<Response> {
    let (mut image, mut p, mut p_prime) = (None, None, None);
    let mut overrides = serde_json::Map::new();
    while let Some(field) = form.next_field().await? {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "image" => image = Some(field.bytes().await?),
            "p" => p = Some(field.text().await?),
            "p_prime" => p_prime = Some(field.text().await?),
            "config" => {
                let text = field.text().await?;
                match serde_json::from_str::<Value>(&text) {
                    Ok(Value::Object(m)) => overrides.extend(m),
                    _ => return Err(ApiError::bad_request("`config` must be a JSON object")),
                }
            }
            _ => {
                let text = field.text().await?;
                let v = serde_json::from_str(&text).unwrap_or(Value::String(text));
                overrides.insert(name, v);
            }
        }
    }
    let image = image.ok_or_else(|| ApiError::bad_request("missing field `image`"))?;
    let p = p.ok_or_else(|| ApiError::bad_request("missing field `p`"))?;
    let p_prime = p_prime.ok_or_else(|| ApiError::bad_request("missing field `p_prime`"))?;
    let cfg = merge_config(&st.backend.kind.abduction_defaults(), overrides)?;
    let source = Image::from_encoded(&image, None).map_err(|e| ApiError::bad_request(format!("image does not decode: {e}")))?;
    let worker = st.clone();
    let session = blocking(move || {
        worker
            .store
            .create(worker.backend.backend.as_ref(), &source, &p, &p_prime, cfg)
    })
    .await
    .map_err(|e| if e.status.is_server_error() { e } else { ApiError::bad_request(e.message) })?;
    let job = Job::from_manifest(session.manifest());
    let job_id = job.id.clone();
    st.jobs.lock().unwrap().insert(job_id.clone(), job);
    st.spawn_abduction(session.id().to_string());
    Ok((
        StatusCode::CREATED,
        Json(json!({ "session_id": session.id(), "job_id": job_id })),
    )
        .into_response())
}

fn validate_edit(body: &EditBody) -> ApiResult<()> {
    check_beta(body.beta).map_err(ApiError::unprocessable)?;
    if let Some(eta) = body.eta {
        check_eta(eta).map_err(ApiError::unprocessable)?;
    }
    if body.steps == 0 {
        return Err(ApiError::unprocessable("steps must be positive"));
    }
    match &body.sweep_betas {
        Some(betas) => {
            for &b in betas {
                check_beta(b).map_err(ApiError::unprocessable)?;
            }
            if body.n_seeds != 1 {
                return Err(ApiError::unprocessable("sweep_betas and n_seeds cannot be combined"));
            }
        }
        None if body.n_seeds == 0 => return Err(ApiError::unprocessable("n_seeds must be positive")),
        None => {}
    }
    if body.is_empty() || body.len() > MAX_IMAGES_PER_REQUEST {
        return Err(ApiError::unprocessable(format!(
            "a request produces between 1 and {MAX_IMAGES_PER_REQUEST} images"
        )));
    }
    Ok(())
}

async fn create_edit(
    State(st): State<Arc<AppState>>,
    Path(session_id): Path<String>,
    body: std::result::Result<Json<EditBody>, JsonRejection>,
) -> ApiResult<Response> {
    let worker = st.clone();
    let sid = session_id.clone();
    let session = blocking(move || worker.store.open(&sid)).await?;
    let Json(body) = body.map_err(|e| ApiError::new(e.status(), e.body_text()))?;
    validate_edit(&body)?;
    if session.status() != SessionStatus::Done {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("session {session_id} is {}, not done", session.status().as_str()),
        ));
    }
    session.check_backend(st.backend.backend.as_ref())?;
    let job_id = jobs::edit_job_id(&session_id, &body)?;
    if let Some(existing) = st.job(&job_id) {
        if existing.status != JobStatus::Failed {
            return Ok((StatusCode::OK, Json(json!({ "job_id": job_id, "status": existing.status }))).into_response());
        }
    }
    let job = Job::new(job_id.clone(), body.kind(), session_id, body.len(), Some(body));
    job.persist(st.store.root())?;
    st.jobs.lock().unwrap().insert(job_id.clone(), job);
    st.spawn_edit(job_id.clone());
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id, "status": JobStatus::Queued }))).into_response())
}

#[derive(Deserialize)]
struct JobFilter {
    session: Option<String>,
}

async fn list_jobs(State(st): State<Arc<AppState>>, Query(f): Query<JobFilter>) -> Json<Vec<Job>> {
    let jobs = st.jobs.lock().unwrap();
    Json(
        jobs.values()
            .filter(|j| f.session.as_deref().is_none_or(|s| j.session_id == s))
            .cloned()
            .collect(),
    )
}

async fn get_job(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    st.job(&id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("job `{id}` not found")))
}

async fn list_sessions(State(st): State<Arc<AppState>>) -> ApiResult<Response> {
    let list = blocking(move || st.store.list()).await?;
    Ok(Json(list).into_response())
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = blocking(move || st.store.open(&id)).await?;
    Ok(Json(session.manifest().clone()).into_response())
}

async fn get_edits(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let records = blocking(move || {
        let s = st.store.open(&id)?;
        list_edits(s.dir())
    })
    .await?;
    let out: Vec<Value> = records
        .into_iter()
        .map(|r| {
            let mut v = serde_json::to_value(&r).unwrap_or(Value::Null);
            v["url"] = Value::String(image_url(&r.hash));
            v
        })
        .collect();
    Ok(Json(out).into_response())
}

async fn get_image(State(st): State<Arc<AppState>>, Path(hash): Path<String>) -> ApiResult<Response> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, format!("image `{hash}` not found"));
    if !valid_hash(&hash) {
        return Err(not_found());
    }
    let h = hash.clone();
    let bytes = blocking(move || match st.find_image(&h)? {
        Some(p) => Ok(Some(std::fs::read(p)?)),
        None => Ok(None),
    })
    .await?
    .ok_or_else(not_found)?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png"),
            (header::CACHE_CONTROL, "public, max-age=31536000, immutable"),
        ],
        bytes,
    )
        .into_response())
}

async fn get_spec() -> Json<Value> {
    Json(openapi::document())
}

pub fn router(state: Arc<AppState>) -> Result<Router> {
    let origin = match &state.config.cors_origin {
        Some(o) => tower_http::cors::AllowOrigin::exact(
            HeaderValue::from_str(o).map_err(|e| DacError::Config(format!("CORS origin `{o}`: {e}")))?,
        ),
        None => tower_http::cors::AllowOrigin::from(Any),
    };
    let cors = CorsLayer::new().allow_origin(origin).allow_methods(Any).allow_headers(Any);
    let limit = state.config.max_upload_bytes;
    Ok(Router::new()
        .route(
            "/sessions",
            get(list_sessions).post(create_session).layer(DefaultBodyLimit::max(limit)),
        )
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/edits", get(get_edits).post(create_edit))
        .route("/jobs", get(list_jobs))
        .route("/jobs/{id}", get(get_job))
        .route("/images/{hash}", get(get_image))
        .route("/spec", get(get_spec))
        .layer(cors)
        .with_state(state))
}

/// Loads the backend, recovers the store and returns the ready router.
pub async fn start(config: ServiceConfig) -> Result<(Router, Arc<AppState>)> {
    let (kind, model) = (config.backend, config.model.clone());
    let backend = tokio::task::spawn_blocking(move || open_backend(kind, &model, &Device::Cpu))
        .await
        .map_err(|e| DacError::State(format!("backend loader panicked: {e}")))??;
    let state = AppState::new(backend, config)?;
    let report = state.recover()?;
    if !report.interrupted.is_empty() || !report.requeued.is_empty() {
        log::info!(
            "recovered store: {} interrupted, {} requeued",
            report.interrupted.len(),
            report.requeued.len()
        );
    }
    Ok((router(state.clone())?, state))
}

/// Serves until interrupted.
pub fn serve(config: ServiceConfig, addr: SocketAddr) -> Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let (app, _state) = start(config).await?;
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
