//! HTTP routes and the shared service state.

use std::io::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::multipart::{Multipart, MultipartError};
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dermachat_core::eval::{EvalRecord, LatencyStats, Percentiles, FORM_ITEMS};
use dermachat_core::eval::Likert;
use dermachat_core::model::{FinishReason, Generation};
use dermachat_core::prompts::{fit_prompt, Role, CANONICAL_PROMPTS, DIAGNOSIS_QUERY};
use dermachat_core::{checkpoint, Component, GenerationSettings, Image, PipelineModel, PrefixEmbedding};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use tower_http::services::ServeDir;

use crate::config::{check_generation, ServeConfig};
use crate::error::ServeResult;
use crate::session::{new_session_id, unix_ms, ImageMeta, Session, SessionStore, SessionView, TurnRecord};

/// Seconds a client is told to wait while the checkpoint loads.
pub const RETRY_AFTER_S: u64 = 2;

#[derive(Clone)]
pub enum ModelSlot {
    Loading,
    Ready(Arc<PipelineModel>),
    Failed(String),
}

struct Inner {
    config: ServeConfig,
    model: RwLock<ModelSlot>,
    sessions: SessionStore,
    pool: Arc<Semaphore>,
    latencies_ms: Mutex<Vec<f64>>,
    eval_records: tokio::sync::Mutex<Vec<EvalRecord>>,
}

/// Cheap to clone; every handler sees the same state.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// State with no model yet; requests needing one get 503 until
    /// `set_model` or `load_checkpoint` completes.
    pub fn new(config: ServeConfig) -> ServeResult<Self> {
        config.validate()?;
        let sessions = SessionStore::new(config.session_ttl(), config.persist_dir.clone());
        let restored = sessions.restore()?;
        if restored > 0 {
            log::info!("restored {restored} persisted sessions");
        }
        let pool = Arc::new(Semaphore::new(config.worker_count()));
        Ok(Self {
            inner: Arc::new(Inner {
                config,
                model: RwLock::new(ModelSlot::Loading),
                sessions,
                pool,
                latencies_ms: Mutex::new(Vec::new()),
                eval_records: tokio::sync::Mutex::new(Vec::new()),
            }),
        })
    }

    pub fn with_model(config: ServeConfig, model: PipelineModel) -> ServeResult<Self> {
        let s = Self::new(config)?;
        s.set_model(model);
        Ok(s)
    }

    pub fn config(&self) -> &ServeConfig {
        &self.inner.config
    }

    pub fn set_model(&self, model: PipelineModel) {
        *self.inner.model.write().expect("model slot") = ModelSlot::Ready(Arc::new(model));
    }

    pub fn model_slot(&self) -> ModelSlot {
        self.inner.model.read().expect("model slot").clone()
    }

    /// Loads `path` on a background thread.
    pub fn load_checkpoint(&self, path: &Path) -> std::thread::JoinHandle<()> {
        let state = self.clone();
        let path = path.to_path_buf();
        std::thread::spawn(move || match checkpoint::load(&path) {
            Ok(loaded) => {
                log::info!("checkpoint {} loaded", path.display());
                state.set_model(loaded.model);
            }
            Err(e) => {
                log::error!("checkpoint {} failed to load: {e}", path.display());
                *state.inner.model.write().expect("model slot") = ModelSlot::Failed(e.to_string());
            }
        })
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.inner.sessions
    }

    /// Server-side reply latencies in milliseconds, in arrival order.
    pub fn latencies_ms(&self) -> Vec<f64> {
        self.inner.latencies_ms.lock().expect("latency log").clone()
    }

    fn model(&self) -> Result<Arc<PipelineModel>, ApiError> {
        match self.model_slot() {
            ModelSlot::Ready(m) => Ok(m),
            ModelSlot::Loading => Err(ApiError::loading()),
            ModelSlot::Failed(e) => {
                Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, format!("checkpoint failed to load: {e}")))
            }
        }
    }

    fn session(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<Session>>, ApiError> {
        self.inner
            .sessions
            .get(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session {id:?} (unknown or expired)")))
    }

    /// Runs `job` on the blocking pool, at most `workers` at a time, and
    /// gives up after the configured timeout.
    async fn infer<T: Send + 'static>(
        &self,
        job: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
    ) -> Result<T, ApiError> {
        let timeout = self.inner.config.request_timeout();
        let pool = self.inner.pool.clone();
        let run = async move {
            let permit = pool.acquire_owned().await.expect("worker pool is never closed");
            tokio::task::spawn_blocking(move || {
                let _permit = permit;
                job()
            })
            .await
        };
        match tokio::time::timeout(timeout, run).await {
            Err(_) => Err(ApiError::new(
                StatusCode::GATEWAY_TIMEOUT,
                format!("no reply within the {} s request timeout", self.inner.config.request_timeout_s),
            )),
            Ok(Err(e)) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("inference worker failed: {e}"))),
            Ok(Ok(Err(e))) => Err(e),
            Ok(Ok(Ok(v))) => Ok(v),
        }
    }

    fn persist(&self, session: &Session) {
        if let Err(e) = self.inner.sessions.persist(session) {
            log::error!("persisting session {}: {e}", session.id);
        }
    }
}

/// JSON error body `{"error": message}` with a status code.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    retry_after: Option<u64>,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), retry_after: None }
    }

    fn loading() -> Self {
        Self {
            status: StatusCode::SERVICE_UNAVAILABLE,
            message: format!("the checkpoint is still loading; retry in {RETRY_AFTER_S} s"),
            retry_after: Some(RETRY_AFTER_S),
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn internal(e: dermachat_core::Error) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut r = (self.status, Json(json!({ "error": self.message }))).into_response();
        if let Some(s) = self.retry_after {
            r.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(s));
        }
        r
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(r.status(), r.body_text())
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    settings: Option<GenerationSettings>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub created_at_ms: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessageRequest {
    pub text: String,
    #[serde(default)]
    pub settings: Option<GenerationSettings>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageReply {
    pub reply: String,
    /// Earlier turns, or the message itself, were cut to fit the context.
    pub truncated: bool,
    pub latency_ms: f64,
    pub dropped_turns: usize,
    pub finish: FinishReason,
    pub turn_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UploadReply {
    pub image: ImageMeta,
    pub embedding_cached: bool,
    pub turn_count: usize,
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<Created>), ApiError> {
    state.model()?;
    let req: CreateSession = if body.iter().all(u8::is_ascii_whitespace) {
        CreateSession::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(format!("session options: {e}")))?
    };
    let settings = req.settings.unwrap_or_else(|| state.config().generation.clone());
    check_generation(&settings).map_err(ApiError::unprocessable)?;
    let session = Session::new(new_session_id(), settings);
    let created = Created { session_id: session.id.clone(), created_at_ms: session.created_at_ms };
    state.persist(&session);
    state.sessions().insert(session);
    Ok((StatusCode::CREATED, Json(created)))
}

async fn get_session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    let s = state.session(&id)?;
    let view = s.lock().await.view();
    Ok(Json(view))
}

fn multipart_error(e: MultipartError, limit: usize) -> ApiError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        too_large(limit)
    } else {
        ApiError::new(e.status(), format!("malformed multipart body: {}", e.body_text()))
    }
}

fn too_large(limit: usize) -> ApiError {
    ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, format!("image exceeds the upload limit of {limit} bytes"))
}

/// Reads the `image` field, or the first field carrying a file name.
async fn read_image_field(mut mp: Multipart, limit: usize) -> Result<Vec<u8>, ApiError> {
    while let Some(mut field) = mp.next_field().await.map_err(|e| multipart_error(e, limit))? {
        if field.name() != Some("image") && field.file_name().is_none() {
            continue;
        }
        let mut data = Vec::new();
        while let Some(chunk) = field.chunk().await.map_err(|e| multipart_error(e, limit))? {
            if data.len() + chunk.len() > limit {
                return Err(too_large(limit));
            }
            data.extend_from_slice(&chunk);
        }
        return Ok(data);
    }
    Err(ApiError::unprocessable("multipart body has no \"image\" field"))
}

async fn upload_image(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    mp: Result<Multipart, axum::extract::multipart::MultipartRejection>,
) -> Result<Json<UploadReply>, ApiError> {
    let session = state.session(&id)?;
    let mp = mp.map_err(|r| ApiError::new(r.status(), r.body_text()))?;
    let limit = state.config().max_upload_bytes;
    let bytes = read_image_field(mp, limit).await?;
    let model = state.model()?;
    let mut s = session.lock().await;
    let size = model.config().image_size;
    let n = bytes.len();
    let (image, meta, prefix) = state
        .infer(move || {
            let original = Image::decode(&bytes).map_err(|e| {
                ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, format!("could not decode the upload as PNG or JPEG: {e}"))
            })?;
            let image = original.resized(size);
            let meta = ImageMeta {
                bytes: n,
                original_width: original.width(),
                original_height: original.height(),
                width: image.width(),
                height: image.height(),
            };
            let prefix = model.prefix_for_image(&image).map_err(ApiError::internal)?;
            Ok((image, meta, prefix))
        })
        .await?;
    s.set_image(image, meta.clone(), prefix);
    state.persist(&s);
    Ok(Json(UploadReply { image: meta, embedding_cached: s.prefix.is_some(), turn_count: s.turns.len() }))
}

async fn send_message(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    req: Result<Json<MessageRequest>, JsonRejection>,
) -> Result<Json<MessageReply>, ApiError> {
    let Json(req) = req?;
    let text = req.text.trim().to_string();
    if text.is_empty() {
        return Err(ApiError::unprocessable("message text is empty"));
    }
    let session = state.session(&id)?;
    let model = state.model()?;
    let mut s = session.lock().await;
    let Some((image, _)) = &s.image else {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("no image in this session yet; upload one first with POST /sessions/{id}/image"),
        ));
    };
    let settings = req.settings.unwrap_or_else(|| s.settings.clone());
    check_generation(&settings).map_err(ApiError::unprocessable)?;
    let cached = s.prefix.clone();
    let image = image.clone();
    let history = s.history();
    let message = text.clone();

    let started = Instant::now();
    let m = model.clone();
    let (prefix, rendered, generation): (Arc<PrefixEmbedding>, _, Generation) = state
        .infer(move || {
            let prefix = match cached {
                Some(p) => p,
                None => Arc::new(m.prefix_for_image(&image).map_err(ApiError::internal)?),
            };
            let rendered =
                fit_prompt(m.tokenizer(), &history, &message, m.config().max_text_len, settings.max_new_tokens);
            let g = m.generate(&prefix, &rendered.tokens, &settings).map_err(ApiError::internal)?;
            Ok((prefix, rendered, g))
        })
        .await?;
    let latency_ms = started.elapsed().as_secs_f64() * 1e3;
    state.inner.latencies_ms.lock().expect("latency log").push(latency_ms);

    s.prefix = Some(prefix);
    let now = unix_ms();
    s.turns.push(TurnRecord { role: Role::User, text, timestamp_ms: now, latency_ms: None, truncated: None });
    s.turns.push(TurnRecord {
        role: Role::Assistant,
        text: generation.text.clone(),
        timestamp_ms: unix_ms(),
        latency_ms: Some(latency_ms),
        truncated: Some(rendered.truncated()),
    });
    state.persist(&s);
    Ok(Json(MessageReply {
        reply: generation.text,
        truncated: rendered.truncated(),
        latency_ms,
        dropped_turns: rendered.dropped_turns,
        finish: generation.finish,
        turn_count: s.turns.len(),
    }))
}

async fn prompts() -> Json<Value> {
    let scale: Vec<&str> = Likert::ALL.iter().map(|l| l.label()).collect();
    Json(json!({
        "prompts": CANONICAL_PROMPTS,
        "diagnosis_query": DIAGNOSIS_QUERY,
        "form_items": FORM_ITEMS,
        "likert_scale": scale,
    }))
}

async fn healthz(State(state): State<AppState>) -> Response {
    match state.model_slot() {
        ModelSlot::Ready(m) => {
            let params: usize = Component::ALL.iter().map(|&c| m.param_count(c)).sum();
            Json(json!({
                "status": "ok",
                "sessions": state.sessions().len(),
                "workers": state.config().worker_count(),
                "model": {
                    "image_size": m.config().image_size,
                    "vocab_size": m.config().vocab_size,
                    "max_text_len": m.config().max_text_len,
                    "parameters": params,
                },
            }))
            .into_response()
        }
        ModelSlot::Loading => {
            let mut r = (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "loading" }))).into_response();
            r.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(RETRY_AFTER_S));
            r
        }
        ModelSlot::Failed(e) => {
            (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "failed", "error": e }))).into_response()
        }
    }
}

async fn latency_metrics(State(state): State<AppState>) -> Json<Option<Percentiles>> {
    Json(LatencyStats::new(&state.latencies_ms()).map(|s| s.percentiles()))
}

async fn post_eval_record(
    State(state): State<AppState>,
    req: Result<Json<EvalRecord>, JsonRejection>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let Json(record) = req?;
    record.validate().map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let mut stored = state.inner.eval_records.lock().await;
    if let Some(path) = &state.config().eval_records {
        let line = serde_json::to_string(&record).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        let written = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .and_then(|mut f| writeln!(f, "{line}"));
        if let Err(e) = written {
            return Err(ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                format!("could not append to {}: {e}", path.display()),
            ));
        }
    }
    stored.push(record);
    Ok((StatusCode::CREATED, Json(json!({ "stored": stored.len() }))))
}

async fn list_eval_records(State(state): State<AppState>) -> Json<Vec<EvalRecord>> {
    Json(state.inner.eval_records.lock().await.clone())
}

async fn index() -> Json<Value> {
    Json(json!({
        "service": "dermachat",
        "endpoints": [
            "POST /sessions",
            "POST /sessions/{id}/image",
            "POST /sessions/{id}/message",
            "GET /sessions/{id}",
            "GET /prompts",
            "GET /healthz",
            "GET /metrics/latency",
            "POST /eval/records",
            "GET /eval/records",
        ],
    }))
}

pub fn router(state: AppState) -> Router {
    let upload_limit = state.config().max_upload_bytes + 64 * 1024;
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/image", post(upload_image).layer(DefaultBodyLimit::max(upload_limit)))
        .route("/sessions/{id}/message", post(send_message))
        .route("/prompts", get(prompts))
        .route("/healthz", get(healthz))
        .route("/metrics/latency", get(latency_metrics))
        .route("/eval/records", post(post_eval_record).get(list_eval_records));
    let app = match &state.config().static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api.route("/", get(index)),
    };
    app.with_state(state)
}

/// Drops idle sessions every `period` until the runtime stops.
pub fn spawn_sweeper(state: AppState, period: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = state.sessions().expire(Instant::now());
            if n > 0 {
                log::info!("expired {n} idle sessions");
            }
        }
    })
}
