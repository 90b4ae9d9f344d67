//! HTTP advisory service.
//!
//! | method | path                   | body                         |
//! |--------|------------------------|------------------------------|
//! | GET    | `/health`              |                              |
//! | GET    | `/models`              |                              |
//! | POST   | `/recommend`           | `{ground_class, cop, cxp}`   |
//! | POST   | `/session`             | `{seed?, spec?}` or empty    |
//! | POST   | `/session/{id}/step`   | `{cop?}` or empty            |
//! | DELETE | `/session/{id}`        |                              |
//! | GET    | `/session/{id}/stream` | server-sent `tick` events    |
//! | POST   | `/admin/reload`        |                              |
//!
//! Every response body carries `schema_version`; a request may carry one and
//! is rejected if it differs. Errors are `{schema_version, error, message}`
//! with 400 for malformed bodies, 404 for unknown sessions or ground classes,
//! 409 when a session is already stepping and 503 when no models are loaded.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use tbm_core::advisor::{load_engine, AdvisorConfig, Recommendation, Registry};
use tbm_core::credibility::CredibilityCalibration;
use tbm_core::dataset::SplitInfo;
use tbm_core::domain::{GroundClass, SensorRecord, N_COP, N_CXP, SCHEMA_VERSION};
use tbm_core::mlp::{ActivationSpec, TrainConfig};
use tbm_core::optimality::OptimalityConfig;
use tbm_core::sim::{SimSession, SimSpec};
use tbm_core::Error;

pub struct ServiceConfig {
    /// Source for `/admin/reload`; reload is refused without one.
    pub models_dir: Option<PathBuf>,
    pub advisor: AdvisorConfig,
    /// Template for new simulator sessions.
    pub sim: SimSpec,
    /// Interval between streamed ticks.
    pub tick: Duration,
}

type SessionHandle = Arc<tokio::sync::Mutex<SimSession>>;

pub struct AppState {
    registry: RwLock<Arc<Registry>>,
    config: ServiceConfig,
    sessions: Mutex<BTreeMap<u64, SessionHandle>>,
    next_session: AtomicU64,
}

/// Loads every ground class present in `dir`; absent classes are skipped.
pub fn load_available(dir: &std::path::Path, config: AdvisorConfig) -> tbm_core::Result<Registry> {
    let mut registry = Registry::new(config)?;
    for gc in GroundClass::ALL {
        match load_engine(dir, gc) {
            Ok(engine) => registry.insert(engine),
            Err(Error::MissingModel(_)) => log::warn!("no model for {gc} in {}", dir.display()),
            Err(e) => return Err(e),
        }
    }
    Ok(registry)
}

impl AppState {
    pub fn new(registry: Registry, config: ServiceConfig) -> Arc<Self> {
        Arc::new(AppState {
            registry: RwLock::new(Arc::new(registry)),
            config,
            sessions: Mutex::new(BTreeMap::new()),
            next_session: AtomicU64::new(1),
        })
    }

    /// Current registry snapshot.
    pub fn registry(&self) -> Arc<Registry> {
        self.registry.read().expect("registry lock").clone()
    }

    /// Reloads from the model directory and swaps the snapshot in one step.
    /// The old registry stays in place if loading fails.
    pub fn reload(&self) -> Result<Vec<GroundClass>, ApiError> {
        let dir = self
            .config
            .models_dir
            .as_ref()
            .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "InvalidConfig", "service has no model directory"))?;
        let fresh = load_available(dir, self.config.advisor.clone())?;
        let classes = fresh.classes();
        *self.registry.write().expect("registry lock") = Arc::new(fresh);
        Ok(classes)
    }

    fn session(&self, id: u64) -> Result<SessionHandle, ApiError> {
        self.sessions
            .lock()
            .expect("session table")
            .get(&id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "UnknownSession", format!("no session {id}")))
    }
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub schema_version: u32,
    pub error: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind: kind.to_string(),
            message: message.into(),
        }
    }

    fn schema(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "SchemaError", message)
    }

    fn no_models() -> Self {
        ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "ModelsNotLoaded", "no models are loaded")
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidSpec(_)
            | Error::InvalidConfig(_)
            | Error::DimensionMismatch { .. }
            | Error::NonFinite(_)
            | Error::ArityMismatch { .. }
            | Error::UnknownGroundClass(_)
            | Error::Json(_) => StatusCode::BAD_REQUEST,
            Error::ModelNotLoaded(_) | Error::SessionClosed => StatusCode::NOT_FOUND,
            Error::MissingModel(_) | Error::FingerprintMismatch { .. } | Error::Io { .. } => {
                StatusCode::SERVICE_UNAVAILABLE
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.kind(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            schema_version: SCHEMA_VERSION,
            error: self.kind,
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let text: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(text).map_err(|e| ApiError::schema(e.to_string()))
}

fn check_version(v: Option<u32>) -> ApiResult<()> {
    match v {
        Some(v) if v != SCHEMA_VERSION => Err(ApiError::schema(format!(
            "schema_version {v} is not supported (expected {SCHEMA_VERSION})"
        ))),
        _ => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Payloads
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub schema_version: u32,
    pub status: String,
    pub models_loaded: Vec<GroundClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub ground_class: GroundClass,
    pub arch: Vec<usize>,
    pub activation: ActivationSpec,
    pub corpus_fingerprint: String,
    pub calibration: Option<CredibilityCalibration>,
    pub train_config: TrainConfig,
    pub split: Option<SplitInfo>,
    pub optimality: OptimalityConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Models {
    pub schema_version: u32,
    pub models: Vec<ModelInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendRequest {
    #[serde(default)]
    pub schema_version: Option<u32>,
    pub ground_class: GroundClass,
    pub cop: [f64; N_COP],
    pub cxp: [f64; N_CXP],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRequest {
    #[serde(default)]
    pub schema_version: Option<u32>,
    /// Replaces the seed of the session template.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Replaces the whole session template.
    #[serde(default)]
    pub spec: Option<SimSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub schema_version: u32,
    pub session_id: u64,
    pub spec: SimSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRequest {
    #[serde(default)]
    pub schema_version: Option<u32>,
    /// Setpoints for this tick; the operator policy moves when absent.
    #[serde(default)]
    pub cop: Option<[f64; N_COP]>,
}

/// One simulator tick with the recommendation for the next move. Sent by
/// `/session/{id}/step` and as the data of each streamed `tick` event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tick {
    pub schema_version: u32,
    pub session_id: u64,
    /// Zero-based index of `record` within the session.
    pub tick: usize,
    pub record: SensorRecord,
    pub recommendation: Option<Recommendation>,
    /// Why `recommendation` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recommendation_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionClosed {
    pub schema_version: u32,
    pub session_id: u64,
    pub ticks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reloaded {
    pub schema_version: u32,
    pub models_loaded: Vec<GroundClass>,
}

// ---------------------------------------------------------------------------
// Handlers
// ---------------------------------------------------------------------------

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/models", get(models))
        .route("/recommend", post(recommend))
        .route("/session", post(open_session))
        .route("/session/{id}", axum::routing::delete(close_session))
        .route("/session/{id}/step", post(step_session))
        .route("/session/{id}/stream", get(stream_session))
        .route("/admin/reload", post(reload))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such endpoint") })
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    let registry = state.registry();
    Json(Health {
        schema_version: SCHEMA_VERSION,
        status: if registry.is_empty() { "no_models" } else { "ok" }.into(),
        models_loaded: registry.classes(),
    })
}

async fn models(State(state): State<Arc<AppState>>) -> ApiResult<Json<Models>> {
    let registry = state.registry();
    if registry.is_empty() {
        return Err(ApiError::no_models());
    }
    let mut models = Vec::new();
    for gc in registry.classes() {
        let engine = registry.engine(gc)?;
        let m = &engine.model;
        models.push(ModelInfo {
            ground_class: gc,
            arch: m.arch.clone(),
            activation: m.activation.clone(),
            corpus_fingerprint: m.corpus_fingerprint.clone(),
            calibration: m.calibration.clone(),
            train_config: m.train_config.clone(),
            split: m.split.clone(),
            optimality: engine.optimality.clone(),
        });
    }
    Ok(Json(Models {
        schema_version: SCHEMA_VERSION,
        models,
    }))
}

async fn recommend(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Recommendation>> {
    let req: RecommendRequest = parse(&body)?;
    check_version(req.schema_version)?;
    let registry = state.registry();
    if registry.is_empty() {
        return Err(ApiError::no_models());
    }
    Ok(Json(registry.recommend(req.ground_class, &req.cop, &req.cxp)?))
}

async fn open_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<SessionCreated>)> {
    let req: SessionRequest = parse(&body)?;
    check_version(req.schema_version)?;
    let mut spec = req.spec.unwrap_or_else(|| state.config.sim.clone());
    if let Some(seed) = req.seed {
        spec.seed = seed;
    }
    let session = SimSession::new(spec.clone())?;
    let id = state.next_session.fetch_add(1, Ordering::Relaxed);
    state
        .sessions
        .lock()
        .expect("session table")
        .insert(id, Arc::new(tokio::sync::Mutex::new(session)));
    log::info!("opened session {id}");
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated {
            schema_version: SCHEMA_VERSION,
            session_id: id,
            spec,
        }),
    ))
}

fn tick_for(registry: &Registry, session_id: u64, tick: usize, record: SensorRecord) -> Tick {
    let (recommendation, recommendation_error) = match registry.recommend(record.ground_class, &record.cop, &record.cxp) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Tick {
        schema_version: SCHEMA_VERSION,
        session_id,
        tick,
        record,
        recommendation,
        recommendation_error,
    }
}

async fn step_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
    body: Bytes,
) -> ApiResult<Json<Tick>> {
    let req: StepRequest = parse(&body)?;
    check_version(req.schema_version)?;
    let handle = state.session(id)?;
    let (record, tick) = {
        let Ok(mut session) = handle.try_lock() else {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "SessionBusy",
                format!("session {id} is already stepping"),
            ));
        };
        let tick = session.tick();
        (session.step(req.cop)?, tick)
    };
    Ok(Json(tick_for(&state.registry(), id, tick, record)))
}

async fn close_session(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> ApiResult<Json<SessionClosed>> {
    let handle = state.session(id)?;
    state.sessions.lock().expect("session table").remove(&id);
    let mut session = handle.lock().await;
    session.close();
    log::info!("closed session {id}");
    Ok(Json(SessionClosed {
        schema_version: SCHEMA_VERSION,
        session_id: id,
        ticks: session.tick(),
    }))
}

async fn stream_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let handle = state.session(id)?;
    let mut interval = tokio::time::interval(state.config.tick);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let stream = futures::stream::unfold((handle, state, interval), move |(handle, state, mut interval)| async move {
        interval.tick().await;
        let (record, tick) = {
            let mut session = handle.lock().await;
            let tick = session.tick();
            (session.step(None).ok()?, tick)
        };
        let payload = tick_for(&state.registry(), id, tick, record);
        let event = Event::default().event("tick").json_data(&payload).ok()?;
        Some((Ok(event), (handle, state, interval)))
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn reload(State(state): State<Arc<AppState>>) -> ApiResult<Json<Reloaded>> {
    let models_loaded = state.reload()?;
    Ok(Json(Reloaded {
        schema_version: SCHEMA_VERSION,
        models_loaded,
    }))
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
