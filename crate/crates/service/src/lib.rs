//! Reward scoring over HTTP.
//!
//! Routes: `POST /score`, `POST /score_batch`, `GET /health`. Bodies are JSON;
//! errors come back as [`ErrorBody`] with a 4xx/5xx status.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use inlinethink_core::reward::{self, RewardConfig, RewardError};
use inlinethink_core::sandbox::{Sandbox, SandboxConfig, SandboxError, TestCase};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{Semaphore, SemaphorePermit};

/// Header carrying the optional shared secret.
pub const SECRET_HEADER: &str = "x-ta-secret";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable naming the provenance log sink (`-` for stderr).
pub const LOG_SINK_ENV: &str = "TA_LOG_SINK";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Concurrent candidate processes.
    pub workers: usize,
    /// Requests admitted beyond `workers` before the service answers 503.
    pub queue_depth: usize,
    pub batch_cap: usize,
    pub reward: RewardConfig,
    pub secret: Option<String>,
    pub log_sink: Option<PathBuf>,
    pub isolate_network: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            workers: std::thread::available_parallelism().map_or(4, |n| n.get()),
            queue_depth: 64,
            batch_cap: 256,
            reward: RewardConfig::default(),
            secret: None,
            log_sink: None,
            isolate_network: true,
        }
    }
}

impl ServiceConfig {
    /// Fills `log_sink` from [`LOG_SINK_ENV`] when not set explicitly.
    pub fn with_env(mut self) -> Self {
        if self.log_sink.is_none() {
            self.log_sink = std::env::var_os(LOG_SINK_ENV).map(PathBuf::from);
        }
        self
    }
}

/// Per-request overrides of the service's reward configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strict_code_validity: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringRequest {
    pub id: String,
    /// Recorded in the provenance log only.
    #[serde(default)]
    pub prompt: String,
    pub completion: String,
    #[serde(default)]
    pub tests: Vec<TestCase>,
    #[serde(default)]
    pub config: ConfigOverrides,
    /// Score the format alone: `r_correct` is omitted and tests are ignored.
    #[serde(default)]
    pub structure_only: bool,
}

impl ScoringRequest {
    pub fn effective_config(&self, base: &RewardConfig) -> RewardConfig {
        let mut cfg = base.clone();
        if let Some(a) = self.config.alpha {
            cfg.alpha = a;
        }
        if let Some(s) = self.config.strict_code_validity {
            cfg.strict_code_validity = s;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringResponse {
    pub id: String,
    pub r_struct: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_correct: Option<u8>,
    pub total: f64,
    pub violations: Vec<String>,
    pub verdicts: Vec<String>,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub error: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRequest {
    pub requests: Vec<ScoringRequest>,
}

/// One batch slot: a score or the error for that item alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchItem {
    Scored(ScoringResponse),
    Failed(ErrorBody),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResponse {
    pub responses: Vec<BatchItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub sandbox_workers_free: usize,
    pub version: String,
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("malformed request: {0}")]
    BadRequest(String),
    #[error("batch of {size} exceeds the cap of {cap}")]
    BatchTooLarge { size: usize, cap: usize },
    #[error("duplicate id {0:?} in batch")]
    DuplicateId(String),
    #[error("correctness scoring needs at least one test; set structure_only to score the format alone")]
    NoTests,
    #[error("alpha must be >= 0")]
    InvalidConfig,
    #[error("missing or wrong shared secret")]
    Unauthorized,
    #[error("sandbox queue is full")]
    Overloaded,
    #[error(transparent)]
    Sandbox(SandboxError),
    #[error("worker task failed: {0}")]
    Internal(String),
}

impl From<RewardError> for ServiceError {
    fn from(e: RewardError) -> Self {
        match e {
            RewardError::NoTests | RewardError::Sandbox(SandboxError::NoTests) => ServiceError::NoTests,
            RewardError::InvalidConfig => ServiceError::InvalidConfig,
            RewardError::Sandbox(s) => ServiceError::Sandbox(s),
        }
    }
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::BadRequest(_)
            | ServiceError::DuplicateId(_)
            | ServiceError::NoTests
            | ServiceError::InvalidConfig
            | ServiceError::Sandbox(SandboxError::InvalidLimits) => StatusCode::BAD_REQUEST,
            ServiceError::BatchTooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            ServiceError::Unauthorized => StatusCode::UNAUTHORIZED,
            ServiceError::Overloaded => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Sandbox(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::BatchTooLarge { .. } => "batch_too_large",
            ServiceError::DuplicateId(_) => "duplicate_id",
            ServiceError::NoTests => "no_tests",
            ServiceError::InvalidConfig => "invalid_config",
            ServiceError::Unauthorized => "unauthorized",
            ServiceError::Overloaded => "overloaded",
            ServiceError::Sandbox(_) => "sandbox_error",
            ServiceError::Internal(_) => "internal",
        }
    }

    pub fn body(&self, id: Option<String>) -> ErrorBody {
        ErrorBody { id, error: self.code().into(), message: self.to_string() }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body(None))).into_response()
    }
}

/// Scores one request in-process, exactly as the `/score` route does.
pub fn score_request(
    req: &ScoringRequest,
    base: &RewardConfig,
    sandbox: &Sandbox,
) -> Result<ScoringResponse, ServiceError> {
    let start = Instant::now();
    let cfg = req.effective_config(base);
    cfg.validate()?;
    let (r_struct, r_correct, total, report, verdicts) = if req.structure_only {
        let s = reward::structure_reward_checked(&req.completion, &cfg, sandbox)?;
        (s.r_struct, None, cfg.combine(s.r_struct, 0), s.report, Vec::new())
    } else {
        let b = reward::combined_reward(&req.completion, &req.tests, &cfg, sandbox)?;
        (b.r_struct, Some(b.r_correct), b.total, b.structure_report, b.verdicts)
    };
    Ok(ScoringResponse {
        id: req.id.clone(),
        r_struct,
        r_correct,
        total,
        violations: report.violations.iter().map(|v| v.kind.as_str().to_string()).collect(),
        verdicts: verdicts.iter().map(|v| v.status.as_str().to_string()).collect(),
        wall_time_ms: start.elapsed().as_millis() as u64,
    })
}

type LogWriter = Mutex<Box<dyn Write + Send>>;

struct Inner {
    cfg: ServiceConfig,
    sandbox: Sandbox,
    admission: Semaphore,
    log: Option<LogWriter>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(cfg: ServiceConfig) -> io::Result<Self> {
        let log: Option<LogWriter> = match &cfg.log_sink {
            None => None,
            Some(p) if p.as_os_str() == "-" => Some(Mutex::new(Box::new(io::stderr()))),
            Some(p) => Some(Mutex::new(Box::new(OpenOptions::new().create(true).append(true).open(p)?))),
        };
        let sandbox = Sandbox::new(SandboxConfig { workers: cfg.workers, isolate_network: cfg.isolate_network });
        let admission = Semaphore::new(cfg.workers.max(1) + cfg.queue_depth);
        Ok(Self { inner: Arc::new(Inner { cfg, sandbox, admission, log }) })
    }

    pub fn sandbox(&self) -> &Sandbox {
        &self.inner.sandbox
    }

    fn authorize(&self, headers: &HeaderMap) -> Result<(), ServiceError> {
        match &self.inner.cfg.secret {
            None => Ok(()),
            Some(s) if headers.get(SECRET_HEADER).is_some_and(|v| v.as_bytes() == s.as_bytes()) => Ok(()),
            Some(_) => Err(ServiceError::Unauthorized),
        }
    }

    fn admit(&self) -> Result<SemaphorePermit<'_>, ServiceError> {
        self.inner.admission.try_acquire().map_err(|_| ServiceError::Overloaded)
    }

    fn health(&self) -> Health {
        let free = self.inner.sandbox.pool().free();
        let busy = free == 0 || self.inner.admission.available_permits() == 0;
        Health { status: if busy { "busy" } else { "ok" }.into(), sandbox_workers_free: free, version: VERSION.into() }
    }

    /// Scores on the blocking pool and logs the outcome.
    async fn run(&self, req: ScoringRequest) -> Result<ScoringResponse, ServiceError> {
        let inner = Arc::clone(&self.inner);
        tokio::task::spawn_blocking(move || {
            let resp = score_request(&req, &inner.cfg.reward, &inner.sandbox)?;
            inner.log_line(&req, &resp);
            Ok(resp)
        })
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
    }
}

impl Inner {
    fn log_line(&self, req: &ScoringRequest, resp: &ScoringResponse) {
        let Some(log) = &self.log else { return };
        let line = serde_json::json!({
            "id": resp.id,
            "prompt": req.prompt,
            "r_struct": resp.r_struct,
            "r_correct": resp.r_correct,
            "total": resp.total,
            "violations": resp.violations,
            "verdicts": resp.verdicts,
            "wall_time_ms": resp.wall_time_ms,
        });
        let mut w = log.lock().unwrap_or_else(|e| e.into_inner());
        // Logging is best effort and never fails a request.
        let _ = writeln!(w, "{line}").and_then(|_| w.flush());
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/score", post(score))
        .route("/score_batch", post(score_batch))
        .route("/health", get(health))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, state: AppState) -> io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Binds `addr` and serves from a background task, returning the bound
/// address. Useful with port 0.
pub async fn spawn(addr: &str, state: AppState) -> io::Result<std::net::SocketAddr> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tokio::spawn(serve(listener, state));
    Ok(local)
}

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(e.to_string()))
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(state.health())
}

async fn score(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<ScoringResponse>, ServiceError> {
    state.authorize(&headers)?;
    let req: ScoringRequest = parse(&body)?;
    let _permit = state.admit()?;
    Ok(Json(state.run(req).await?))
}

#[derive(Deserialize)]
struct RawBatch {
    requests: Vec<Value>,
}

async fn score_batch(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<BatchResponse>, ServiceError> {
    state.authorize(&headers)?;
    let batch: RawBatch = parse(&body)?;
    let cap = state.inner.cfg.batch_cap;
    if batch.requests.len() > cap {
        return Err(ServiceError::BatchTooLarge { size: batch.requests.len(), cap });
    }
    let mut seen = HashSet::new();
    for id in batch.requests.iter().filter_map(|v| v.get("id").and_then(Value::as_str)) {
        if !seen.insert(id) {
            return Err(ServiceError::DuplicateId(id.to_string()));
        }
    }
    let _permit = state.admit()?;

    // Items run concurrently; awaiting the handles in order keeps the output
    // aligned with the input.
    let pending: Vec<_> = batch
        .requests
        .into_iter()
        .map(|v| {
            let id = v.get("id").and_then(Value::as_str).map(str::to_owned);
            match serde_json::from_value::<ScoringRequest>(v) {
                Ok(req) => {
                    let state = state.clone();
                    (id, Ok(tokio::spawn(async move { state.run(req).await })))
                }
                Err(e) => (id, Err(ServiceError::BadRequest(e.to_string()))),
            }
        })
        .collect();
    let mut responses = Vec::with_capacity(pending.len());
    for (id, item) in pending {
        let result = match item {
            Ok(handle) => handle.await.unwrap_or_else(|e| Err(ServiceError::Internal(e.to_string()))),
            Err(e) => Err(e),
        };
        responses.push(match result {
            Ok(r) => BatchItem::Scored(r),
            Err(e) => BatchItem::Failed(e.body(id)),
        });
    }
    Ok(Json(BatchResponse { responses }))
}
