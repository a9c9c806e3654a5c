//! Deterministic gazetteer services standing in for real NLP services.
//!
//! `POST` (any path) takes a NIF document (`text/turtle`) and returns it with an
//! annotation for every gazetteer hit. In async mode the POST answers
//! `202 Accepted` with a `Location: /jobs/<id>` to poll. `GET /log` lists
//! received requests with sequence numbers drawn from one process-wide
//! counter, so logs from different mocks can be ordered against each other.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::nif::{parse_nif, serialize_nif, NifDocument, TURTLE_MEDIA_TYPE};

static SEQUENCE: AtomicU64 = AtomicU64::new(0);

fn next_seq() -> u64 {
    SEQUENCE.fetch_add(1, Ordering::SeqCst) + 1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GazetteerEntry {
    pub surface: String,
    pub entity_class: String,
    #[serde(default)]
    pub ident_ref: Option<String>,
}

impl GazetteerEntry {
    pub fn new(surface: &str, entity_class: &str, ident_ref: Option<&str>) -> Self {
        GazetteerEntry {
            surface: surface.into(),
            entity_class: entity_class.into(),
            ident_ref: ident_ref.map(Into::into),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockMode {
    #[default]
    Sync,
    Async,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MockServiceConfig {
    #[serde(default)]
    pub gazetteer: Vec<GazetteerEntry>,
    #[serde(default)]
    pub mode: MockMode,
    #[serde(default, with = "crate::broker::duration_ms", rename = "latencyMs")]
    pub latency: Duration,
    #[serde(default)]
    pub fail_next_n: u32,
    /// 0 picks a free port.
    #[serde(default)]
    pub port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LogEntry {
    pub seq: u64,
    /// Milliseconds since the Unix epoch.
    pub ts: i64,
    pub body_hash: String,
    /// Sequence number taken when the final response was produced.
    pub done_seq: Option<u64>,
    pub status: Option<u16>,
}

/// Annotates every leftmost, non-overlapping occurrence of each gazetteer
/// surface string.
pub fn apply_gazetteer(doc: &NifDocument, gazetteer: &[GazetteerEntry]) -> NifDocument {
    let mut out = doc.clone();
    let text = &doc.context_text;
    for entry in gazetteer.iter().filter(|e| !e.surface.is_empty()) {
        let surface_len = entry.surface.chars().count();
        for (byte_start, _) in text.match_indices(entry.surface.as_str()) {
            let begin = doc.begin_index + text[..byte_start].chars().count();
            if let Ok(next) = out.annotate(
                begin,
                begin + surface_len,
                &entry.entity_class,
                entry.ident_ref.as_deref(),
            ) {
                out = next;
            }
        }
    }
    out
}

struct Job {
    ready_at: tokio::time::Instant,
    body: String,
    log_index: usize,
}

struct MockState {
    gazetteer: Vec<GazetteerEntry>,
    mode: Mutex<MockMode>,
    latency: Mutex<Duration>,
    fail_next: AtomicU32,
    paused: watch::Sender<bool>,
    log: Mutex<Vec<LogEntry>>,
    jobs: Mutex<HashMap<u64, Job>>,
    next_job: AtomicU64,
}

impl MockState {
    fn finish(&self, index: usize, status: u16) {
        let mut log = self.log.lock();
        if let Some(e) = log.get_mut(index) {
            if e.done_seq.is_none() {
                e.done_seq = Some(next_seq());
                e.status = Some(status);
            }
        }
    }

    async fn wait_unpaused(&self) {
        let mut rx = self.paused.subscribe();
        // Only errors when the sender is gone, which cannot happen while
        // the state is alive.
        let _ = rx.wait_for(|paused| !paused).await;
    }
}

/// A running mock service.
pub struct MockService {
    addr: SocketAddr,
    state: Arc<MockState>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl MockService {
    pub async fn start(config: MockServiceConfig) -> std::io::Result<MockService> {
        if config.gazetteer.iter().any(|e| e.surface.is_empty()) {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                "gazetteer surface strings must be non-empty",
            ));
        }
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", config.port)).await?;
        let addr = listener.local_addr()?;
        let (paused, _) = watch::channel(false);
        let state = Arc::new(MockState {
            gazetteer: config.gazetteer,
            mode: Mutex::new(config.mode),
            latency: Mutex::new(config.latency),
            fail_next: AtomicU32::new(config.fail_next_n),
            paused,
            log: Mutex::new(Vec::new()),
            jobs: Mutex::new(HashMap::new()),
            next_job: AtomicU64::new(1),
        });
        let app = Router::new()
            .route("/", post(handle_post))
            .route("/{*path}", post(handle_post))
            .route("/jobs/{id}", get(handle_job))
            .route("/log", get(handle_log))
            .with_state(state.clone());
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
        Ok(MockService {
            addr,
            state,
            shutdown: Some(tx),
            task: Some(task),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL with trailing slash, e.g. `http://127.0.0.1:4100/`.
    pub fn url(&self) -> String {
        format!("http://{}/", self.addr)
    }

    pub fn set_fail_next(&self, n: u32) {
        self.state.fail_next.store(n, Ordering::SeqCst);
    }

    pub fn set_mode(&self, mode: MockMode) {
        *self.state.mode.lock() = mode;
    }

    pub fn set_latency(&self, latency: Duration) {
        *self.state.latency.lock() = latency;
    }

    /// Requests received while paused are logged but not answered until
    /// [`resume`](Self::resume).
    pub fn pause(&self) {
        self.state.paused.send_replace(true);
    }

    pub fn resume(&self) {
        self.state.paused.send_replace(false);
    }

    pub fn log(&self) -> Vec<LogEntry> {
        self.state.log.lock().clone()
    }

    pub fn request_count(&self) -> usize {
        self.state.log.lock().len()
    }

    pub async fn shutdown(mut self) {
        self.stop().await;
    }

    async fn stop(&mut self) {
        self.resume();
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for MockService {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

fn turtle(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, TURTLE_MEDIA_TYPE)], body).into_response()
}

async fn handle_post(
    State(state): State<Arc<MockState>>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let content_type = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("");
    if !content_type.starts_with(TURTLE_MEDIA_TYPE) {
        return (StatusCode::UNSUPPORTED_MEDIA_TYPE, "expected text/turtle").into_response();
    }

    let index = {
        let mut log = state.log.lock();
        log.push(LogEntry {
            seq: next_seq(),
            ts: chrono::Utc::now().timestamp_millis(),
            body_hash: hex::encode(Sha256::digest(&body)),
            done_seq: None,
            status: None,
        });
        log.len() - 1
    };

    state.wait_unpaused().await;

    let injected = state
        .fail_next
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok();
    if injected {
        state.finish(index, 500);
        return (StatusCode::INTERNAL_SERVER_ERROR, "injected failure").into_response();
    }

    let doc = match std::str::from_utf8(&body)
        .map_err(|e| e.to_string())
        .and_then(|t| parse_nif(t).map_err(|e| e.to_string()))
    {
        Ok(doc) => doc,
        Err(e) => {
            state.finish(index, 400);
            return (StatusCode::BAD_REQUEST, e).into_response();
        }
    };
    let result = serialize_nif(&apply_gazetteer(&doc, &state.gazetteer));
    let latency = *state.latency.lock();
    let mode = *state.mode.lock();

    match mode {
        MockMode::Sync => {
            tokio::time::sleep(latency).await;
            state.finish(index, 200);
            turtle(StatusCode::OK, result)
        }
        MockMode::Async => {
            let id = state.next_job.fetch_add(1, Ordering::SeqCst);
            state.jobs.lock().insert(
                id,
                Job {
                    ready_at: tokio::time::Instant::now() + latency,
                    body: result,
                    log_index: index,
                },
            );
            (
                StatusCode::ACCEPTED,
                [(header::LOCATION, format!("/jobs/{id}"))],
            )
                .into_response()
        }
    }
}

async fn handle_job(State(state): State<Arc<MockState>>, Path(id): Path<u64>) -> Response {
    let ready = {
        let jobs = state.jobs.lock();
        match jobs.get(&id) {
            None => return StatusCode::NOT_FOUND.into_response(),
            Some(job) if tokio::time::Instant::now() < job.ready_at => None,
            Some(job) => Some((job.body.clone(), job.log_index)),
        }
    };
    match ready {
        None => (
            StatusCode::ACCEPTED,
            [(header::LOCATION, format!("/jobs/{id}"))],
        )
            .into_response(),
        Some((body, index)) => {
            state.finish(index, 200);
            turtle(StatusCode::OK, body)
        }
    }
}

async fn handle_log(State(state): State<Arc<MockState>>) -> Json<Vec<LogEntry>> {
    Json(state.log.lock().clone())
}
