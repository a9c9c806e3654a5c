//! REST management and execution surface.
//!
//! Every endpoint except `GET /health` requires `Authorization: Bearer
//! <token>` for a user on the configured allowlist. Elements are persisted
//! as `<data_dir>/<kind>/<id>.json`; executions live in memory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, RawQuery, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;
use tracing::{info, warn};

use crate::broker::{BrokerConfig, MemoryBroker, MessageBroker, Priority};
use crate::controller::{run_controller, ControllerRuntimeConfig};
use crate::cwdl::{
    is_valid_identifier, parse_element, validate_element, ControllerSpec, Element, ElementKind,
    ParamOverrides, Registry,
};
use crate::engine::{Engine, EngineConfig, EngineError, ExecutionInput, ExecutionRequest};
use crate::nif::{parse_nif, TURTLE_MEDIA_TYPE};
use crate::report::ValidationReport;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AllowEntry {
    pub user_id: String,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ControllerSettings {
    /// Runtime settings for controllers without an entry in `overrides`.
    pub defaults: ControllerRuntimeConfig,
    /// Consumers started per controller.
    pub instances: usize,
    /// Per-controllerId settings, e.g. `mode: async` for polling services.
    pub overrides: BTreeMap<String, ControllerRuntimeConfig>,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        ControllerSettings {
            defaults: ControllerRuntimeConfig::default(),
            instances: 1,
            overrides: BTreeMap::new(),
        }
    }
}

impl ControllerSettings {
    pub fn for_controller(&self, id: &str) -> ControllerRuntimeConfig {
        self.overrides.get(id).copied().unwrap_or(self.defaults)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub data_dir: PathBuf,
    #[serde(default)]
    pub allowlist: Vec<AllowEntry>,
    #[serde(default)]
    pub broker: BrokerConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub controllers: ControllerSettings,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl ServerConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServerConfig {
            listen: default_listen(),
            data_dir: data_dir.into(),
            allowlist: Vec::new(),
            broker: BrokerConfig::default(),
            engine: EngineConfig::default(),
            controllers: ControllerSettings::default(),
        }
    }

    /// Parses YAML or JSON.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: ServerConfig =
            serde_yaml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config.check()?;
        Ok(config)
    }

    /// Loads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &FsPath) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(FsPath::new("."));
        if config.data_dir.is_relative() {
            config.data_dir = base.join(&config.data_dir);
        }
        if let Some(log) = &mut config.engine.event_log {
            if log.is_relative() {
                *log = base.join(&*log);
            }
        }
        Ok(config)
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        for (i, e) in self.allowlist.iter().enumerate() {
            if e.user_id.trim().is_empty() {
                return invalid(format!("allowlist[{i}].userId is empty"));
            }
            if e.token.is_empty() {
                return invalid(format!("allowlist[{i}].token is empty"));
            }
        }
        if self.broker.max_attempts == 0 {
            return invalid("broker.maxAttempts must be at least 1".into());
        }
        if self.controllers.instances == 0 {
            return invalid("controllers.instances must be at least 1".into());
        }
        let runtimes =
            std::iter::once(&self.controllers.defaults).chain(self.controllers.overrides.values());
        for rt in runtimes {
            let p = rt.poll;
            if let Err(e) = crate::controller::PollPolicy::new(p.interval(), p.max_wait()) {
                return invalid(e);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Authentication

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Principal {
    pub user_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum AuthError {
    #[error("missing or invalid bearer token")]
    Unauthenticated,
    #[error("user is not allowlisted")]
    Forbidden,
}

#[derive(Default)]
struct AuthState {
    /// Every token ever issued, by SHA-256 digest.
    tokens: Vec<([u8; 32], String)>,
    allowed: HashSet<String>,
}

/// Bearer-token check against an allowlist. Tokens stay known across
/// reloads, so a token whose user was removed yields `Forbidden` instead of
/// `Unauthenticated`.
#[derive(Default)]
pub struct Authenticator {
    state: RwLock<AuthState>,
}

fn digest(token: &str) -> [u8; 32] {
    Sha256::digest(token.as_bytes()).into()
}

fn ct_eq(a: &[u8; 32], b: &[u8; 32]) -> bool {
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

impl Authenticator {
    pub fn new(entries: &[AllowEntry]) -> Self {
        let auth = Authenticator::default();
        auth.reload(entries);
        auth
    }

    /// Replaces the allowlist. Tokens from earlier lists are remembered.
    pub fn reload(&self, entries: &[AllowEntry]) {
        let mut st = self.state.write();
        st.allowed = entries.iter().map(|e| e.user_id.clone()).collect();
        for e in entries {
            let d = digest(&e.token);
            match st.tokens.iter_mut().find(|(t, _)| *t == d) {
                Some(slot) => slot.1 = e.user_id.clone(),
                None => st.tokens.push((d, e.user_id.clone())),
            }
        }
    }

    pub fn check_user(&self, token: &str) -> Result<Principal, AuthError> {
        if token.is_empty() {
            return Err(AuthError::Unauthenticated);
        }
        let d = digest(token);
        let st = self.state.read();
        // Compare against every entry so timing does not depend on which
        // one matches.
        let mut found = None;
        for (t, user) in &st.tokens {
            if ct_eq(t, &d) {
                found = Some(user);
            }
        }
        match found {
            None => Err(AuthError::Unauthenticated),
            Some(u) if st.allowed.contains(u) => Ok(Principal { user_id: u.clone() }),
            Some(_) => Err(AuthError::Forbidden),
        }
    }
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug)]
pub enum ApiError {
    Auth(AuthError),
    NotFound(String),
    BadRequest(String),
    Invalid(ValidationReport),
    Conflict(Value),
    MethodNotAllowed,
    UnsupportedMediaType(String),
    Unprocessable(Value),
    Internal(String),
}

fn error_body(message: impl Into<String>) -> Value {
    json!({ "error": message.into() })
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self {
            ApiError::Auth(e) => {
                let status = match e {
                    AuthError::Unauthenticated => StatusCode::UNAUTHORIZED,
                    AuthError::Forbidden => StatusCode::FORBIDDEN,
                };
                let mut resp = (status, Json(error_body(e.to_string()))).into_response();
                if e == AuthError::Unauthenticated {
                    resp.headers_mut()
                        .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
                }
                resp
            }
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, Json(error_body(m))).into_response(),
            ApiError::BadRequest(m) => {
                (StatusCode::BAD_REQUEST, Json(error_body(m))).into_response()
            }
            ApiError::Invalid(report) => (StatusCode::BAD_REQUEST, Json(report)).into_response(),
            ApiError::Conflict(body) => (StatusCode::CONFLICT, Json(body)).into_response(),
            ApiError::MethodNotAllowed => (
                StatusCode::METHOD_NOT_ALLOWED,
                Json(error_body("method not allowed for this kind")),
            )
                .into_response(),
            ApiError::UnsupportedMediaType(m) => {
                (StatusCode::UNSUPPORTED_MEDIA_TYPE, Json(error_body(m))).into_response()
            }
            ApiError::Unprocessable(body) => {
                (StatusCode::UNPROCESSABLE_ENTITY, Json(body)).into_response()
            }
            ApiError::Internal(m) => {
                (StatusCode::INTERNAL_SERVER_ERROR, Json(error_body(m))).into_response()
            }
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::UnknownTemplate(_) | EngineError::UnknownExecution(_) => {
                ApiError::NotFound(e.to_string())
            }
            EngineError::Validation(report) => ApiError::Invalid(report),
            EngineError::Input(_) | EngineError::Compile(_) => ApiError::BadRequest(e.to_string()),
            EngineError::IllegalState { state, .. } | EngineError::NotFinished { state, .. } => {
                ApiError::Conflict(json!({ "error": e.to_string(), "state": state }))
            }
            EngineError::Failed { .. }
            | EngineError::UnknownCorrelation { .. }
            | EngineError::Broker(_)
            | EngineError::EventLog(_) => ApiError::Internal(e.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

// ---------------------------------------------------------------------------
// Element store

/// Registry persisted as one JSON file per element. Mutations are
/// serialized and only become visible after the file is in place.
pub struct ElementStore {
    dir: PathBuf,
    registry: Arc<RwLock<Registry>>,
    write: Mutex<()>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {message}")]
    Load { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors of every element in the registry, keyed by element.
fn registry_errors(registry: &Registry) -> Vec<(ElementKind, String, ValidationReport)> {
    let mut out = Vec::new();
    for kind in ElementKind::ALL {
        for id in ids(registry, kind) {
            let element = registry.get(kind, &id).expect("listed id exists");
            let report = validate_element(&element, registry);
            if report.has_errors() {
                out.push((kind, id, report));
            }
        }
    }
    out
}

fn ids(registry: &Registry, kind: ElementKind) -> Vec<String> {
    match kind {
        ElementKind::Controllers => registry.controllers.keys().cloned().collect(),
        ElementKind::Tasks => registry.tasks.keys().cloned().collect(),
        ElementKind::Templates => registry.templates.keys().cloned().collect(),
    }
}

impl ElementStore {
    /// Loads `<dir>/<kind>/*.json`, creating the directories if needed. A
    /// file that does not parse or validate aborts the load.
    pub fn open(dir: &FsPath) -> Result<ElementStore, StoreError> {
        let mut registry = Registry::new();
        let mut origin = HashMap::new();
        for kind in ElementKind::ALL {
            let kdir = dir.join(kind.as_str());
            std::fs::create_dir_all(&kdir)?;
            let mut files: Vec<_> = std::fs::read_dir(&kdir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            for path in files {
                let load_err = |message: String| StoreError::Load {
                    path: path.clone(),
                    message,
                };
                let text = std::fs::read_to_string(&path)?;
                let element = parse_element(&text).map_err(|e| load_err(e.to_string()))?;
                if element.kind() != kind {
                    return Err(load_err(format!("not a {} element", kind.as_str())));
                }
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
                if stem != element.id() {
                    return Err(load_err(format!(
                        "file name does not match id {:?}",
                        element.id()
                    )));
                }
                origin.insert((kind, element.id().to_string()), path.clone());
                registry.insert(element);
            }
        }
        if let Some((kind, id, report)) = registry_errors(&registry).into_iter().next() {
            return Err(StoreError::Load {
                path: origin.remove(&(kind, id)).unwrap_or_default(),
                message: report.to_string(),
            });
        }
        Ok(ElementStore {
            dir: dir.to_path_buf(),
            registry: Arc::new(RwLock::new(registry)),
            write: Mutex::new(()),
        })
    }

    pub fn registry(&self) -> &Arc<RwLock<Registry>> {
        &self.registry
    }

    fn file(&self, kind: ElementKind, id: &str) -> PathBuf {
        self.dir.join(kind.as_str()).join(format!("{id}.json"))
    }

    fn write_atomic(&self, kind: ElementKind, id: &str, element: &Element) -> std::io::Result<()> {
        let target = self.file(kind, id);
        let tmp = target.with_file_name(format!(".{id}.{}.tmp", uuid::Uuid::new_v4()));
        let text = serde_json::to_string_pretty(&element.to_json()).expect("JSON values serialize");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, &target).inspect_err(|_| {
            let _ = std::fs::remove_file(&tmp);
        })
    }

    /// Checks a candidate registry. Errors in `subject` itself are a bad
    /// request; errors the change causes elsewhere are a conflict.
    fn check_candidate(
        candidate: &Registry,
        subject: Option<(ElementKind, &str)>,
    ) -> Result<ValidationReport, ApiError> {
        let mut warnings = ValidationReport::new();
        if let Some((kind, id)) = subject {
            let element = candidate
                .get(kind, id)
                .expect("subject is in the candidate");
            let report = validate_element(&element, candidate);
            if report.has_errors() {
                return Err(ApiError::Invalid(report));
            }
            warnings = report;
        }
        let broken = registry_errors(candidate);
        if !broken.is_empty() {
            let dependents: Vec<_> = broken
                .iter()
                .map(|(k, id, r)| json!({ "kind": k.as_str(), "id": id, "findings": r.findings }))
                .collect();
            return Err(ApiError::Conflict(json!({
                "error": "change would invalidate other elements",
                "dependents": dependents,
            })));
        }
        Ok(warnings)
    }

    pub fn create(&self, kind: ElementKind, element: Element) -> ApiResult<ValidationReport> {
        let _guard = self.write.lock();
        let id = element.id().to_string();
        let mut candidate = self.registry.read().clone();
        if candidate.get(kind, &id).is_some() {
            return Err(ApiError::Conflict(error_body(format!(
                "{} {id:?} already exists",
                kind.as_str()
            ))));
        }
        candidate.insert(element.clone());
        let warnings = Self::check_candidate(&candidate, Some((kind, &id)))?;
        self.write_atomic(kind, &id, &element)
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        *self.registry.write() = candidate;
        Ok(warnings)
    }

    pub fn replace(&self, kind: ElementKind, element: Element) -> ApiResult<ValidationReport> {
        let _guard = self.write.lock();
        let id = element.id().to_string();
        let mut candidate = self.registry.read().clone();
        if candidate.get(kind, &id).is_none() {
            return Err(ApiError::NotFound(format!("{} {id:?}", kind.as_str())));
        }
        candidate.insert(element.clone());
        let warnings = Self::check_candidate(&candidate, Some((kind, &id)))?;
        self.write_atomic(kind, &id, &element)
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        *self.registry.write() = candidate;
        Ok(warnings)
    }

    pub fn delete(&self, kind: ElementKind, id: &str) -> ApiResult<()> {
        let _guard = self.write.lock();
        let mut candidate = self.registry.read().clone();
        if !candidate.remove(kind, id) {
            return Err(ApiError::NotFound(format!("{} {id:?}", kind.as_str())));
        }
        Self::check_candidate(&candidate, None)?;
        std::fs::remove_file(self.file(kind, id)).map_err(|e| ApiError::Internal(e.to_string()))?;
        *self.registry.write() = candidate;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Controller supervision

struct RunningController {
    spec: ControllerSpec,
    stop: CancellationToken,
    tasks: Vec<JoinHandle<()>>,
}

#[derive(Default)]
struct Supervisor {
    reply_loop: Option<(CancellationToken, JoinHandle<()>)>,
    controllers: BTreeMap<String, RunningController>,
}

impl Supervisor {
    fn initialized(&self) -> bool {
        self.reply_loop.is_some()
    }

    async fn stop_controller(rc: RunningController) {
        rc.stop.cancel();
        for t in rc.tasks {
            let _ = t.await;
        }
    }
}

// ---------------------------------------------------------------------------
// Application state and routes

pub struct AppState {
    config: ServerConfig,
    auth: Authenticator,
    store: ElementStore,
    broker: Arc<MemoryBroker>,
    engine: Arc<Engine>,
    supervisor: tokio::sync::Mutex<Supervisor>,
}

impl AppState {
    pub fn new(config: ServerConfig) -> Result<Arc<AppState>, StartError> {
        std::fs::create_dir_all(&config.data_dir)?;
        let store = ElementStore::open(&config.data_dir)?;
        let broker = Arc::new(MemoryBroker::new(config.broker.clone()));
        let engine = Arc::new(Engine::new(
            broker.clone(),
            store.registry().clone(),
            config.engine.clone(),
        )?);
        Ok(Arc::new(AppState {
            auth: Authenticator::new(&config.allowlist),
            config,
            store,
            broker,
            engine,
            supervisor: tokio::sync::Mutex::new(Supervisor::default()),
        }))
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn broker(&self) -> &Arc<MemoryBroker> {
        &self.broker
    }

    pub fn authenticator(&self) -> &Authenticator {
        &self.auth
    }

    pub fn registry(&self) -> Registry {
        self.store.registry().read().clone()
    }

    /// Starts the reply loop and one set of consumers per registered
    /// controller; restarts controllers whose definition changed. Returns
    /// the ids of running controllers.
    pub async fn init(&self) -> Vec<String> {
        let mut sup = self.supervisor.lock().await;
        if sup.reply_loop.is_none() {
            let stop = CancellationToken::new();
            let engine = self.engine.clone();
            let token = stop.clone();
            let task = tokio::spawn(async move { engine.run_reply_loop(token).await });
            sup.reply_loop = Some((stop, task));
        }
        self.sync_controllers(&mut sup).await;
        sup.controllers.keys().cloned().collect()
    }

    async fn sync_controllers(&self, sup: &mut Supervisor) {
        let wanted = self.store.registry().read().controllers.clone();
        let stale: Vec<String> = sup
            .controllers
            .iter()
            .filter(|(id, rc)| wanted.get(*id) != Some(&rc.spec))
            .map(|(id, _)| id.clone())
            .collect();
        for id in stale {
            if let Some(rc) = sup.controllers.remove(&id) {
                Supervisor::stop_controller(rc).await;
            }
        }
        for (id, spec) in wanted {
            if sup.controllers.contains_key(&id) {
                continue;
            }
            let stop = CancellationToken::new();
            let runtime = self.config.controllers.for_controller(&id);
            let broker: Arc<dyn MessageBroker> = self.broker.clone();
            let tasks = (0..self.config.controllers.instances)
                .map(|_| {
                    let (spec, broker, stop) = (spec.clone(), broker.clone(), stop.clone());
                    tokio::spawn(async move {
                        let id = spec.controller_id.clone();
                        if let Err(e) = run_controller(spec, broker, stop, runtime).await {
                            warn!(controller = %id, error = %e, "controller could not start");
                        }
                    })
                })
                .collect();
            info!(controller = %id, "controller started");
            sup.controllers
                .insert(id, RunningController { spec, stop, tasks });
        }
    }

    /// Stops controllers and the reply loop after their in-flight work.
    pub async fn stop(&self) -> usize {
        let mut sup = self.supervisor.lock().await;
        let controllers = std::mem::take(&mut sup.controllers);
        let n = controllers.len();
        for (_, rc) in controllers {
            Supervisor::stop_controller(rc).await;
        }
        if let Some((stop, task)) = sup.reply_loop.take() {
            stop.cancel();
            let _ = task.await;
        }
        n
    }

    async fn after_mutation(&self, kind: ElementKind) {
        if kind == ElementKind::Controllers {
            let mut sup = self.supervisor.lock().await;
            if sup.initialized() {
                self.sync_controllers(&mut sup).await;
            }
        }
    }
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    let value = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    let (scheme, token) = value.split_once(' ')?;
    scheme.eq_ignore_ascii_case("bearer").then(|| token.trim())
}

async fn require_user(
    State(state): State<Arc<AppState>>,
    mut req: Request,
    next: Next,
) -> Result<Response, ApiError> {
    let token = bearer(req.headers()).ok_or(ApiError::Auth(AuthError::Unauthenticated))?;
    let principal = state.auth.check_user(token).map_err(ApiError::Auth)?;
    req.extensions_mut().insert(principal);
    Ok(next.run(req).await)
}

/// Builds the router. `/health` is the only route outside the auth layer.
pub fn router(state: Arc<AppState>) -> Router {
    let protected = Router::new()
        .route("/admin/init", post(admin_init))
        .route("/admin/stop", post(admin_stop))
        .route("/elements/{kind}", get(list_elements).post(create_element))
        .route(
            "/elements/{kind}/{id}",
            get(view_element)
                .put(replace_element)
                .delete(delete_element),
        )
        .route("/executions", post(create_execution))
        .route("/executions/{id}/status", get(execution_status))
        .route("/executions/{id}/result", get(execution_result))
        .route("/executions/{id}/cancel", post(cancel_execution))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_user));
    Router::new()
        .route("/health", get(health))
        .merge(protected)
        .with_state(state)
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn admin_init(State(state): State<Arc<AppState>>) -> Json<Value> {
    let controllers = state.init().await;
    Json(json!({ "initialized": true, "controllers": controllers }))
}

async fn admin_stop(State(state): State<Arc<AppState>>) -> Json<Value> {
    let stopped = state.stop().await;
    Json(json!({ "stopped": stopped }))
}

/// `Ok(None)` is the executions pseudo-kind.
fn element_kind(kind: &str) -> ApiResult<Option<ElementKind>> {
    if kind == "executions" {
        return Ok(None);
    }
    kind.parse()
        .map(Some)
        .map_err(|_| ApiError::NotFound(format!("unknown element kind {kind:?}")))
}

fn definition_kind(kind: &str) -> ApiResult<ElementKind> {
    element_kind(kind)?.ok_or(ApiError::MethodNotAllowed)
}

async fn list_elements(
    State(state): State<Arc<AppState>>,
    Path(kind): Path<String>,
) -> ApiResult<Json<Value>> {
    Ok(Json(match element_kind(&kind)? {
        None => json!(state.engine.list_executions()),
        Some(kind) => {
            let reg = state.store.registry().read();
            Value::Array(
                ids(&reg, kind)
                    .iter()
                    .filter_map(|id| reg.get(kind, id))
                    .map(|e| e.to_json())
                    .collect(),
            )
        }
    }))
}

async fn view_element(
    State(state): State<Arc<AppState>>,
    Path((kind, id)): Path<(String, String)>,
) -> ApiResult<Json<Value>> {
    match element_kind(&kind)? {
        None => Ok(Json(json!(state.engine.get_status(&id)?))),
        Some(kind) => state
            .store
            .registry()
            .read()
            .get(kind, &id)
            .map(|e| Json(e.to_json()))
            .ok_or_else(|| ApiError::NotFound(format!("{} {id:?}", kind.as_str()))),
    }
}

fn parse_body(kind: ElementKind, body: &[u8]) -> ApiResult<Element> {
    let text = std::str::from_utf8(body).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let element = parse_element(text).map_err(|e| ApiError::Invalid(e.to_report()))?;
    if element.kind() != kind {
        let mut report = ValidationReport::new();
        report.error(
            "$",
            format!(
                "document is a {} element, not {}",
                element.kind().as_str(),
                kind.as_str()
            ),
        );
        return Err(ApiError::Invalid(report));
    }
    Ok(element)
}

fn referenced_by_execution(state: &AppState, kind: ElementKind, id: &str) -> ApiResult<()> {
    if state
        .engine
        .active_references()
        .contains(&(kind, id.to_string()))
    {
        return Err(ApiError::Conflict(error_body(format!(
            "{} {id:?} is referenced by a running execution",
            kind.as_str()
        ))));
    }
    Ok(())
}

async fn create_element(
    State(state): State<Arc<AppState>>,
    Path(kind): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let kind = definition_kind(&kind)?;
    let element = parse_body(kind, &body)?;
    let id = element.id().to_string();
    let warnings = state.store.create(kind, element)?;
    state.after_mutation(kind).await;
    let location = format!("/elements/{}/{id}", kind.as_str());
    Ok((
        StatusCode::CREATED,
        [(header::LOCATION, location)],
        Json(json!({ "kind": kind.as_str(), "id": id, "findings": warnings.findings })),
    )
        .into_response())
}

async fn replace_element(
    State(state): State<Arc<AppState>>,
    Path((kind, id)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let kind = definition_kind(&kind)?;
    if !is_valid_identifier(&id) || state.store.registry().read().get(kind, &id).is_none() {
        return Err(ApiError::NotFound(format!("{} {id:?}", kind.as_str())));
    }
    let element = parse_body(kind, &body)?;
    if element.id() != id {
        return Err(ApiError::BadRequest(format!(
            "body id {:?} does not match {id:?}",
            element.id()
        )));
    }
    referenced_by_execution(&state, kind, &id)?;
    let warnings = state.store.replace(kind, element)?;
    state.after_mutation(kind).await;
    Ok(Json(
        json!({ "kind": kind.as_str(), "id": id, "findings": warnings.findings }),
    ))
}

async fn delete_element(
    State(state): State<Arc<AppState>>,
    Path((kind, id)): Path<(String, String)>,
) -> ApiResult<StatusCode> {
    let kind = definition_kind(&kind)?;
    if !is_valid_identifier(&id) || state.store.registry().read().get(kind, &id).is_none() {
        return Err(ApiError::NotFound(format!("{} {id:?}", kind.as_str())));
    }
    referenced_by_execution(&state, kind, &id)?;
    state.store.delete(kind, &id)?;
    state.after_mutation(kind).await;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
enum InputFormat {
    #[default]
    Text,
    Turtle,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ExecuteBody {
    template_id: String,
    input: String,
    #[serde(default)]
    input_format: InputFormat,
    #[serde(default)]
    priority: Option<Priority>,
    #[serde(default)]
    param_overrides: ParamOverrides,
}

fn parse_input(format: InputFormat, text: String) -> ApiResult<ExecutionInput> {
    match format {
        InputFormat::Text => Ok(ExecutionInput::Text(text)),
        InputFormat::Turtle => parse_nif(&text)
            .map(ExecutionInput::Nif)
            .map_err(|e| ApiError::BadRequest(format!("input is not a NIF document: {e}"))),
    }
}

/// Reads `templateId`, `priority` and repeated `param=name=value` from the
/// query string of a raw-body execution request.
fn request_from_query(
    query: Option<&str>,
) -> ApiResult<(String, Option<Priority>, ParamOverrides)> {
    let mut template = None;
    let mut priority = None;
    let mut params = ParamOverrides::new();
    for (k, v) in url::form_urlencoded::parse(query.unwrap_or("").as_bytes()) {
        match &*k {
            "templateId" => template = Some(v.into_owned()),
            "priority" => priority = Some(v.parse().map_err(|e: String| ApiError::BadRequest(e))?),
            "param" => {
                let (name, value) = v.split_once('=').ok_or_else(|| {
                    ApiError::BadRequest(format!("param {v:?} is not name=value"))
                })?;
                params.insert(name.to_string(), value.to_string());
            }
            other => {
                return Err(ApiError::BadRequest(format!(
                    "unknown query parameter {other:?}"
                )))
            }
        }
    }
    let template = template
        .ok_or_else(|| ApiError::BadRequest("missing templateId query parameter".into()))?;
    Ok((template, priority, params))
}

async fn create_execution(
    State(state): State<Arc<AppState>>,
    RawQuery(query): RawQuery,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let content_type = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("application/json");
    let media = content_type.split(';').next().unwrap_or("").trim();
    let text = || String::from_utf8(body.to_vec()).map_err(|e| ApiError::BadRequest(e.to_string()));
    let request = match media {
        "application/json" => {
            let b: ExecuteBody = serde_json::from_slice(&body)
                .map_err(|e| ApiError::BadRequest(format!("invalid request body: {e}")))?;
            ExecutionRequest {
                template_id: b.template_id,
                input: parse_input(b.input_format, b.input)?,
                priority: b.priority,
                param_overrides: b.param_overrides,
            }
        }
        TURTLE_MEDIA_TYPE | "text/plain" => {
            let (template_id, priority, param_overrides) = request_from_query(query.as_deref())?;
            let format = if media == TURTLE_MEDIA_TYPE {
                InputFormat::Turtle
            } else {
                InputFormat::Text
            };
            ExecutionRequest {
                template_id,
                input: parse_input(format, text()?)?,
                priority,
                param_overrides,
            }
        }
        other => {
            return Err(ApiError::UnsupportedMediaType(format!(
                "unsupported content type {other:?}"
            )))
        }
    };
    let id = state.engine.execute(request)?;
    let status = state.engine.get_status(&id)?;
    Ok((
        StatusCode::CREATED,
        [(header::LOCATION, format!("/executions/{id}/status"))],
        Json(json!({ "executionId": id, "state": status.state })),
    )
        .into_response())
}

async fn execution_status(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    Ok(Json(json!(state.engine.get_status(&id)?)))
}

async fn execution_result(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    match state.engine.get_result(&id) {
        Ok(payload) => Ok((
            StatusCode::OK,
            [(header::CONTENT_TYPE, TURTLE_MEDIA_TYPE)],
            payload,
        )
            .into_response()),
        Err(EngineError::Failed { report, .. }) => {
            let partial: BTreeMap<String, String> = state
                .engine
                .partial_results(&id)?
                .into_iter()
                .map(|(n, p)| (n.to_string(), String::from_utf8_lossy(&p).into_owned()))
                .collect();
            Err(ApiError::Unprocessable(json!({
                "state": "FAILED",
                "error": report,
                "partialResults": partial,
            })))
        }
        Err(e) => Err(e.into()),
    }
}

async fn cancel_execution(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    state.engine.cancel(&id)?;
    Ok(Json(json!(state.engine.get_status(&id)?)))
}

// ---------------------------------------------------------------------------
// Server

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("element store: {0}")]
    Store(#[from] StoreError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// A running API server.
pub struct ApiServer {
    addr: SocketAddr,
    state: Arc<AppState>,
    shutdown: CancellationToken,
    task: JoinHandle<std::io::Result<()>>,
}

impl ApiServer {
    pub async fn start(config: ServerConfig) -> Result<ApiServer, StartError> {
        let listener = tokio::net::TcpListener::bind(&config.listen).await?;
        let state = AppState::new(config)?;
        let addr = listener.local_addr()?;
        let shutdown = CancellationToken::new();
        let app = router(state.clone());
        let signal = shutdown.clone();
        let task = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async move { signal.cancelled().await })
                .await
        });
        info!(%addr, "listening");
        Ok(ApiServer {
            addr,
            state,
            shutdown,
            task,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL without trailing slash.
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn state(&self) -> &Arc<AppState> {
        &self.state
    }

    /// Resolves when the server stops on its own (listener failure).
    pub async fn wait(&mut self) -> std::io::Result<()> {
        match (&mut self.task).await {
            Ok(r) => r,
            Err(e) => Err(std::io::Error::other(e)),
        }
    }

    /// Drains controllers, then stops accepting requests.
    pub async fn shutdown(self) {
        self.state.stop().await;
        self.shutdown.cancel();
        let _ = self.task.await;
    }
}
