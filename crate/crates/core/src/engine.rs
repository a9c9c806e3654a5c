//! Workflow execution engine.
//!
//! An execution is a template instance with its own compiled graph, input
//! document and per-node state. The engine dispatches service nodes as
//! envelopes to controller queues and advances the graph as replies arrive
//! on its reply queue. Split, combiner, source and sink nodes are resolved
//! inside the engine without touching the broker.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::watch;
use tokio_util::sync::CancellationToken;
use tracing::{debug, warn};

use crate::broker::{
    duration_ms, BrokerError, Envelope, MessageBroker, Priority, ProblemDetails, QueuePair,
};
use crate::cwdl::{
    compile, validate, CompileError, ElementKind, ExecutionGraph, NodeId, NodeKind, ParamOverrides,
    Registry, WorkflowTemplate,
};
use crate::nif::{
    self, make_context, parse_nif, serialize_nif, NifDocument, NifError, TURTLE_MEDIA_TYPE,
};
use crate::report::ValidationReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecutionState {
    Pending,
    Running,
    Completed,
    Failed,
    Cancelled,
}

impl ExecutionState {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            ExecutionState::Completed | ExecutionState::Failed | ExecutionState::Cancelled
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExecutionState::Pending => "PENDING",
            ExecutionState::Running => "RUNNING",
            ExecutionState::Completed => "COMPLETED",
            ExecutionState::Failed => "FAILED",
            ExecutionState::Cancelled => "CANCELLED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeState {
    Waiting,
    Dispatched,
    Done,
    Errored,
}

impl NodeState {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeState::Waiting => "WAITING",
            NodeState::Dispatched => "DISPATCHED",
            NodeState::Done => "DONE",
            NodeState::Errored => "ERRORED",
        }
    }

    fn rank(self) -> u8 {
        match self {
            NodeState::Waiting => 0,
            NodeState::Dispatched => 1,
            NodeState::Done | NodeState::Errored => 2,
        }
    }
}

/// Why an execution failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FailureReport {
    pub node_id: NodeId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub controller_id: Option<String>,
    /// HTTP status reported by the service, if it answered at all.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    pub detail: String,
    pub attempts: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template does not validate:\n{0}")]
    Validation(ValidationReport),
    #[error("template does not compile: {0}")]
    Compile(#[from] CompileError),
    #[error("invalid input document: {0}")]
    Input(#[from] NifError),
    #[error("unknown execution {0:?}")]
    UnknownExecution(String),
    #[error("cannot {operation} execution {execution_id} in state {}", state.as_str())]
    IllegalState {
        execution_id: String,
        state: ExecutionState,
        operation: &'static str,
    },
    #[error("execution {execution_id} is {}", state.as_str())]
    NotFinished {
        execution_id: String,
        state: ExecutionState,
    },
    #[error("execution {execution_id} failed at node {}: {}", report.node_id, report.detail)]
    Failed {
        execution_id: String,
        report: Box<FailureReport>,
    },
    #[error("reply for execution {execution_id:?} node {node_id} matches no dispatch")]
    UnknownCorrelation {
        execution_id: String,
        node_id: NodeId,
    },
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("event log: {0}")]
    EventLog(#[from] std::io::Error),
}

/// Input of a new execution.
#[derive(Debug, Clone, PartialEq)]
pub enum ExecutionInput {
    Nif(NifDocument),
    /// Plain text, wrapped into a fresh context.
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionRequest {
    pub template_id: String,
    pub input: ExecutionInput,
    /// `None` lets the engine decide (see [`EngineConfig::auto_priority_max_chars`]).
    pub priority: Option<Priority>,
    pub param_overrides: ParamOverrides,
}

impl ExecutionRequest {
    pub fn new(template_id: impl Into<String>, input: ExecutionInput) -> Self {
        ExecutionRequest {
            template_id: template_id.into(),
            input,
            priority: None,
            param_overrides: ParamOverrides::new(),
        }
    }

    pub fn priority(mut self, priority: Priority) -> Self {
        self.priority = Some(priority);
        self
    }

    pub fn param(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.param_overrides.insert(name.into(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct EngineConfig {
    pub reply_queue: String,
    /// Base URI for documents created from plain text.
    pub document_base: String,
    /// When set, executions created without an explicit priority run on the
    /// priority queues if their text has at most this many characters.
    pub auto_priority_max_chars: Option<usize>,
    /// Append-only JSON-lines file receiving every state transition.
    pub event_log: Option<PathBuf>,
    #[serde(with = "duration_ms", rename = "replyWaitMs")]
    pub reply_wait: Duration,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            reply_queue: "cwm.engine.replies".into(),
            document_base: "http://dkt.dfki.de/documents/".into(),
            auto_priority_max_chars: None,
            event_log: None,
            reply_wait: Duration::from_millis(200),
        }
    }
}

/// What [`Engine::handle_result`] did with a reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplyOutcome {
    Applied,
    /// The node already had a result.
    Duplicate,
    /// The execution had already terminated.
    Late,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct NodeStatus {
    pub node_id: NodeId,
    #[serde(flatten)]
    pub kind: NodeKind,
    pub state: NodeState,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ExecutionStatus {
    pub execution_id: String,
    pub template_id: String,
    pub state: ExecutionState,
    pub priority: Priority,
    pub nodes: Vec<NodeStatus>,
    pub created_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<FailureReport>,
    pub param_overrides: ParamOverrides,
}

impl ExecutionStatus {
    pub fn node_state(&self, id: NodeId) -> Option<NodeState> {
        self.nodes.iter().find(|n| n.node_id == id).map(|n| n.state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ExecutionSummary {
    pub execution_id: String,
    pub template_id: String,
    pub state: ExecutionState,
    pub priority: Priority,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone)]
struct Route {
    task_id: String,
    controller_id: String,
    queues: QueuePair,
}

struct Compiled {
    template: WorkflowTemplate,
    graph: Arc<ExecutionGraph>,
    order: Arc<Vec<NodeId>>,
}

struct Execution {
    id: String,
    template_id: String,
    priority: Priority,
    overrides: ParamOverrides,
    graph: Arc<ExecutionGraph>,
    order: Arc<Vec<NodeId>>,
    routes: BTreeMap<NodeId, Route>,
    references: Vec<(ElementKind, String)>,
    state: ExecutionState,
    node_states: Vec<NodeState>,
    outputs: BTreeMap<NodeId, Vec<u8>>,
    input: Vec<u8>,
    result: Option<Vec<u8>>,
    error: Option<FailureReport>,
    created_at: DateTime<Utc>,
    started_at: Option<DateTime<Utc>>,
    finished_at: Option<DateTime<Utc>>,
}

impl Execution {
    fn node_input(&self, n: NodeId) -> Vec<u8> {
        match self.graph.predecessors(n) {
            [p] => self.outputs.get(p).cloned().unwrap_or_default(),
            _ => self.input.clone(),
        }
    }

    fn status(&self) -> ExecutionStatus {
        ExecutionStatus {
            execution_id: self.id.clone(),
            template_id: self.template_id.clone(),
            state: self.state,
            priority: self.priority,
            nodes: self
                .graph
                .nodes()
                .iter()
                .map(|n| NodeStatus {
                    node_id: n.id,
                    kind: n.kind.clone(),
                    state: self.node_states[n.id.index()],
                })
                .collect(),
            created_at: self.created_at,
            started_at: self.started_at,
            finished_at: self.finished_at,
            error: self.error.clone(),
            param_overrides: self.overrides.clone(),
        }
    }
}

/// The execution engine. Shareable across tasks; every execution is guarded
/// by its own lock.
pub struct Engine {
    broker: Arc<dyn MessageBroker>,
    registry: Arc<RwLock<Registry>>,
    config: EngineConfig,
    executions: RwLock<HashMap<String, Arc<Mutex<Execution>>>>,
    compiled: Mutex<HashMap<String, Arc<Compiled>>>,
    event_log: Option<Mutex<std::fs::File>>,
    late_replies: AtomicU64,
    duplicate_replies: AtomicU64,
    changes: watch::Sender<u64>,
}

impl Engine {
    pub fn new(
        broker: Arc<dyn MessageBroker>,
        registry: Arc<RwLock<Registry>>,
        config: EngineConfig,
    ) -> Result<Engine, EngineError> {
        broker.declare_queue(&config.reply_queue)?;
        let event_log = match &config.event_log {
            Some(path) => Some(Mutex::new(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)?,
            )),
            None => None,
        };
        Ok(Engine {
            broker,
            registry,
            config,
            executions: RwLock::new(HashMap::new()),
            compiled: Mutex::new(HashMap::new()),
            event_log,
            late_replies: AtomicU64::new(0),
            duplicate_replies: AtomicU64::new(0),
            changes: watch::channel(0).0,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn registry(&self) -> &Arc<RwLock<Registry>> {
        &self.registry
    }

    pub fn broker(&self) -> &Arc<dyn MessageBroker> {
        &self.broker
    }

    /// Replies that arrived after their execution terminated.
    pub fn late_replies(&self) -> u64 {
        self.late_replies.load(Ordering::Relaxed)
    }

    pub fn duplicate_replies(&self) -> u64 {
        self.duplicate_replies.load(Ordering::Relaxed)
    }

    fn record(&self, execution_id: &str, node: Option<NodeId>, transition: &str) {
        debug!(execution = execution_id, node = ?node, transition, "transition");
        if let Some(log) = &self.event_log {
            let line = json!({
                "ts": Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
                "executionId": execution_id,
                "nodeId": node,
                "transition": transition,
            });
            let mut f = log.lock();
            if let Err(e) = writeln!(f, "{line}") {
                warn!(error = %e, "event log write failed");
            }
        }
        self.changes.send_modify(|v| *v += 1);
    }

    fn set_state(&self, ex: &mut Execution, state: ExecutionState) {
        ex.state = state;
        if state.is_terminal() {
            ex.finished_at = Some(Utc::now());
        }
        self.record(&ex.id, None, state.as_str());
    }

    fn set_node(&self, ex: &mut Execution, n: NodeId, state: NodeState) {
        let slot = &mut ex.node_states[n.index()];
        debug_assert!(slot.rank() < state.rank(), "node states only move forward");
        *slot = state;
        self.record(&ex.id, Some(n), state.as_str());
    }

    fn compiled(&self, template: &WorkflowTemplate) -> Result<Arc<Compiled>, EngineError> {
        let mut cache = self.compiled.lock();
        if let Some(c) = cache.get(&template.id) {
            if c.template == *template {
                return Ok(c.clone());
            }
        }
        let graph = compile(template)?;
        let order = graph.topological_order()?;
        let c = Arc::new(Compiled {
            template: template.clone(),
            graph: Arc::new(graph),
            order: Arc::new(order),
        });
        cache.insert(template.id.clone(), c.clone());
        Ok(c)
    }

    /// Validates and compiles the template and registers a PENDING
    /// execution. Nothing is published until [`start`](Self::start).
    pub fn create_execution(&self, request: ExecutionRequest) -> Result<String, EngineError> {
        let registry = self.registry.read();
        let template = registry
            .templates
            .get(&request.template_id)
            .ok_or_else(|| EngineError::UnknownTemplate(request.template_id.clone()))?;
        let report = validate(template, &registry, Some(&request.param_overrides));
        if report.has_errors() {
            return Err(EngineError::Validation(report));
        }
        let doc = match request.input {
            ExecutionInput::Nif(doc) => {
                let report = nif::validate_doc(&doc);
                if report.has_errors() {
                    return Err(EngineError::Input(NifError::Model(report.to_string())));
                }
                doc
            }
            ExecutionInput::Text(text) => make_context(&text, &self.config.document_base),
        };
        let compiled = self.compiled(template)?;

        let mut routes = BTreeMap::new();
        let mut references = vec![(ElementKind::Templates, template.id.clone())];
        for (node, task_id) in compiled.graph.service_nodes() {
            // Validation guarantees both lookups succeed.
            let controller = registry.controller_for_task(task_id).ok_or_else(|| {
                EngineError::Validation({
                    let mut r = ValidationReport::new();
                    r.error("$.tasks", format!("unresolved taskId {task_id}"));
                    r
                })
            })?;
            let queues = self.broker.declare_queues(controller)?;
            references.push((ElementKind::Tasks, task_id.to_string()));
            references.push((ElementKind::Controllers, controller.controller_id.clone()));
            routes.insert(
                node,
                Route {
                    task_id: task_id.to_string(),
                    controller_id: controller.controller_id.clone(),
                    queues,
                },
            );
        }
        drop(registry);
        references.sort();
        references.dedup();

        let priority =
            request
                .priority
                .unwrap_or_else(|| match self.config.auto_priority_max_chars {
                    Some(max) if doc.context_text.chars().count() <= max => Priority::Priority,
                    _ => Priority::Normal,
                });
        let id = uuid::Uuid::new_v4().to_string();
        let graph = compiled.graph.clone();
        let ex = Execution {
            id: id.clone(),
            template_id: request.template_id,
            priority,
            overrides: request.param_overrides,
            node_states: vec![NodeState::Waiting; graph.len()],
            graph,
            order: compiled.order.clone(),
            routes,
            references,
            state: ExecutionState::Pending,
            outputs: BTreeMap::new(),
            input: serialize_nif(&doc).into_bytes(),
            result: None,
            error: None,
            created_at: Utc::now(),
            started_at: None,
            finished_at: None,
        };
        self.executions
            .write()
            .insert(id.clone(), Arc::new(Mutex::new(ex)));
        self.record(&id, None, ExecutionState::Pending.as_str());
        Ok(id)
    }

    fn execution(&self, id: &str) -> Result<Arc<Mutex<Execution>>, EngineError> {
        self.executions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownExecution(id.to_string()))
    }

    /// Moves a PENDING execution to RUNNING and dispatches every ready node.
    pub fn start(&self, id: &str) -> Result<(), EngineError> {
        let ex = self.execution(id)?;
        let mut ex = ex.lock();
        if ex.state != ExecutionState::Pending {
            return Err(EngineError::IllegalState {
                execution_id: id.to_string(),
                state: ex.state,
                operation: "start",
            });
        }
        ex.started_at = Some(Utc::now());
        self.set_state(&mut ex, ExecutionState::Running);
        self.advance(&mut ex);
        Ok(())
    }

    /// Creates and starts an execution.
    pub fn execute(&self, request: ExecutionRequest) -> Result<String, EngineError> {
        let id = self.create_execution(request)?;
        self.start(&id)?;
        Ok(id)
    }

    fn fail(&self, ex: &mut Execution, report: FailureReport) {
        let n = report.node_id;
        if ex.node_states[n.index()].rank() < NodeState::Errored.rank() {
            self.set_node(ex, n, NodeState::Errored);
        }
        ex.error = Some(report);
        self.set_state(ex, ExecutionState::Failed);
    }

    fn complete_node(&self, ex: &mut Execution, n: NodeId, output: Vec<u8>) {
        ex.outputs.insert(n, output);
        self.set_node(ex, n, NodeState::Done);
    }

    /// Resolves every ready node in topological order. Engine-internal nodes
    /// finish immediately, so one pass reaches the fixpoint.
    fn advance(&self, ex: &mut Execution) {
        let order = ex.order.clone();
        let graph = ex.graph.clone();
        for &n in order.iter() {
            if ex.state != ExecutionState::Running {
                return;
            }
            if ex.node_states[n.index()] != NodeState::Waiting {
                continue;
            }
            let preds = graph.predecessors(n);
            if !preds
                .iter()
                .all(|p| ex.node_states[p.index()] == NodeState::Done)
            {
                continue;
            }
            match &graph.node(n).kind {
                NodeKind::Source => {
                    let input = ex.input.clone();
                    self.complete_node(ex, n, input);
                }
                NodeKind::Split { .. } => {
                    let input = ex.node_input(n);
                    self.complete_node(ex, n, input);
                }
                NodeKind::WaitCombiner { .. } => match self.combine(ex, preds) {
                    Ok(out) => self.complete_node(ex, n, out),
                    Err(e) => self.fail(
                        ex,
                        FailureReport {
                            node_id: n,
                            task_id: None,
                            controller_id: None,
                            status: None,
                            detail: format!("combining branch results failed: {e}"),
                            attempts: 0,
                        },
                    ),
                },
                NodeKind::Sink => {
                    let out = ex.node_input(n);
                    ex.result = Some(out.clone());
                    self.complete_node(ex, n, out);
                    self.set_state(ex, ExecutionState::Completed);
                }
                NodeKind::Service { .. } => self.dispatch(ex, n),
            }
        }
    }

    fn combine(&self, ex: &Execution, preds: &[NodeId]) -> Result<Vec<u8>, NifError> {
        let docs = preds
            .iter()
            .map(|p| {
                let bytes = ex.outputs.get(p).map(Vec::as_slice).unwrap_or_default();
                let text = std::str::from_utf8(bytes)
                    .map_err(|e| NifError::Model(format!("branch {p} is not UTF-8: {e}")))?;
                parse_nif(text)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(serialize_nif(&nif::merge(&docs)?).into_bytes())
    }

    fn dispatch(&self, ex: &mut Execution, n: NodeId) {
        let route = ex.routes[&n].clone();
        let env = Envelope::new(
            ex.id.clone(),
            n,
            self.config.reply_queue.clone(),
            ex.priority,
            TURTLE_MEDIA_TYPE,
            ex.node_input(n),
        )
        .with_overrides(ex.overrides.clone());
        self.set_node(ex, n, NodeState::Dispatched);
        if let Err(e) = self
            .broker
            .publish(route.queues.for_priority(ex.priority), env)
        {
            self.fail(
                ex,
                FailureReport {
                    node_id: n,
                    task_id: Some(route.task_id),
                    controller_id: Some(route.controller_id),
                    status: None,
                    detail: format!("dispatch failed: {e}"),
                    attempts: 0,
                },
            );
        }
    }

    /// Applies one reply envelope.
    pub fn handle_result(&self, env: &Envelope) -> Result<ReplyOutcome, EngineError> {
        let unknown = || EngineError::UnknownCorrelation {
            execution_id: env.execution_id.clone(),
            node_id: env.node_id,
        };
        let ex = self.execution(&env.execution_id).map_err(|_| unknown())?;
        let mut ex = ex.lock();
        let n = env.node_id;
        if !ex.routes.contains_key(&n) {
            return Err(unknown());
        }
        if ex.state.is_terminal() {
            self.late_replies.fetch_add(1, Ordering::Relaxed);
            return Ok(ReplyOutcome::Late);
        }
        match ex.node_states[n.index()] {
            NodeState::Dispatched => {}
            NodeState::Done | NodeState::Errored => {
                self.duplicate_replies.fetch_add(1, Ordering::Relaxed);
                return Ok(ReplyOutcome::Duplicate);
            }
            NodeState::Waiting => return Err(unknown()),
        }

        if env.is_problem() {
            let route = &ex.routes[&n];
            let problem: Option<ProblemDetails> = serde_json::from_slice(&env.payload).ok();
            let report = FailureReport {
                node_id: n,
                task_id: Some(route.task_id.clone()),
                controller_id: problem
                    .as_ref()
                    .and_then(|p| p.controller_id.clone())
                    .or_else(|| Some(route.controller_id.clone())),
                status: problem.as_ref().and_then(|p| p.status),
                detail: problem
                    .as_ref()
                    .map(|p| p.detail.clone())
                    .unwrap_or_else(|| String::from_utf8_lossy(&env.payload).into_owned()),
                attempts: problem.map(|p| p.attempts).unwrap_or(0),
            };
            self.fail(&mut ex, report);
        } else {
            self.complete_node(&mut ex, n, env.payload.clone());
            self.advance(&mut ex);
        }
        Ok(ReplyOutcome::Applied)
    }

    /// Consumes the reply queue until `stop` is cancelled. Replies that match
    /// no dispatch are dead-lettered.
    pub async fn run_reply_loop(&self, stop: CancellationToken) {
        let queue = self.config.reply_queue.clone();
        loop {
            let delivery = tokio::select! {
                biased;
                _ = stop.cancelled() => break,
                d = self.broker.wait(&queue, self.config.reply_wait) => d,
            };
            let Some(d) = delivery else { continue };
            let settled = match self.handle_result(&d.envelope) {
                Ok(_) => self.broker.ack(d.tag),
                Err(e) => {
                    warn!(error = %e, "dead-lettering reply");
                    self.broker.nack(d.tag, false)
                }
            };
            if let Err(e) = settled {
                warn!(error = %e, "could not settle reply");
            }
        }
    }

    pub fn get_status(&self, id: &str) -> Result<ExecutionStatus, EngineError> {
        Ok(self.execution(id)?.lock().status())
    }

    pub fn list_executions(&self) -> Vec<ExecutionSummary> {
        let mut out: Vec<_> = self
            .executions
            .read()
            .values()
            .map(|ex| {
                let ex = ex.lock();
                ExecutionSummary {
                    execution_id: ex.id.clone(),
                    template_id: ex.template_id.clone(),
                    state: ex.state,
                    priority: ex.priority,
                    created_at: ex.created_at,
                }
            })
            .collect();
        out.sort_by(|a, b| {
            a.created_at
                .cmp(&b.created_at)
                .then_with(|| a.execution_id.cmp(&b.execution_id))
        });
        out
    }

    /// Final payload of a COMPLETED execution.
    pub fn get_result(&self, id: &str) -> Result<Vec<u8>, EngineError> {
        let ex = self.execution(id)?;
        let ex = ex.lock();
        match ex.state {
            ExecutionState::Completed => Ok(ex.result.clone().unwrap_or_default()),
            ExecutionState::Failed => Err(EngineError::Failed {
                execution_id: id.to_string(),
                report: Box::new(ex.error.clone().expect("failed executions carry a report")),
            }),
            state => Err(EngineError::NotFinished {
                execution_id: id.to_string(),
                state,
            }),
        }
    }

    /// Outputs of the service nodes that finished, kept for inspection of
    /// failed or cancelled executions.
    pub fn partial_results(&self, id: &str) -> Result<BTreeMap<NodeId, Vec<u8>>, EngineError> {
        let ex = self.execution(id)?;
        let ex = ex.lock();
        Ok(ex
            .outputs
            .iter()
            .filter(|(n, _)| ex.routes.contains_key(n))
            .map(|(n, p)| (*n, p.clone()))
            .collect())
    }

    pub fn cancel(&self, id: &str) -> Result<(), EngineError> {
        let ex = self.execution(id)?;
        let mut ex = ex.lock();
        if ex.state.is_terminal() {
            return Err(EngineError::IllegalState {
                execution_id: id.to_string(),
                state: ex.state,
                operation: "cancel",
            });
        }
        self.set_state(&mut ex, ExecutionState::Cancelled);
        Ok(())
    }

    /// Waits until the execution is terminal or `timeout` passes; returns the
    /// state seen last.
    pub async fn wait_terminal(
        &self,
        id: &str,
        timeout: Duration,
    ) -> Result<ExecutionState, EngineError> {
        let ex = self.execution(id)?;
        let mut rx = self.changes.subscribe();
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let state = ex.lock().state;
            if state.is_terminal() {
                return Ok(state);
            }
            match tokio::time::timeout_at(deadline, rx.changed()).await {
                Ok(Ok(())) => {}
                _ => return Ok(ex.lock().state),
            }
        }
    }

    /// Elements referenced by executions that have not terminated.
    pub fn active_references(&self) -> BTreeSet<(ElementKind, String)> {
        self.executions
            .read()
            .values()
            .filter_map(|ex| {
                let ex = ex.lock();
                (!ex.state.is_terminal()).then(|| ex.references.clone())
            })
            .flatten()
            .collect()
    }
}

/// Runs a template strictly sequentially in the graph's fixed topological
/// order, calling `service(task_id, input)` for each service node. Serves as
/// the oracle for the concurrent engine.
pub fn reference_interpreter<F>(
    template: &WorkflowTemplate,
    input: &NifDocument,
    mut service: F,
) -> Result<NifDocument, EngineError>
where
    F: FnMut(&str, &NifDocument) -> Result<NifDocument, String>,
{
    let graph = compile(template)?;
    let mut outputs: Vec<Option<NifDocument>> = vec![None; graph.len()];
    let fail = |n: NodeId, task_id: Option<&str>, detail: String| EngineError::Failed {
        execution_id: String::new(),
        report: Box::new(FailureReport {
            node_id: n,
            task_id: task_id.map(str::to_string),
            controller_id: None,
            status: None,
            detail,
            attempts: 1,
        }),
    };
    for n in graph.topological_order()? {
        let preds = graph.predecessors(n);
        let single = || {
            preds
                .first()
                .and_then(|p| outputs[p.index()].clone())
                .expect("predecessor resolved earlier in topological order")
        };
        let out = match &graph.node(n).kind {
            NodeKind::Source => input.clone(),
            NodeKind::Split { .. } | NodeKind::Sink => single(),
            NodeKind::Service { task_id } => {
                service(task_id, &single()).map_err(|e| fail(n, Some(task_id), e))?
            }
            NodeKind::WaitCombiner { .. } => {
                let docs: Vec<_> = preds
                    .iter()
                    .filter_map(|p| outputs[p.index()].clone())
                    .collect();
                nif::merge(&docs).map_err(|e| fail(n, None, e.to_string()))?
            }
        };
        outputs[n.index()] = Some(out);
    }
    Ok(outputs[graph.sink().index()]
        .take()
        .expect("sink resolved last"))
}
