//! The JSON workflow definition language: controllers, tasks and templates.
//!
//! Parsing walks a `serde_json::Value` by hand so every schema error carries
//! the JSON path of the offending element (`$.connection.headers[1].name`).
//! Serialization produces the exact wire shape that was parsed, so
//! `to_json(parse(x))` is key-order-insensitively equal to `x`.

mod graph;
mod parse;
mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Serialize, Serializer};
use serde_json::{json, Map, Value};

pub use graph::{compile, CompileError, ExecutionGraph, GraphNode, NodeId, NodeKind};
pub use parse::{is_valid_identifier, parse_controller, parse_element, parse_task, parse_template};
pub use validate::{
    fill_placeholders, url_placeholders, validate, validate_controller, validate_element,
    validate_task, ParamOverrides,
};

/// Body placeholder replaced by the envelope payload when a request is built.
pub const BODY_SLOT_NIF: &str = "documentContentNIF";

/// Reserved `taskId` values that introduce a block instead of a service call.
pub const PARALLEL_TASK: &str = "ParallelTask";
pub const SEQUENTIAL_TASK: &str = "SequentialTask";

#[derive(Debug, thiserror::Error)]
pub enum CwdlError {
    #[error("malformed JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
}

impl CwdlError {
    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        CwdlError::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    /// JSON path of a schema error, `$` for malformed documents.
    pub fn path(&self) -> &str {
        match self {
            CwdlError::Parse(_) => "$",
            CwdlError::Schema { path, .. } => path,
        }
    }

    /// The error as a single-finding report.
    pub fn to_report(&self) -> crate::report::ValidationReport {
        let mut report = crate::report::ValidationReport::new();
        let message = match self {
            CwdlError::Parse(e) => format!("malformed JSON: {e}"),
            CwdlError::Schema { message, .. } => message.clone(),
        };
        report.error(self.path(), message);
        report
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    Parameter,
    Header,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Parameter => "parameter",
            ParamKind::Header => "header",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    /// Serialized as `type` on the wire.
    pub kind: ParamKind,
    pub default_value: Option<String>,
    pub required: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConnectionType {
    RestApi,
}

impl ConnectionType {
    pub fn as_str(self) -> &'static str {
        match self {
            ConnectionType::RestApi => "restapi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HttpMethod {
    Get,
    Post,
    Put,
    Delete,
    Patch,
}

impl HttpMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            HttpMethod::Get => "GET",
            HttpMethod::Post => "POST",
            HttpMethod::Put => "PUT",
            HttpMethod::Delete => "DELETE",
            HttpMethod::Patch => "PATCH",
        }
    }
}

impl FromStr for HttpMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "GET" => Ok(HttpMethod::Get),
            "POST" => Ok(HttpMethod::Post),
            "PUT" => Ok(HttpMethod::Put),
            "DELETE" => Ok(HttpMethod::Delete),
            "PATCH" => Ok(HttpMethod::Patch),
            other => Err(format!("unsupported HTTP method {other:?}")),
        }
    }
}

impl fmt::Display for HttpMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionSpec {
    pub connection_type: ConnectionType,
    pub method: HttpMethod,
    /// May contain `<name>` placeholders bound at request time.
    pub endpoint_url: String,
    pub parameters: Vec<ParamSpec>,
    pub headers: Vec<ParamSpec>,
    /// Value of `body.content`; `None` when the connection sends no body.
    pub body_content_slot: Option<String>,
}

impl ConnectionSpec {
    /// The `Content-Type` header default, if the connection declares one.
    pub fn declared_content_type(&self) -> Option<&str> {
        self.headers
            .iter()
            .find(|h| h.name.eq_ignore_ascii_case("content-type"))
            .and_then(|h| h.default_value.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueNames {
    pub normal: String,
    pub priority: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControllerSpec {
    pub controller_name: String,
    pub service_id: String,
    pub controller_id: String,
    pub queues: QueueNames,
    pub connection: ConnectionSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComponentType {
    /// Dispatch through the broker to a REST-proxy controller.
    RabbitMqRestApi,
}

impl ComponentType {
    pub fn as_str(self) -> &'static str {
        match self {
            ComponentType::RabbitMqRestApi => "rabbitmqrestapi",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub task_name: String,
    pub task_id: String,
    pub controller_id: String,
    pub component_type: ComponentType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CombinatorKind {
    Split,
    WaitCombiner,
}

impl CombinatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CombinatorKind::Split => "split",
            CombinatorKind::WaitCombiner => "waitcombiner",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskNode {
    Service {
        order: u32,
        task_id: String,
    },
    Parallel {
        order: u32,
        input: CombinatorKind,
        output: CombinatorKind,
        children: Vec<TaskNode>,
    },
    Sequential {
        order: u32,
        children: Vec<TaskNode>,
    },
}

impl TaskNode {
    pub fn order(&self) -> u32 {
        match self {
            TaskNode::Service { order, .. }
            | TaskNode::Parallel { order, .. }
            | TaskNode::Sequential { order, .. } => *order,
        }
    }

    /// Children sorted by ascending `order`; empty for service nodes.
    pub fn ordered_children(&self) -> Vec<&TaskNode> {
        match self {
            TaskNode::Service { .. } => Vec::new(),
            TaskNode::Parallel { children, .. } | TaskNode::Sequential { children, .. } => {
                sorted_by_order(children)
            }
        }
    }

    /// Every service `taskId` in this subtree, in document order.
    pub fn service_task_ids(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_task_ids(&mut out);
        out
    }

    fn collect_task_ids<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            TaskNode::Service { task_id, .. } => out.push(task_id),
            TaskNode::Parallel { children, .. } | TaskNode::Sequential { children, .. } => {
                for c in children {
                    c.collect_task_ids(out);
                }
            }
        }
    }
}

pub(crate) fn sorted_by_order(nodes: &[TaskNode]) -> Vec<&TaskNode> {
    let mut v: Vec<&TaskNode> = nodes.iter().collect();
    v.sort_by_key(|n| n.order());
    v
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkflowTemplate {
    pub name: String,
    pub id: String,
    pub description: String,
    /// Composed sequentially in ascending `order`.
    pub tasks: Vec<TaskNode>,
}

impl WorkflowTemplate {
    pub fn service_task_ids(&self) -> Vec<&str> {
        self.tasks
            .iter()
            .flat_map(|t| t.service_task_ids())
            .collect()
    }
}

/// A parsed element of any of the three kinds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Element {
    Controller(ControllerSpec),
    Task(TaskSpec),
    Template(WorkflowTemplate),
}

impl Element {
    pub fn id(&self) -> &str {
        match self {
            Element::Controller(c) => &c.controller_id,
            Element::Task(t) => &t.task_id,
            Element::Template(t) => &t.id,
        }
    }

    pub fn kind(&self) -> ElementKind {
        match self {
            Element::Controller(_) => ElementKind::Controllers,
            Element::Task(_) => ElementKind::Tasks,
            Element::Template(_) => ElementKind::Templates,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            Element::Controller(c) => c.to_json(),
            Element::Task(t) => t.to_json(),
            Element::Template(t) => t.to_json(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ElementKind {
    Controllers,
    Tasks,
    Templates,
}

impl ElementKind {
    pub const ALL: [ElementKind; 3] = [
        ElementKind::Controllers,
        ElementKind::Tasks,
        ElementKind::Templates,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ElementKind::Controllers => "controllers",
            ElementKind::Tasks => "tasks",
            ElementKind::Templates => "templates",
        }
    }
}

impl FromStr for ElementKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "controllers" => Ok(ElementKind::Controllers),
            "tasks" => Ok(ElementKind::Tasks),
            "templates" => Ok(ElementKind::Templates),
            other => Err(format!("unknown element kind {other:?}")),
        }
    }
}

impl fmt::Display for ElementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The set of registered definitions that templates are validated against.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Registry {
    pub controllers: BTreeMap<String, ControllerSpec>,
    pub tasks: BTreeMap<String, TaskSpec>,
    pub templates: BTreeMap<String, WorkflowTemplate>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, element: Element) {
        match element {
            Element::Controller(c) => {
                self.controllers.insert(c.controller_id.clone(), c);
            }
            Element::Task(t) => {
                self.tasks.insert(t.task_id.clone(), t);
            }
            Element::Template(t) => {
                self.templates.insert(t.id.clone(), t);
            }
        }
    }

    pub fn with(mut self, element: Element) -> Self {
        self.insert(element);
        self
    }

    pub fn get(&self, kind: ElementKind, id: &str) -> Option<Element> {
        match kind {
            ElementKind::Controllers => self.controllers.get(id).cloned().map(Element::Controller),
            ElementKind::Tasks => self.tasks.get(id).cloned().map(Element::Task),
            ElementKind::Templates => self.templates.get(id).cloned().map(Element::Template),
        }
    }

    pub fn remove(&mut self, kind: ElementKind, id: &str) -> bool {
        match kind {
            ElementKind::Controllers => self.controllers.remove(id).is_some(),
            ElementKind::Tasks => self.tasks.remove(id).is_some(),
            ElementKind::Templates => self.templates.remove(id).is_some(),
        }
    }

    /// Resolves a task's `controllerId` reference. An exact `controllerId`
    /// match wins; otherwise a controller whose `serviceId` equals the
    /// reference is accepted when exactly one such controller exists.
    pub fn resolve_controller(&self, reference: &str) -> Option<&ControllerSpec> {
        if let Some(c) = self.controllers.get(reference) {
            return Some(c);
        }
        let mut by_service = self
            .controllers
            .values()
            .filter(|c| c.service_id == reference);
        match (by_service.next(), by_service.next()) {
            (Some(c), None) => Some(c),
            _ => None,
        }
    }

    /// Controller serving a task, if both resolve.
    pub fn controller_for_task(&self, task_id: &str) -> Option<&ControllerSpec> {
        self.tasks
            .get(task_id)
            .and_then(|t| self.resolve_controller(&t.controller_id))
    }
}

fn params_to_json(params: &[ParamSpec]) -> Value {
    Value::Array(
        params
            .iter()
            .map(|p| {
                let mut m = Map::new();
                m.insert("name".into(), json!(p.name));
                m.insert("type".into(), json!(p.kind.as_str()));
                if let Some(d) = &p.default_value {
                    m.insert("default_value".into(), json!(d));
                }
                m.insert("required".into(), json!(p.required));
                Value::Object(m)
            })
            .collect(),
    )
}

impl ControllerSpec {
    pub fn to_json(&self) -> Value {
        let c = &self.connection;
        let mut conn = Map::new();
        conn.insert("connection_type".into(), json!(c.connection_type.as_str()));
        conn.insert("method".into(), json!(c.method.as_str()));
        conn.insert("endpoint_url".into(), json!(c.endpoint_url));
        conn.insert("parameters".into(), params_to_json(&c.parameters));
        if let Some(slot) = &c.body_content_slot {
            conn.insert("body".into(), json!({ "content": slot }));
        }
        conn.insert("headers".into(), params_to_json(&c.headers));
        json!({
            "controllerName": self.controller_name,
            "serviceId": self.service_id,
            "controllerId": self.controller_id,
            "queues": {
                "nameInputNormal": self.queues.normal,
                "nameInputPriority": self.queues.priority,
            },
            "connection": Value::Object(conn),
        })
    }
}

impl TaskSpec {
    pub fn to_json(&self) -> Value {
        json!({
            "taskName": self.task_name,
            "taskId": self.task_id,
            "controllerId": self.controller_id,
            "component_type": self.component_type.as_str(),
        })
    }
}

impl TaskNode {
    pub fn to_json(&self) -> Value {
        match self {
            TaskNode::Service { order, task_id } => json!({ "order": order, "taskId": task_id }),
            TaskNode::Parallel {
                order,
                input,
                output,
                children,
            } => json!({
                "order": order,
                "taskId": PARALLEL_TASK,
                "features": {
                    "input": { "component_type": input.as_str() },
                    "output": { "component_type": output.as_str() },
                    "tasks": children.iter().map(TaskNode::to_json).collect::<Vec<_>>(),
                }
            }),
            TaskNode::Sequential { order, children } => json!({
                "order": order,
                "taskId": SEQUENTIAL_TASK,
                "features": {
                    "tasks": children.iter().map(TaskNode::to_json).collect::<Vec<_>>(),
                }
            }),
        }
    }
}

impl WorkflowTemplate {
    pub fn to_json(&self) -> Value {
        json!({
            "workflowTemplateName": self.name,
            "workflowTemplateId": self.id,
            "workflowTemplateDescription": self.description,
            "tasks": self.tasks.iter().map(TaskNode::to_json).collect::<Vec<_>>(),
        })
    }
}

macro_rules! serialize_via_json {
    ($($ty:ty),*) => {
        $(impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                self.to_json().serialize(serializer)
            }
        })*
    };
}

serialize_via_json!(
    ControllerSpec,
    TaskSpec,
    WorkflowTemplate,
    TaskNode,
    Element
);
