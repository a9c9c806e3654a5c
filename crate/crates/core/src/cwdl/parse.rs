use std::collections::HashSet;

use serde_json::{Map, Value};

use super::{
    CombinatorKind, ComponentType, ConnectionSpec, ConnectionType, ControllerSpec, CwdlError,
    Element, HttpMethod, ParamKind, ParamSpec, QueueNames, TaskNode, TaskSpec, WorkflowTemplate,
    BODY_SLOT_NIF, PARALLEL_TASK, SEQUENTIAL_TASK,
};

type Result<T> = std::result::Result<T, CwdlError>;

pub fn parse_controller(text: &str) -> Result<ControllerSpec> {
    let value: Value = serde_json::from_str(text)?;
    controller_from_value(&value)
}

pub fn parse_task(text: &str) -> Result<TaskSpec> {
    let value: Value = serde_json::from_str(text)?;
    task_from_value(&value)
}

pub fn parse_template(text: &str) -> Result<WorkflowTemplate> {
    let value: Value = serde_json::from_str(text)?;
    template_from_value(&value)
}

/// Parses a document of unknown kind, dispatching on its identifying key.
pub fn parse_element(text: &str) -> Result<Element> {
    let value: Value = serde_json::from_str(text)?;
    let map = object(&value, "$")?;
    if map.contains_key("workflowTemplateId") {
        template_from_value(&value).map(Element::Template)
    } else if map.contains_key("connection") || map.contains_key("queues") {
        controller_from_value(&value).map(Element::Controller)
    } else if map.contains_key("component_type") || map.contains_key("taskName") {
        task_from_value(&value).map(Element::Task)
    } else {
        Err(CwdlError::schema(
            "$",
            "cannot tell whether document is a controller, task or template",
        ))
    }
}

fn object<'a>(value: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    value
        .as_object()
        .ok_or_else(|| CwdlError::schema(path, "expected an object"))
}

fn check_keys(map: &Map<String, Value>, path: &str, allowed: &[&str]) -> Result<()> {
    for key in map.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(CwdlError::schema(
                format!("{path}.{key}"),
                format!("unknown key {key:?}"),
            ));
        }
    }
    Ok(())
}

fn field<'a>(map: &'a Map<String, Value>, path: &str, key: &str) -> Result<&'a Value> {
    map.get(key)
        .ok_or_else(|| CwdlError::schema(format!("{path}.{key}"), "missing required field"))
}

fn string(map: &Map<String, Value>, path: &str, key: &str) -> Result<String> {
    field(map, path, key)?
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| CwdlError::schema(format!("{path}.{key}"), "expected a string"))
}

fn non_empty(map: &Map<String, Value>, path: &str, key: &str) -> Result<String> {
    let s = string(map, path, key)?;
    if s.is_empty() {
        return Err(CwdlError::schema(
            format!("{path}.{key}"),
            "must not be empty",
        ));
    }
    Ok(s)
}

/// Identifiers double as file names in the element store, so they are
/// restricted to a conservative character set.
pub fn is_valid_identifier(s: &str) -> bool {
    !s.is_empty()
        && !s.starts_with('.')
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

fn identifier(map: &Map<String, Value>, path: &str, key: &str) -> Result<String> {
    let s = string(map, path, key)?;
    if s.is_empty() {
        return Err(CwdlError::schema(
            format!("{path}.{key}"),
            "empty identifier",
        ));
    }
    if !is_valid_identifier(&s) {
        return Err(CwdlError::schema(
            format!("{path}.{key}"),
            format!("invalid identifier {s:?}: use letters, digits, '_', '-' or '.'"),
        ));
    }
    Ok(s)
}

fn array<'a>(map: &'a Map<String, Value>, path: &str, key: &str) -> Result<&'a Vec<Value>> {
    field(map, path, key)?
        .as_array()
        .ok_or_else(|| CwdlError::schema(format!("{path}.{key}"), "expected an array"))
}

fn controller_from_value(value: &Value) -> Result<ControllerSpec> {
    let map = object(value, "$")?;
    check_keys(
        map,
        "$",
        &[
            "controllerName",
            "serviceId",
            "controllerId",
            "queues",
            "connection",
        ],
    )?;
    let controller_name = string(map, "$", "controllerName")?;
    let service_id = identifier(map, "$", "serviceId")?;
    let controller_id = identifier(map, "$", "controllerId")?;

    let queues = object(field(map, "$", "queues")?, "$.queues")?;
    check_keys(
        queues,
        "$.queues",
        &["nameInputNormal", "nameInputPriority"],
    )?;
    let normal = non_empty(queues, "$.queues", "nameInputNormal")?;
    let priority = non_empty(queues, "$.queues", "nameInputPriority")?;
    if normal == priority {
        return Err(CwdlError::schema(
            "$.queues.nameInputPriority",
            "priority queue must differ from the normal queue",
        ));
    }

    let connection = connection_from_value(field(map, "$", "connection")?)?;
    Ok(ControllerSpec {
        controller_name,
        service_id,
        controller_id,
        queues: QueueNames { normal, priority },
        connection,
    })
}

fn connection_from_value(value: &Value) -> Result<ConnectionSpec> {
    let path = "$.connection";
    let map = object(value, path)?;
    check_keys(
        map,
        path,
        &[
            "connection_type",
            "method",
            "endpoint_url",
            "parameters",
            "headers",
            "body",
        ],
    )?;
    let connection_type = match string(map, path, "connection_type")?.as_str() {
        "restapi" => ConnectionType::RestApi,
        other => {
            return Err(CwdlError::schema(
                format!("{path}.connection_type"),
                format!("unknown connection_type {other:?}"),
            ))
        }
    };
    let method: HttpMethod = string(map, path, "method")?
        .parse()
        .map_err(|e: String| CwdlError::schema(format!("{path}.method"), e))?;
    let endpoint_url = non_empty(map, path, "endpoint_url")?;

    let parameters = match map.get("parameters") {
        Some(_) => params(map, path, "parameters", ParamKind::Parameter)?,
        None => Vec::new(),
    };
    let headers = match map.get("headers") {
        Some(_) => params(map, path, "headers", ParamKind::Header)?,
        None => Vec::new(),
    };

    let body_content_slot = match map.get("body") {
        None => None,
        Some(body) => {
            let bpath = format!("{path}.body");
            let bmap = object(body, &bpath)?;
            check_keys(bmap, &bpath, &["content"])?;
            let slot = string(bmap, &bpath, "content")?;
            if slot != BODY_SLOT_NIF {
                return Err(CwdlError::schema(
                    format!("{bpath}.content"),
                    format!("unknown body slot {slot:?}; expected {BODY_SLOT_NIF:?}"),
                ));
            }
            Some(slot)
        }
    };

    Ok(ConnectionSpec {
        connection_type,
        method,
        endpoint_url,
        parameters,
        headers,
        body_content_slot,
    })
}

fn params(
    map: &Map<String, Value>,
    path: &str,
    key: &str,
    expected: ParamKind,
) -> Result<Vec<ParamSpec>> {
    let items = array(map, path, key)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let ipath = format!("{path}.{key}[{i}]");
        let pmap = object(item, &ipath)?;
        check_keys(pmap, &ipath, &["name", "type", "default_value", "required"])?;
        let name = non_empty(pmap, &ipath, "name")?;
        let kind = match string(pmap, &ipath, "type")?.as_str() {
            "parameter" => ParamKind::Parameter,
            "header" => ParamKind::Header,
            other => {
                return Err(CwdlError::schema(
                    format!("{ipath}.type"),
                    format!("unknown parameter type {other:?}"),
                ))
            }
        };
        if kind != expected {
            return Err(CwdlError::schema(
                format!("{ipath}.type"),
                format!("entries of {key:?} must have type {:?}", expected.as_str()),
            ));
        }
        let default_value = match pmap.get("default_value") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => {
                return Err(CwdlError::schema(
                    format!("{ipath}.default_value"),
                    "expected a string",
                ))
            }
        };
        let required = field(pmap, &ipath, "required")?
            .as_bool()
            .ok_or_else(|| CwdlError::schema(format!("{ipath}.required"), "expected a boolean"))?;
        let folded = if kind == ParamKind::Header {
            name.to_ascii_lowercase()
        } else {
            name.clone()
        };
        if !seen.insert(folded) {
            return Err(CwdlError::schema(
                format!("{ipath}.name"),
                format!("duplicate name {name:?}"),
            ));
        }
        out.push(ParamSpec {
            name,
            kind,
            default_value,
            required,
        });
    }
    Ok(out)
}

fn task_from_value(value: &Value) -> Result<TaskSpec> {
    let map = object(value, "$")?;
    check_keys(
        map,
        "$",
        &["taskName", "taskId", "controllerId", "component_type"],
    )?;
    let task_name = string(map, "$", "taskName")?;
    let task_id = identifier(map, "$", "taskId")?;
    if task_id == PARALLEL_TASK || task_id == SEQUENTIAL_TASK {
        return Err(CwdlError::schema(
            "$.taskId",
            format!("{task_id:?} is reserved for template blocks"),
        ));
    }
    let controller_id = identifier(map, "$", "controllerId")?;
    let component_type = match string(map, "$", "component_type")?.as_str() {
        "rabbitmqrestapi" => ComponentType::RabbitMqRestApi,
        other => {
            return Err(CwdlError::schema(
                "$.component_type",
                format!("unknown component_type {other:?}"),
            ))
        }
    };
    Ok(TaskSpec {
        task_name,
        task_id,
        controller_id,
        component_type,
    })
}

fn template_from_value(value: &Value) -> Result<WorkflowTemplate> {
    let map = object(value, "$")?;
    check_keys(
        map,
        "$",
        &[
            "workflowTemplateName",
            "workflowTemplateId",
            "workflowTemplateDescription",
            "tasks",
        ],
    )?;
    let name = string(map, "$", "workflowTemplateName")?;
    let id = identifier(map, "$", "workflowTemplateId")?;
    let description = match map.get("workflowTemplateDescription") {
        None => String::new(),
        Some(_) => string(map, "$", "workflowTemplateDescription")?,
    };
    let tasks = node_list(map, "$", "tasks")?;
    Ok(WorkflowTemplate {
        name,
        id,
        description,
        tasks,
    })
}

fn node_list(map: &Map<String, Value>, path: &str, key: &str) -> Result<Vec<TaskNode>> {
    let items = array(map, path, key)?;
    if items.is_empty() {
        return Err(CwdlError::schema(
            format!("{path}.{key}"),
            "task list must contain at least one entry",
        ));
    }
    let mut orders = HashSet::new();
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let ipath = format!("{path}.{key}[{i}]");
        let node = node_from_value(item, &ipath)?;
        if !orders.insert(node.order()) {
            return Err(CwdlError::schema(
                format!("{ipath}.order"),
                format!("duplicate order {} among siblings", node.order()),
            ));
        }
        out.push(node);
    }
    Ok(out)
}

fn combinator(map: &Map<String, Value>, path: &str, key: &str) -> Result<CombinatorKind> {
    let cpath = format!("{path}.{key}");
    let cmap = object(field(map, path, key)?, &cpath)?;
    check_keys(cmap, &cpath, &["component_type"])?;
    match string(cmap, &cpath, "component_type")?.as_str() {
        "split" => Ok(CombinatorKind::Split),
        "waitcombiner" => Ok(CombinatorKind::WaitCombiner),
        other => Err(CwdlError::schema(
            format!("{cpath}.component_type"),
            format!("unknown combinator {other:?}"),
        )),
    }
}

fn node_from_value(value: &Value, path: &str) -> Result<TaskNode> {
    let map = object(value, path)?;
    check_keys(map, path, &["order", "taskId", "features"])?;
    let order_value = field(map, path, "order")?;
    let order = order_value
        .as_u64()
        .filter(|o| *o >= 1 && *o <= u64::from(u32::MAX))
        .ok_or_else(|| CwdlError::schema(format!("{path}.order"), "expected a positive integer"))?
        as u32;
    let task_id = identifier(map, path, "taskId")?;

    match task_id.as_str() {
        PARALLEL_TASK => {
            let fpath = format!("{path}.features");
            let features = object(field(map, path, "features")?, &fpath)?;
            check_keys(features, &fpath, &["input", "output", "tasks"])?;
            let input = combinator(features, &fpath, "input")?;
            let output = combinator(features, &fpath, "output")?;
            let children = node_list(features, &fpath, "tasks")?;
            Ok(TaskNode::Parallel {
                order,
                input,
                output,
                children,
            })
        }
        SEQUENTIAL_TASK => {
            let fpath = format!("{path}.features");
            let features = object(field(map, path, "features")?, &fpath)?;
            check_keys(features, &fpath, &["tasks"])?;
            let children = node_list(features, &fpath, "tasks")?;
            Ok(TaskNode::Sequential { order, children })
        }
        _ => {
            if map.contains_key("features") {
                return Err(CwdlError::schema(
                    format!("{path}.features"),
                    "features are only allowed on ParallelTask and SequentialTask",
                ));
            }
            Ok(TaskNode::Service { order, task_id })
        }
    }
}
