use std::collections::{BTreeMap, HashSet};

use super::{
    CombinatorKind, ComponentType, ConnectionType, ControllerSpec, Element, Registry, TaskNode,
    TaskSpec, WorkflowTemplate,
};
use crate::report::ValidationReport;

/// Execution-time parameter bindings, keyed by parameter, header or URL
/// placeholder name.
pub type ParamOverrides = BTreeMap<String, String>;

/// Names of the `<name>` placeholders in an endpoint URL template.
pub fn url_placeholders(template: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find('<') {
        let Some(len) = rest[start + 1..].find('>') else {
            break;
        };
        out.push(&rest[start + 1..start + 1 + len]);
        rest = &rest[start + 2 + len..];
    }
    out
}

/// Replaces each `<name>` with `lookup(name)`; returns the first unbound name
/// on failure.
pub fn fill_placeholders<'a>(
    template: &'a str,
    lookup: impl Fn(&str) -> Option<&'a str>,
) -> Result<String, String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find('<') {
        let Some(len) = rest[start + 1..].find('>') else {
            break;
        };
        let name = &rest[start + 1..start + 1 + len];
        let value = lookup(name).ok_or_else(|| name.to_string())?;
        out.push_str(&rest[..start]);
        out.push_str(value);
        rest = &rest[start + 2 + len..];
    }
    out.push_str(rest);
    Ok(out)
}

fn endpoint_is_absolute(template: &str) -> bool {
    let probe = fill_placeholders(template, |_| Some("placeholder")).unwrap_or_default();
    match url::Url::parse(&probe) {
        Ok(u) => matches!(u.scheme(), "http" | "https") && u.has_host(),
        Err(_) => false,
    }
}

/// Definition-level checks on a controller relative to the other registered
/// controllers.
pub fn validate_controller(controller: &ControllerSpec, registry: &Registry) -> ValidationReport {
    let mut report = ValidationReport::new();
    check_connection(controller, "$", None, &mut report);
    for other in registry.controllers.values() {
        if other.controller_id == controller.controller_id {
            continue;
        }
        for (key, name) in [
            ("nameInputNormal", &controller.queues.normal),
            ("nameInputPriority", &controller.queues.priority),
        ] {
            if *name == other.queues.normal || *name == other.queues.priority {
                report.error(
                    format!("$.queues.{key}"),
                    format!(
                        "queue {name:?} already belongs to controller {:?}",
                        other.controller_id
                    ),
                );
            }
        }
    }
    report
}

pub fn validate_task(task: &TaskSpec, registry: &Registry) -> ValidationReport {
    let mut report = ValidationReport::new();
    match task.component_type {
        ComponentType::RabbitMqRestApi => {}
    }
    if registry.resolve_controller(&task.controller_id).is_none() {
        report.error(
            "$.controllerId",
            format!("unresolved controllerId {}", task.controller_id),
        );
    }
    report
}

/// Definition-time checks for any element kind.
pub fn validate_element(element: &Element, registry: &Registry) -> ValidationReport {
    match element {
        Element::Controller(c) => validate_controller(c, registry),
        Element::Task(t) => validate_task(t, registry),
        Element::Template(t) => validate(t, registry, None),
    }
}

/// Checks a template against the registry. With `inputs = None` the check
/// runs at definition time and unbound required parameters are warnings;
/// with `Some(overrides)` it runs right before execution and they are errors.
pub fn validate(
    template: &WorkflowTemplate,
    registry: &Registry,
    inputs: Option<&ParamOverrides>,
) -> ValidationReport {
    let mut report = ValidationReport::new();
    let mut checked = HashSet::new();
    for (i, node) in template.tasks.iter().enumerate() {
        validate_node(
            node,
            &format!("$.tasks[{i}]"),
            registry,
            inputs,
            &mut checked,
            &mut report,
        );
    }
    report
}

fn validate_node(
    node: &TaskNode,
    path: &str,
    registry: &Registry,
    inputs: Option<&ParamOverrides>,
    checked: &mut HashSet<String>,
    report: &mut ValidationReport,
) {
    match node {
        TaskNode::Service { task_id, .. } => {
            let tpath = format!("{path}.taskId");
            let Some(task) = registry.tasks.get(task_id) else {
                report.error(tpath, format!("unresolved taskId {task_id}"));
                return;
            };
            match task.component_type {
                ComponentType::RabbitMqRestApi => {}
            }
            let Some(controller) = registry.resolve_controller(&task.controller_id) else {
                report.error(
                    tpath,
                    format!(
                        "task {task_id} references unresolved controllerId {}",
                        task.controller_id
                    ),
                );
                return;
            };
            if checked.insert(controller.controller_id.clone()) {
                check_connection(controller, &tpath, inputs, report);
            }
        }
        TaskNode::Parallel {
            input,
            output,
            children,
            ..
        } => {
            if *input != CombinatorKind::Split {
                report.error(
                    format!("{path}.features.input.component_type"),
                    format!("parallel input must be split, found {}", input.as_str()),
                );
            }
            if *output != CombinatorKind::WaitCombiner {
                report.error(
                    format!("{path}.features.output.component_type"),
                    format!(
                        "parallel output must be waitcombiner, found {}",
                        output.as_str()
                    ),
                );
            }
            for (i, c) in children.iter().enumerate() {
                let cpath = format!("{path}.features.tasks[{i}]");
                validate_node(c, &cpath, registry, inputs, checked, report);
            }
        }
        TaskNode::Sequential { children, .. } => {
            for (i, c) in children.iter().enumerate() {
                let cpath = format!("{path}.features.tasks[{i}]");
                validate_node(c, &cpath, registry, inputs, checked, report);
            }
        }
    }
}

fn check_connection(
    controller: &ControllerSpec,
    path: &str,
    inputs: Option<&ParamOverrides>,
    report: &mut ValidationReport,
) {
    let conn = &controller.connection;
    let cid = &controller.controller_id;
    match conn.connection_type {
        ConnectionType::RestApi => {}
    }
    if !endpoint_is_absolute(&conn.endpoint_url) {
        report.error(
            path,
            format!(
                "controller {cid}: endpoint_url {:?} is not an absolute http(s) URL",
                conn.endpoint_url
            ),
        );
    }
    if let Some(bound) = inputs {
        for name in url_placeholders(&conn.endpoint_url) {
            if !bound.contains_key(name) {
                report.error(
                    path,
                    format!("controller {cid}: URL placeholder <{name}> is not supplied"),
                );
            }
        }
    }
    for p in conn.parameters.iter().chain(&conn.headers) {
        if !p.required || p.default_value.is_some() {
            continue;
        }
        match inputs {
            None => report.warning(
                path,
                format!(
                    "controller {cid}: required {} {:?} has no default and must be supplied at execution time",
                    p.kind.as_str(),
                    p.name
                ),
            ),
            Some(bound) if !bound.contains_key(&p.name) => report.error(
                path,
                format!(
                    "controller {cid}: required {} {:?} has no default and none was supplied",
                    p.kind.as_str(),
                    p.name
                ),
            ),
            Some(_) => {}
        }
    }
}
