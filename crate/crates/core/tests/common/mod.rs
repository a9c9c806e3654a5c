#![allow(dead_code)]

pub mod http;
pub mod nifgen;
pub mod scenarios;
pub mod stress;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use cwm_core::broker::{BrokerConfig, MemoryBroker, MessageBroker};
use cwm_core::controller::{run_controller, ControllerRuntimeConfig};
use cwm_core::cwdl::{parse_controller, parse_task, parse_template, Element, Registry};
use cwm_core::engine::{Engine, EngineConfig};
use cwm_core::mocks::{apply_gazetteer, GazetteerEntry, MockServiceConfig};
use cwm_core::nif::{parse_nif, NifDocument};
use parking_lot::RwLock;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde_json::{json, Value};
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;

pub const TEXT: &str = "Monteux was born in Paris";
pub const BASE: &str = "http://dkt.dfki.de/documents/";
pub const PER: &str = "http://dkt.dfki.de/ontologies/nif#PER";
pub const LOC: &str = "http://dkt.dfki.de/ontologies/nif#LOC";
pub const GND: &str = "http://d-nb.info/gnd/122700198";
pub const GEONAMES: &str = "http://www.geonames.org/2988507";

pub fn fixture(name: &str) -> String {
    std::fs::read_to_string(format!(
        "{}/tests/fixtures/{name}",
        env!("CARGO_MANIFEST_DIR")
    ))
    .unwrap_or_else(|e| panic!("fixture {name}: {e}"))
}

/// Controller fixture text with its `<host>` endpoint pointed at `base_url`
/// (which ends in `/`).
pub fn pointed(controller_fixture: &str, base_url: &str) -> String {
    fixture(controller_fixture).replace("http://<host>/", base_url)
}

pub fn golden_result() -> NifDocument {
    parse_nif(&fixture("ml_glk_result.ttl")).expect("golden NIF document parses")
}

pub fn ner_mock() -> MockServiceConfig {
    MockServiceConfig {
        gazetteer: vec![GazetteerEntry::new("Monteux", PER, Some(GND))],
        ..Default::default()
    }
}

pub fn geo_mock() -> MockServiceConfig {
    MockServiceConfig {
        gazetteer: vec![GazetteerEntry::new("Paris", LOC, Some(GEONAMES))],
        ..Default::default()
    }
}

/// Registry of the NER controller, task and ML_GLK template plus the GEO controller and task, with
/// endpoints at the given mock base URLs.
pub fn glk_registry(ner_url: &str, geo_url: &str) -> Registry {
    Registry::new()
        .with(Element::Controller(
            parse_controller(&pointed("ner_controller.json", ner_url)).unwrap(),
        ))
        .with(Element::Controller(
            parse_controller(&pointed("geo_controller.json", geo_url)).unwrap(),
        ))
        .with(Element::Task(
            parse_task(&fixture("ner_task.json")).unwrap(),
        ))
        .with(Element::Task(
            parse_task(&fixture("geo_task.json")).unwrap(),
        ))
        .with(Element::Template(
            parse_template(&fixture("ml_glk_template.json")).unwrap(),
        ))
}

/// Engine, reply loop and one consumer per registered controller.
pub struct Harness {
    pub broker: Arc<MemoryBroker>,
    pub engine: Arc<Engine>,
    pub registry: Arc<RwLock<Registry>>,
    stop: CancellationToken,
    tasks: Vec<JoinHandle<()>>,
}

impl Harness {
    pub async fn start(
        registry: Registry,
        broker: BrokerConfig,
        runtime: impl Fn(&str) -> ControllerRuntimeConfig,
    ) -> Harness {
        let broker = Arc::new(MemoryBroker::new(broker));
        let registry = Arc::new(RwLock::new(registry));
        let engine = Arc::new(
            Engine::new(broker.clone(), registry.clone(), EngineConfig::default()).unwrap(),
        );
        let stop = CancellationToken::new();
        let mut tasks = Vec::new();
        {
            let (engine, stop) = (engine.clone(), stop.clone());
            tasks.push(tokio::spawn(
                async move { engine.run_reply_loop(stop).await },
            ));
        }
        let controllers: Vec<_> = registry.read().controllers.values().cloned().collect();
        for spec in controllers {
            let rt = runtime(&spec.controller_id);
            let b: Arc<dyn MessageBroker> = broker.clone();
            let stop = stop.clone();
            tasks.push(tokio::spawn(async move {
                run_controller(spec, b, stop, rt).await.unwrap();
            }));
        }
        Harness {
            broker,
            engine,
            registry,
            stop,
            tasks,
        }
    }

    pub async fn shutdown(self) {
        self.stop.cancel();
        for t in self.tasks {
            t.await.unwrap();
        }
    }
}

pub fn fast_runtime(_: &str) -> ControllerRuntimeConfig {
    ControllerRuntimeConfig {
        request_timeout: Duration::from_secs(5),
        idle_wait: Duration::from_millis(50),
        ..Default::default()
    }
}

// ---------------------------------------------------------------------------
// Random workflows over up to six single-word gazetteer services.

pub const WORDS: [&str; 6] = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"];
pub const WORD_TEXT: &str = "alpha beta gamma delta epsilon zeta";

pub fn word_class(i: usize) -> String {
    format!("http://example.org/class#S{i}")
}

pub fn word_gazetteer(i: usize) -> Vec<GazetteerEntry> {
    vec![GazetteerEntry::new(WORDS[i], &word_class(i), None)]
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Service(usize),
    Parallel(Vec<Shape>),
    Sequential(Vec<Shape>),
}

impl Shape {
    pub fn services(&self) -> Vec<usize> {
        match self {
            Shape::Service(i) => vec![*i],
            Shape::Parallel(c) | Shape::Sequential(c) => {
                c.iter().flat_map(Shape::services).collect()
            }
        }
    }

    fn to_json(&self, order: usize) -> Value {
        match self {
            Shape::Service(i) => json!({ "order": order, "taskId": format!("T{i}") }),
            Shape::Parallel(children) => json!({
                "order": order,
                "taskId": "ParallelTask",
                "features": {
                    "input": { "component_type": "split" },
                    "output": { "component_type": "waitcombiner" },
                    "tasks": nodes_json(children),
                }
            }),
            Shape::Sequential(children) => json!({
                "order": order,
                "taskId": "SequentialTask",
                "features": { "tasks": nodes_json(children) }
            }),
        }
    }
}

/// Children in random-looking but declared order: `order` values are
/// assigned 1..n and the array is reversed so parsers must sort.
fn nodes_json(children: &[Shape]) -> Value {
    let mut v: Vec<Value> = children
        .iter()
        .enumerate()
        .map(|(i, c)| c.to_json(i + 1))
        .collect();
    v.reverse();
    Value::Array(v)
}

/// A top-level sequence of nodes with nesting depth at most 3 and at most
/// six distinct services.
#[derive(Debug, Clone)]
pub struct RandomWorkflow {
    pub top: Vec<Shape>,
}

impl RandomWorkflow {
    pub fn generate(rng: &mut impl RngCore) -> RandomWorkflow {
        let n = rng.random_range(1..=6usize);
        let mut pool: Vec<usize> = (0..6).collect();
        pool.shuffle(rng);
        pool.truncate(n);
        let mut top = Vec::new();
        while !pool.is_empty() {
            top.push(gen_node(rng, 1, &mut pool));
        }
        RandomWorkflow { top }
    }

    pub fn template_json(&self, id: &str) -> String {
        json!({
            "workflowTemplateName": id,
            "workflowTemplateId": id,
            "workflowTemplateDescription": "generated",
            "tasks": nodes_json(&self.top),
        })
        .to_string()
    }

    pub fn services(&self) -> Vec<usize> {
        self.top.iter().flat_map(Shape::services).collect()
    }

    /// Pairs `(before, after)` of service sets where every service in
    /// `before` must finish before any service in `after` starts.
    pub fn happens_before(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut out = Vec::new();
        seq_pairs(&self.top, &mut out);
        out
    }
}

fn seq_pairs(seq: &[Shape], out: &mut Vec<(Vec<usize>, Vec<usize>)>) {
    for i in 0..seq.len() {
        for j in i + 1..seq.len() {
            out.push((seq[i].services(), seq[j].services()));
        }
    }
    for s in seq {
        match s {
            Shape::Service(_) => {}
            Shape::Parallel(c) => {
                for child in c {
                    seq_pairs(std::slice::from_ref(child), out);
                }
            }
            Shape::Sequential(c) => seq_pairs(c, out),
        }
    }
}

fn gen_node(rng: &mut impl RngCore, depth: usize, pool: &mut Vec<usize>) -> Shape {
    if depth >= 3 || pool.len() < 2 || rng.random_bool(0.4) {
        return Shape::Service(pool.pop().expect("pool is non-empty"));
    }
    let k = rng.random_range(2..=pool.len().min(3));
    let mut children = Vec::new();
    for _ in 0..k {
        if pool.is_empty() {
            break;
        }
        children.push(gen_node(rng, depth + 1, pool));
    }
    if rng.random_bool(0.5) {
        Shape::Parallel(children)
    } else {
        Shape::Sequential(children)
    }
}

/// Registry with controllers `C0..C5` pointing at `urls[i]`, tasks `T0..T5`.
pub fn word_registry(urls: &[String]) -> Registry {
    let mut reg = Registry::new();
    for (i, url) in urls.iter().enumerate() {
        let controller = json!({
            "controllerName": format!("C{i}"),
            "serviceId": format!("S{i}"),
            "controllerId": format!("C{i}"),
            "queues": {
                "nameInputNormal": format!("Q{i}_input_normal"),
                "nameInputPriority": format!("Q{i}_input_prio"),
            },
            "connection": {
                "connection_type": "restapi",
                "method": "POST",
                "endpoint_url": url,
                "body": { "content": "documentContentNIF" },
                "headers": [
                    { "name": "Content-Type", "type": "header", "default_value": "text/turtle", "required": true }
                ]
            }
        });
        reg.insert(Element::Controller(
            parse_controller(&controller.to_string()).unwrap(),
        ));
        let task = json!({
            "taskName": format!("T{i}"),
            "taskId": format!("T{i}"),
            "controllerId": format!("C{i}"),
            "component_type": "rabbitmqrestapi",
        });
        reg.insert(Element::Task(parse_task(&task.to_string()).unwrap()));
    }
    reg
}

/// Service functions equivalent to the word mocks, for the reference
/// interpreter.
pub fn word_service(task_id: &str, doc: &NifDocument) -> Result<NifDocument, String> {
    let i: usize = task_id
        .strip_prefix('T')
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("unknown task {task_id}"))?;
    Ok(apply_gazetteer(doc, &word_gazetteer(i)))
}

/// Checks happens-before constraints on mock logs: every request of an
/// `after` service carries a sequence number above the completion of every
/// `before` service. `logs[i]` holds the entries of service `i` for one run.
pub fn check_happens_before(
    wf: &RandomWorkflow,
    logs: &BTreeMap<usize, Vec<cwm_core::mocks::LogEntry>>,
) -> Result<(), String> {
    for (before, after) in wf.happens_before() {
        for b in &before {
            let done = logs[b]
                .iter()
                .filter_map(|e| e.done_seq)
                .max()
                .ok_or_else(|| format!("service {b} never finished"))?;
            for a in &after {
                let started = logs[a]
                    .iter()
                    .map(|e| e.seq)
                    .min()
                    .ok_or_else(|| format!("service {a} never called"))?;
                if started <= done {
                    return Err(format!(
                        "service {a} started at {started} before {b} finished at {done}"
                    ));
                }
            }
        }
    }
    Ok(())
}
