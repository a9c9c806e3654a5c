//! End-to-end scenarios shared by the engine tests and the acceptance suite.
//! Each returns `Err` with a description on the first violated expectation.

use std::collections::BTreeMap;
use std::time::Duration;

use cwm_core::broker::{BrokerConfig, Priority};
use cwm_core::controller::{ControllerRuntimeConfig, ExecutionMode, PollPolicy};
use cwm_core::cwdl::{parse_template, Element, NodeId};
use cwm_core::engine::{
    reference_interpreter, EngineError, ExecutionInput, ExecutionRequest, ExecutionState, NodeState,
};
use cwm_core::mocks::{MockMode, MockService, MockServiceConfig};
use cwm_core::nif::{make_context, parse_nif, NifDocument};
use rand::{Rng, SeedableRng};
use sha2::{Digest, Sha256};

use super::*;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn doc_of(bytes: &[u8]) -> Result<NifDocument, String> {
    let text = std::str::from_utf8(bytes).map_err(|e| e.to_string())?;
    parse_nif(text).map_err(|e| e.to_string())
}

fn runtime(mode: ExecutionMode) -> impl Fn(&str) -> ControllerRuntimeConfig {
    move |id| ControllerRuntimeConfig {
        mode,
        poll: PollPolicy::new(Duration::from_millis(10), Duration::from_secs(5)).unwrap(),
        ..fast_runtime(id)
    }
}

/// Runs `ML_GLK` against the NER and GEO mocks and returns the final
/// document together with the number of envelopes each `*_input_normal`
/// queue received.
pub async fn run_glk(
    ner: MockServiceConfig,
    geo: MockServiceConfig,
    mode: ExecutionMode,
) -> Result<(NifDocument, u64, u64), String> {
    let ner = MockService::start(ner).await.map_err(|e| e.to_string())?;
    let geo = MockService::start(geo).await.map_err(|e| e.to_string())?;
    let h = Harness::start(
        glk_registry(&ner.url(), &geo.url()),
        BrokerConfig::default(),
        runtime(mode),
    )
    .await;
    let id = h
        .engine
        .execute(ExecutionRequest::new(
            "ML_GLK",
            ExecutionInput::Text(TEXT.into()),
        ))
        .map_err(|e| e.to_string())?;
    let state = h
        .engine
        .wait_terminal(&id, Duration::from_secs(5))
        .await
        .map_err(|e| e.to_string())?;
    ensure!(
        state == ExecutionState::Completed,
        "execution ended {state:?}"
    );
    let doc = doc_of(&h.engine.get_result(&id).map_err(|e| e.to_string())?)?;
    let published = |q: &str| h.broker.stats(q).map(|s| s.published).unwrap_or(0);
    let counts = (published("NER_input_normal"), published("GEO_input_normal"));
    h.shutdown().await;
    ner.shutdown().await;
    geo.shutdown().await;
    Ok((doc, counts.0, counts.1))
}

/// The ML_GLK template end to end: exactly the two reference annotations,
/// one envelope per NER and GEO queue.
pub async fn ml_glk_end_to_end() -> Result<(), String> {
    let (doc, ner_n, geo_n) = run_glk(ner_mock(), geo_mock(), ExecutionMode::Sync).await?;
    ensure!(
        doc == golden_result(),
        "result differs from the reference document"
    );
    ensure!(
        (ner_n, geo_n) == (1, 1),
        "queues saw {ner_n} NER and {geo_n} GEO envelopes"
    );
    Ok(())
}

/// Same template, sync controllers and mocks vs async ones.
pub async fn sync_async_equivalence() -> Result<(), String> {
    let asynch = |c: MockServiceConfig| MockServiceConfig {
        mode: MockMode::Async,
        latency: Duration::from_millis(30),
        ..c
    };
    let (a, ..) = run_glk(ner_mock(), geo_mock(), ExecutionMode::Sync).await?;
    let (b, ..) = run_glk(asynch(ner_mock()), asynch(geo_mock()), ExecutionMode::Async).await?;
    ensure!(a == b, "sync and async results differ");
    ensure!(
        a == golden_result(),
        "sync result differs from the reference document"
    );
    Ok(())
}

/// NER fails `fail_next` times with the default three attempts. Returns the
/// terminal state and, for failed runs, whether the GEO branch output was
/// kept.
pub async fn glk_with_ner_failures(fail_next: u32) -> Result<(ExecutionState, bool), String> {
    let ner = MockService::start(MockServiceConfig {
        fail_next_n: fail_next,
        ..ner_mock()
    })
    .await
    .map_err(|e| e.to_string())?;
    let geo = MockService::start(geo_mock())
        .await
        .map_err(|e| e.to_string())?;
    let h = Harness::start(
        glk_registry(&ner.url(), &geo.url()),
        BrokerConfig::default(),
        fast_runtime,
    )
    .await;
    // Hold NER until GEO has answered so the GEO branch is known to finish
    // before any NER outcome.
    ner.pause();
    let id = h
        .engine
        .execute(ExecutionRequest::new(
            "ML_GLK",
            ExecutionInput::Text(TEXT.into()),
        ))
        .map_err(|e| e.to_string())?;
    let geo_node = NodeId(3);
    let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
    loop {
        let status = h.engine.get_status(&id).map_err(|e| e.to_string())?;
        if status.node_state(geo_node) == Some(NodeState::Done) {
            break;
        }
        ensure!(tokio::time::Instant::now() < deadline, "GEO never finished");
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    ner.resume();
    let state = h
        .engine
        .wait_terminal(&id, Duration::from_secs(5))
        .await
        .map_err(|e| e.to_string())?;
    let kept = match state {
        ExecutionState::Completed => {
            let doc = doc_of(&h.engine.get_result(&id).map_err(|e| e.to_string())?)?;
            ensure!(
                doc == golden_result(),
                "completed result differs from the reference"
            );
            false
        }
        ExecutionState::Failed => {
            match h.engine.get_result(&id) {
                Err(EngineError::Failed { report, .. }) => {
                    ensure!(
                        report.node_id == NodeId(2),
                        "failure blamed on {}",
                        report.node_id
                    );
                    ensure!(
                        report.attempts == 3,
                        "failure after {} attempts",
                        report.attempts
                    );
                }
                other => return Err(format!("expected a failure report, got {other:?}")),
            }
            let partial = h.engine.partial_results(&id).map_err(|e| e.to_string())?;
            let geo_doc = partial.get(&geo_node).map(|b| doc_of(b)).transpose()?;
            let want = make_context(TEXT, BASE)
                .annotate(20, 25, LOC, Some(GEONAMES))
                .map_err(|e| e.to_string())?;
            geo_doc == Some(want) && !partial.contains_key(&NodeId(2))
        }
        other => return Err(format!("execution ended {other:?}")),
    };
    ensure!(
        ner.request_count() as u32 == fail_next.min(2) + 1,
        "NER saw {} requests",
        ner.request_count()
    );
    h.shutdown().await;
    ner.shutdown().await;
    geo.shutdown().await;
    Ok((state, kept))
}

pub async fn failure_handling() -> Result<(), String> {
    let (state, _) = glk_with_ner_failures(2).await?;
    ensure!(
        state == ExecutionState::Completed,
        "failNextN=2 ended {state:?}"
    );
    let (state, kept) = glk_with_ner_failures(3).await?;
    ensure!(
        state == ExecutionState::Failed,
        "failNextN=3 ended {state:?}"
    );
    ensure!(kept, "GEO partial result was not retained");
    Ok(())
}

fn body_hash(text: &str) -> String {
    hex::encode(Sha256::digest(
        cwm_core::nif::serialize_nif(&make_context(text, BASE)).as_bytes(),
    ))
}

/// Publishes 20 normal and 5 priority executions in a random interleaving
/// (each class in its own order) while no consumer runs, then starts one
/// controller and checks the service saw them priority-first, FIFO within a
/// class.
pub async fn priority_interleavings(runs: usize, seed: u64) -> Result<(), String> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mock = MockService::start(MockServiceConfig::default())
        .await
        .map_err(|e| e.to_string())?;
    let registry = word_registry(&[mock.url()]).with(Element::Template(
        parse_template(
            &RandomWorkflow {
                top: vec![Shape::Service(0)],
            }
            .template_json("P"),
        )
        .map_err(|e| e.to_string())?,
    ));
    for run in 0..runs {
        let mut order: Vec<(Priority, usize)> = Vec::new();
        let (mut n, mut p) = (0, 0);
        while n < 20 || p < 5 {
            let pick_p = p < 5 && (n == 20 || rng.random_range(0..25) < 5);
            if pick_p {
                order.push((Priority::Priority, p));
                p += 1;
            } else {
                order.push((Priority::Normal, n));
                n += 1;
            }
        }
        let text = |(prio, i): (Priority, usize)| format!("run {run} {prio:?} {i}");

        // Harness starts its controller after the engine has enqueued.
        let broker = Arc::new(MemoryBroker::new(BrokerConfig::default()));
        let reg = Arc::new(RwLock::new(registry.clone()));
        let engine =
            Engine::new(broker.clone(), reg, Default::default()).map_err(|e| e.to_string())?;
        let mut ids = Vec::new();
        for &o in &order {
            let req = ExecutionRequest::new("P", ExecutionInput::Text(text(o))).priority(o.0);
            ids.push(engine.execute(req).map_err(|e| e.to_string())?);
        }
        let before = mock.request_count();
        let stop = CancellationToken::new();
        let spec = registry.controllers["C0"].clone();
        let b: Arc<dyn MessageBroker> = broker.clone();
        let worker = tokio::spawn(run_controller(spec, b, stop.clone(), fast_runtime("C0")));
        let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
        while mock.request_count() < before + 25 {
            ensure!(
                tokio::time::Instant::now() < deadline,
                "run {run}: deliveries stalled"
            );
            tokio::time::sleep(Duration::from_millis(2)).await;
        }
        stop.cancel();
        worker
            .await
            .map_err(|e| e.to_string())?
            .map_err(|e| e.to_string())?;

        let mut want: Vec<(Priority, usize)> = order
            .iter()
            .copied()
            .filter(|o| o.0 == Priority::Priority)
            .collect();
        want.extend(order.iter().copied().filter(|o| o.0 == Priority::Normal));
        let want: Vec<String> = want.into_iter().map(|o| body_hash(&text(o))).collect();
        let got: Vec<String> = mock.log()[before..]
            .iter()
            .map(|e| e.body_hash.clone())
            .collect();
        ensure!(
            got == want,
            "run {run}: delivery order differs from the model"
        );
    }
    mock.shutdown().await;
    Ok(())
}

/// Runs `count` random templates on the concurrent engine and compares each
/// result with the sequential reference interpreter, then checks the
/// happens-before constraints of every sequential block on the mock logs.
pub async fn random_workflows(count: usize, seed: u64) -> Result<(), String> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut mocks = Vec::new();
    for i in 0..6 {
        mocks.push(
            MockService::start(MockServiceConfig {
                gazetteer: word_gazetteer(i),
                ..Default::default()
            })
            .await
            .map_err(|e| e.to_string())?,
        );
    }
    let urls: Vec<String> = mocks.iter().map(MockService::url).collect();
    let h = Harness::start(word_registry(&urls), BrokerConfig::default(), fast_runtime).await;
    let input = make_context(WORD_TEXT, BASE);

    for k in 0..count {
        let wf = RandomWorkflow::generate(&mut rng);
        // Uneven latencies shake out ordering bugs.
        for m in &mocks {
            m.set_latency(Duration::from_millis(rng.random_range(0..4)));
        }
        let template_id = format!("W{k}");
        let template = parse_template(&wf.template_json(&template_id))
            .map_err(|e| format!("workflow {k}: {e}"))?;
        h.registry
            .write()
            .insert(Element::Template(template.clone()));

        let offsets: Vec<usize> = mocks.iter().map(MockService::request_count).collect();
        let id = h
            .engine
            .execute(ExecutionRequest::new(
                template_id.clone(),
                ExecutionInput::Nif(input.clone()),
            ))
            .map_err(|e| format!("workflow {k}: {e}"))?;
        let state = h
            .engine
            .wait_terminal(&id, Duration::from_secs(5))
            .await
            .map_err(|e| e.to_string())?;
        ensure!(
            state == ExecutionState::Completed,
            "workflow {k} ended {state:?}: {wf:?}"
        );
        let got = doc_of(&h.engine.get_result(&id).map_err(|e| e.to_string())?)?;
        let want = reference_interpreter(&template, &input, word_service)
            .map_err(|e| format!("workflow {k}: reference failed: {e}"))?;
        ensure!(
            got == want,
            "workflow {k}: engine and reference differ: {wf:?}"
        );

        let logs: BTreeMap<usize, Vec<_>> = mocks
            .iter()
            .enumerate()
            .map(|(i, m)| (i, m.log()[offsets[i]..].to_vec()))
            .collect();
        for i in wf.services() {
            ensure!(
                logs[&i].len() == 1,
                "workflow {k}: service {i} called {} times",
                logs[&i].len()
            );
        }
        check_happens_before(&wf, &logs).map_err(|e| format!("workflow {k}: {e}: {wf:?}"))?;
    }
    h.shutdown().await;
    for m in mocks {
        m.shutdown().await;
    }
    Ok(())
}

pub const ALICE: &str = "alice-token";
pub const BOB: &str = "bob-token";

pub fn allow(users: &[(&str, &str)]) -> Vec<cwm_core::api::AllowEntry> {
    users
        .iter()
        .map(|(u, t)| cwm_core::api::AllowEntry {
            user_id: u.to_string(),
            token: t.to_string(),
        })
        .collect()
}

/// API server on an ephemeral port with alice and bob allowlisted.
pub async fn api_server(data_dir: &std::path::Path) -> Result<cwm_core::api::ApiServer, String> {
    let mut config = cwm_core::api::ServerConfig::new(data_dir);
    config.listen = "127.0.0.1:0".into();
    config.allowlist = allow(&[("alice", ALICE), ("bob", BOB)]);
    config.controllers.defaults = fast_runtime("");
    cwm_core::api::ApiServer::start(config)
        .await
        .map_err(|e| e.to_string())
}

async fn wait_state(api: &http::Api, id: &str, want: &str) -> Result<Value, String> {
    let deadline = tokio::time::Instant::now() + Duration::from_secs(3);
    loop {
        let r = api.get(&format!("/executions/{id}/status"), ALICE).await;
        ensure!(r.status == 200, "status endpoint answered {}", r.status);
        let body = r.json();
        if body["state"] == want {
            return Ok(body);
        }
        ensure!(
            tokio::time::Instant::now() < deadline,
            "execution stuck in {} waiting for {want}",
            body["state"]
        );
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

/// Exercises all twelve endpoints plus the authentication and validation
/// rules over HTTP.
pub async fn api_contract() -> Result<(), String> {
    use http::Method;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ner = MockService::start(ner_mock())
        .await
        .map_err(|e| e.to_string())?;
    let geo = MockService::start(geo_mock())
        .await
        .map_err(|e| e.to_string())?;
    let server = api_server(dir.path()).await?;
    let api = http::Api::new(&server.url());

    // 12. Health is anonymous.
    let r = api.call(Method::GET, "/health", None, None).await;
    ensure!(r.status == 200, "GET /health: {}", r.status);

    // Every other endpoint wants a token.
    let json_body = || Some(("application/json", b"{}".to_vec()));
    let anonymous = [
        (Method::POST, "/admin/init", None),
        (Method::POST, "/admin/stop", None),
        (Method::GET, "/elements/controllers", None),
        (Method::GET, "/elements/controllers/NERController", None),
        (Method::POST, "/elements/controllers", json_body()),
        (
            Method::PUT,
            "/elements/controllers/NERController",
            json_body(),
        ),
        (Method::DELETE, "/elements/controllers/NERController", None),
        (Method::POST, "/executions", json_body()),
        (Method::GET, "/executions/x/status", None),
        (Method::GET, "/executions/x/result", None),
        (Method::POST, "/executions/x/cancel", None),
    ];
    for (method, path, body) in anonymous.iter().cloned() {
        let label = format!("{method} {path}");
        let r = api.call(method.clone(), path, None, body.clone()).await;
        ensure!(r.status == 401, "{label} without token: {}", r.status);
        ensure!(
            r.header("www-authenticate") == Some("Bearer"),
            "{label}: no challenge"
        );
        let r = api.call(method, path, Some("wrong"), body).await;
        ensure!(r.status == 401, "{label} with unknown token: {}", r.status);
    }

    // 5. Create, with validation on ingest.
    let ner_json = pointed("ner_controller.json", &ner.url());
    let r = api
        .post_json("/elements/controllers", Some(ALICE), &ner_json)
        .await;
    ensure!(
        r.status == 201,
        "create controller: {} {}",
        r.status,
        r.text()
    );
    ensure!(
        r.json()["id"] == "NERController",
        "created id {}",
        r.json()["id"]
    );
    ensure!(
        r.header("location") == Some("/elements/controllers/NERController"),
        "Location {:?}",
        r.header("location")
    );
    let r = api
        .post_json("/elements/controllers", Some(ALICE), &ner_json)
        .await;
    ensure!(r.status == 409, "duplicate create: {}", r.status);

    let broken = ner_json
        .replace("\"restapi\"", "\"soap\"")
        .replace("NERController", "Bad");
    let r = api
        .post_json("/elements/controllers", Some(ALICE), &broken)
        .await;
    ensure!(r.status == 400, "invalid controller: {}", r.status);
    let report = r.json();
    let findings = report["findings"].as_array().cloned().unwrap_or_default();
    ensure!(
        findings
            .iter()
            .any(|f| f["severity"] == "error" && f["path"].is_string()),
        "400 body is not a validation report: {report}"
    );
    let r = api.get("/elements/controllers/Bad", ALICE).await;
    ensure!(r.status == 404, "invalid element was stored: {}", r.status);

    let r = api
        .post_json(
            "/elements/tasks",
            Some(ALICE),
            &fixture("ml_glk_template.json"),
        )
        .await;
    ensure!(r.status == 400, "template posted as task: {}", r.status);
    // A task whose controller is missing is rejected.
    let r = api
        .post_json("/elements/tasks", Some(ALICE), &fixture("geo_task.json"))
        .await;
    ensure!(r.status == 400, "dangling task: {}", r.status);

    for (kind, body) in [
        ("controllers", pointed("geo_controller.json", &geo.url())),
        ("tasks", fixture("ner_task.json")),
        ("tasks", fixture("geo_task.json")),
        ("templates", fixture("ml_glk_template.json")),
    ] {
        let r = api
            .post_json(&format!("/elements/{kind}"), Some(BOB), &body)
            .await;
        ensure!(r.status == 201, "create {kind}: {} {}", r.status, r.text());
    }

    // 3 and 4. List and view.
    let r = api.get("/elements/controllers", ALICE).await;
    let ids: Vec<String> = r
        .json()
        .as_array()
        .map(|a| {
            a.iter()
                .map(|c| c["controllerId"].as_str().unwrap_or("").to_string())
                .collect()
        })
        .unwrap_or_default();
    ensure!(
        r.status == 200 && ids == ["GEOController", "NERController"],
        "list controllers: {} {ids:?}",
        r.status
    );
    let r = api.get("/elements/templates/ML_GLK", ALICE).await;
    ensure!(
        r.status == 200 && r.json()["workflowTemplateId"] == "ML_GLK",
        "view template: {}",
        r.status
    );
    let r = api.get("/elements/widgets", ALICE).await;
    ensure!(r.status == 404, "unknown kind: {}", r.status);

    // 6. Modify; the id in the path must match the body.
    let r = api
        .put_json(
            "/elements/controllers/NERController",
            ALICE,
            &ner_json.replace("NER Controller", "Renamed"),
        )
        .await;
    ensure!(
        r.status == 200,
        "modify controller: {} {}",
        r.status,
        r.text()
    );
    let r = api
        .put_json("/elements/controllers/GEOController", ALICE, &ner_json)
        .await;
    ensure!(r.status == 400, "mismatched id: {}", r.status);
    let r = api
        .put_json(
            "/elements/controllers/NERController",
            ALICE,
            &broken.replace("Bad", "NERController"),
        )
        .await;
    ensure!(r.status == 400, "invalid modification: {}", r.status);
    let r = api.get("/elements/controllers/NERController", ALICE).await;
    ensure!(
        r.json()["controllerName"] == "Renamed",
        "rejected modification changed state"
    );

    // 7. Delete is refused while other elements depend on the target.
    let r = api.delete("/elements/tasks/NERTask", Some(ALICE)).await;
    ensure!(r.status == 409, "delete referenced task: {}", r.status);
    ensure!(r.json()["dependents"].is_array(), "409 without dependents");

    // 1. Init starts both controllers.
    let r = api
        .call(Method::POST, "/admin/init", Some(ALICE), None)
        .await;
    ensure!(r.status == 200, "init: {}", r.status);
    ensure!(
        r.json()["controllers"] == serde_json::json!(["GEOController", "NERController"]),
        "init started {}",
        r.json()["controllers"]
    );

    // 8, 9 and 10. Full lifecycle.
    let body = serde_json::json!({ "templateId": "ML_GLK", "input": TEXT }).to_string();
    let r = api.post_json("/executions", Some(ALICE), &body).await;
    ensure!(r.status == 201, "execute: {} {}", r.status, r.text());
    let id = r.json()["executionId"]
        .as_str()
        .unwrap_or_default()
        .to_string();
    wait_state(&api, &id, "COMPLETED").await?;
    let r = api.get(&format!("/executions/{id}/result"), ALICE).await;
    ensure!(r.status == 200, "result: {}", r.status);
    ensure!(
        r.header("content-type") == Some("text/turtle"),
        "result type"
    );
    let doc = doc_of(&r.body)?;
    ensure!(
        doc == golden_result(),
        "result differs from the reference document"
    );

    let r = api
        .call(
            Method::POST,
            "/executions?templateId=ML_GLK&priority=priority",
            Some(ALICE),
            Some((
                "text/turtle",
                cwm_core::nif::serialize_nif(&make_context(TEXT, BASE)).into_bytes(),
            )),
        )
        .await;
    ensure!(
        r.status == 201,
        "execute with turtle body: {} {}",
        r.status,
        r.text()
    );
    let r = api
        .call(
            Method::POST,
            "/executions",
            Some(ALICE),
            Some(("application/xml", b"<x/>".to_vec())),
        )
        .await;
    ensure!(r.status == 415, "unsupported input type: {}", r.status);
    let r = api
        .post_json(
            "/executions",
            Some(ALICE),
            r#"{"templateId":"Nope","input":"x"}"#,
        )
        .await;
    ensure!(r.status == 404, "unknown template: {}", r.status);

    // While NER is held the execution runs: result is 409, the template is
    // locked, cancel works once.
    ner.pause();
    let r = api.post_json("/executions", Some(ALICE), &body).await;
    let running = r.json()["executionId"]
        .as_str()
        .unwrap_or_default()
        .to_string();
    wait_state(&api, &running, "RUNNING").await?;
    let r = api
        .get(&format!("/executions/{running}/result"), ALICE)
        .await;
    ensure!(r.status == 409, "result while running: {}", r.status);
    let r = api.delete("/elements/templates/ML_GLK", Some(ALICE)).await;
    ensure!(r.status == 409, "delete template in use: {}", r.status);
    let r = api
        .put_json(
            "/elements/templates/ML_GLK",
            ALICE,
            &fixture("ml_glk_template.json"),
        )
        .await;
    ensure!(r.status == 409, "modify template in use: {}", r.status);
    // 11. Cancel.
    let r = api
        .call(
            Method::POST,
            &format!("/executions/{running}/cancel"),
            Some(ALICE),
            None,
        )
        .await;
    ensure!(
        r.status == 200 && r.json()["state"] == "CANCELLED",
        "cancel: {}",
        r.status
    );
    let r = api
        .call(
            Method::POST,
            &format!("/executions/{running}/cancel"),
            Some(ALICE),
            None,
        )
        .await;
    ensure!(r.status == 409, "second cancel: {}", r.status);
    ner.resume();

    let r = api.get("/elements/executions", ALICE).await;
    ensure!(
        r.status == 200 && r.json().as_array().map(Vec::len) == Some(3),
        "list executions: {} {}",
        r.status,
        r.text()
    );
    let r = api.get(&format!("/elements/executions/{id}"), ALICE).await;
    ensure!(
        r.status == 200 && r.json()["state"] == "COMPLETED",
        "view execution"
    );
    let r = api
        .delete(&format!("/elements/executions/{id}"), Some(ALICE))
        .await;
    ensure!(r.status == 405, "delete execution: {}", r.status);
    let r = api.get("/executions/missing/status", ALICE).await;
    ensure!(r.status == 404, "unknown execution: {}", r.status);

    // Deleting in dependency order succeeds.
    let r = api.delete("/elements/templates/ML_GLK", Some(ALICE)).await;
    ensure!(r.status == 204, "delete template: {}", r.status);
    let r = api.get("/elements/templates/ML_GLK", ALICE).await;
    ensure!(
        r.status == 404,
        "deleted template still visible: {}",
        r.status
    );

    // 2. Stop.
    let r = api
        .call(Method::POST, "/admin/stop", Some(ALICE), None)
        .await;
    ensure!(
        r.status == 200 && r.json()["stopped"] == 2,
        "stop: {} {}",
        r.status,
        r.text()
    );

    // Removing bob from the allowlist turns his token into 403.
    server
        .state()
        .authenticator()
        .reload(&allow(&[("alice", ALICE)]));
    let r = api
        .post_json(
            "/elements/templates",
            Some(BOB),
            &fixture("ml_glk_template.json"),
        )
        .await;
    ensure!(r.status == 403, "removed user: {}", r.status);
    let r = api.get("/elements/controllers", BOB).await;
    ensure!(r.status == 403, "removed user read: {}", r.status);
    let r = api.get("/elements/controllers", ALICE).await;
    ensure!(r.status == 200, "remaining user: {}", r.status);

    server.shutdown().await;
    ner.shutdown().await;
    geo.shutdown().await;
    Ok(())
}
