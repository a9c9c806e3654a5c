//! Proxy between the broker and one REST service.
//!
//! A controller consumes envelopes from its queue pair (priority first),
//! turns each into an HTTP request according to its [`ConnectionSpec`],
//! and publishes the service's answer to the envelope's reply queue with the
//! same correlation ids. Failures are retried through the broker; the final
//! failed attempt produces an `application/problem+json` reply.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use percent_encoding::{utf8_percent_encode, AsciiSet, CONTROLS};
use reqwest::header::{HeaderName, HeaderValue, CONTENT_TYPE, LOCATION};
use serde::{Deserialize, Serialize};
use tokio_util::sync::CancellationToken;
use tracing::{debug, warn};

use crate::broker::{
    duration_ms, BrokerError, Delivery, Envelope, MessageBroker, ProblemDetails, PROBLEM_JSON,
};
use crate::cwdl::{fill_placeholders, ConnectionSpec, ControllerSpec, HttpMethod};

/// Characters escaped in query components. `;` is left alone so
/// multi-valued defaults such as `model_1;model_2` pass through verbatim.
const QUERY: &AsciiSet = &CONTROLS
    .add(b' ')
    .add(b'"')
    .add(b'#')
    .add(b'%')
    .add(b'&')
    .add(b'+')
    .add(b'<')
    .add(b'=')
    .add(b'>')
    .add(b'?')
    .add(b'`')
    .add(b'{')
    .add(b'}');

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ControllerError {
    #[error("required parameter {0:?} is not bound")]
    MissingParameter(String),
    #[error("envelope content type {found:?} does not match expected {expected:?}")]
    ContentTypeMismatch { expected: String, found: String },
    #[error("invalid request URL: {0}")]
    InvalidUrl(String),
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("service answered {status}")]
    Service { status: u16, body: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl ControllerError {
    /// Errors that a retry cannot fix.
    pub fn is_permanent(&self) -> bool {
        matches!(
            self,
            ControllerError::MissingParameter(_)
                | ControllerError::ContentTypeMismatch { .. }
                | ControllerError::InvalidUrl(_)
        )
    }

    fn status(&self) -> Option<u16> {
        match self {
            ControllerError::Service { status, .. } => Some(*status),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestDescription {
    pub method: HttpMethod,
    pub url: String,
    pub headers: BTreeMap<String, String>,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceResponse {
    pub status: u16,
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PollPolicy {
    #[serde(with = "duration_ms", rename = "intervalMs")]
    interval: Duration,
    #[serde(with = "duration_ms", rename = "maxWaitMs")]
    max_wait: Duration,
}

impl PollPolicy {
    pub fn new(interval: Duration, max_wait: Duration) -> Result<Self, String> {
        if interval.is_zero() {
            return Err("poll interval must be positive".into());
        }
        if max_wait < interval {
            return Err("maxWait must be at least the poll interval".into());
        }
        Ok(PollPolicy { interval, max_wait })
    }

    pub fn interval(&self) -> Duration {
        self.interval
    }

    pub fn max_wait(&self) -> Duration {
        self.max_wait
    }
}

impl Default for PollPolicy {
    fn default() -> Self {
        PollPolicy {
            interval: Duration::from_millis(100),
            max_wait: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutionMode {
    /// Wait for the response; a `202` with `Location` falls back to polling.
    #[default]
    Sync,
    /// Expect `202` + `Location` and poll; a direct `200` is accepted too.
    Async,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ControllerRuntimeConfig {
    pub mode: ExecutionMode,
    #[serde(with = "duration_ms", rename = "requestTimeoutMs")]
    pub request_timeout: Duration,
    pub poll: PollPolicy,
    /// How long one broker wait lasts before the stop signal is re-checked.
    #[serde(with = "duration_ms", rename = "idleWaitMs")]
    pub idle_wait: Duration,
}

impl Default for ControllerRuntimeConfig {
    fn default() -> Self {
        ControllerRuntimeConfig {
            mode: ExecutionMode::Sync,
            request_timeout: Duration::from_secs(30),
            poll: PollPolicy::default(),
            idle_wait: Duration::from_millis(200),
        }
    }
}

fn media_type(ct: &str) -> &str {
    ct.split(';').next().unwrap_or("").trim()
}

/// Binds the connection's parameters and headers (override, then default)
/// and substitutes the payload into the body slot.
pub fn build_request(
    spec: &ConnectionSpec,
    env: &Envelope,
) -> Result<RequestDescription, ControllerError> {
    if let Some(expected) = spec.declared_content_type() {
        if !media_type(expected).eq_ignore_ascii_case(media_type(&env.content_type)) {
            return Err(ControllerError::ContentTypeMismatch {
                expected: expected.to_string(),
                found: env.content_type.clone(),
            });
        }
    }

    let overrides = &env.param_overrides;
    let mut url = fill_placeholders(&spec.endpoint_url, |n| overrides.get(n).map(String::as_str))
        .map_err(ControllerError::MissingParameter)?;
    let parsed = url::Url::parse(&url).map_err(|e| ControllerError::InvalidUrl(e.to_string()))?;
    if !matches!(parsed.scheme(), "http" | "https") || !parsed.has_host() {
        return Err(ControllerError::InvalidUrl(url));
    }

    let bind = |name: &str, default: &Option<String>, required: bool| match overrides
        .get(name)
        .or(default.as_ref())
    {
        Some(v) => Ok(Some(v.clone())),
        None if required => Err(ControllerError::MissingParameter(name.to_string())),
        None => Ok(None),
    };

    let mut query = Vec::new();
    for p in &spec.parameters {
        if let Some(v) = bind(&p.name, &p.default_value, p.required)? {
            query.push(format!(
                "{}={}",
                utf8_percent_encode(&p.name, QUERY),
                utf8_percent_encode(&v, QUERY)
            ));
        }
    }
    if !query.is_empty() {
        url.push(if url.contains('?') { '&' } else { '?' });
        url.push_str(&query.join("&"));
    }

    let mut headers = BTreeMap::new();
    for h in &spec.headers {
        if let Some(v) = bind(&h.name, &h.default_value, h.required)? {
            headers.insert(h.name.clone(), v);
        }
    }

    let body = match &spec.body_content_slot {
        Some(_) => env.payload.clone(),
        None => Vec::new(),
    };
    Ok(RequestDescription {
        method: spec.method,
        url,
        headers,
        body,
    })
}

/// HTTP client for service calls. Proxies from the environment are ignored:
/// services live next to the workflow manager.
pub fn http_client() -> reqwest::Client {
    reqwest::Client::builder()
        .no_proxy()
        .build()
        .expect("static client configuration")
}

fn classify(err: reqwest::Error) -> ControllerError {
    if err.is_timeout() {
        ControllerError::Timeout
    } else if err.is_builder() {
        ControllerError::InvalidUrl(err.to_string())
    } else {
        ControllerError::Connect(err.to_string())
    }
}

fn to_reqwest_method(m: HttpMethod) -> reqwest::Method {
    match m {
        HttpMethod::Get => reqwest::Method::GET,
        HttpMethod::Post => reqwest::Method::POST,
        HttpMethod::Put => reqwest::Method::PUT,
        HttpMethod::Delete => reqwest::Method::DELETE,
        HttpMethod::Patch => reqwest::Method::PATCH,
    }
}

async fn read_response(resp: reqwest::Response) -> Result<ServiceResponse, ControllerError> {
    let status = resp.status().as_u16();
    let content_type = resp
        .headers()
        .get(CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    let body = resp.bytes().await.map_err(classify)?.to_vec();
    if !(200..300).contains(&status) {
        return Err(ControllerError::Service {
            status,
            body: String::from_utf8_lossy(&body).into_owned(),
        });
    }
    Ok(ServiceResponse {
        status,
        content_type,
        body,
    })
}

async fn send(
    client: &reqwest::Client,
    req: &RequestDescription,
    timeout: Duration,
) -> Result<(reqwest::Response, Option<String>), ControllerError> {
    let mut builder = client
        .request(to_reqwest_method(req.method), &req.url)
        .timeout(timeout)
        .body(req.body.clone());
    for (k, v) in &req.headers {
        let name = HeaderName::from_bytes(k.as_bytes())
            .map_err(|e| ControllerError::Protocol(format!("header {k:?}: {e}")))?;
        let value = HeaderValue::from_str(v)
            .map_err(|e| ControllerError::Protocol(format!("header {k:?}: {e}")))?;
        builder = builder.header(name, value);
    }
    let resp = builder.send().await.map_err(classify)?;
    let location = resp
        .headers()
        .get(LOCATION)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    Ok((resp, location))
}

/// Sends the request and waits for the answer. Any 2xx (including 202) is
/// returned as is.
pub async fn execute_sync(
    client: &reqwest::Client,
    req: &RequestDescription,
    timeout: Duration,
) -> Result<ServiceResponse, ControllerError> {
    let (resp, _) = send(client, req, timeout).await?;
    read_response(resp).await
}

/// Sends the request expecting `202 Accepted` + `Location`, then polls that
/// location with GET until it answers with a final 2xx.
pub async fn execute_async(
    client: &reqwest::Client,
    req: &RequestDescription,
    policy: PollPolicy,
) -> Result<ServiceResponse, ControllerError> {
    let started = tokio::time::Instant::now();
    let (resp, location) = send(client, req, policy.max_wait).await?;
    if resp.status().as_u16() != 202 {
        return read_response(resp).await;
    }
    let location = location
        .ok_or_else(|| ControllerError::Protocol("202 Accepted without Location".into()))?;
    poll(client, &req.url, &location, policy, started).await
}

async fn poll(
    client: &reqwest::Client,
    request_url: &str,
    location: &str,
    policy: PollPolicy,
    started: tokio::time::Instant,
) -> Result<ServiceResponse, ControllerError> {
    let target = url::Url::parse(request_url)
        .and_then(|base| base.join(location))
        .map_err(|e| ControllerError::Protocol(format!("bad Location {location:?}: {e}")))?;
    let deadline = started + policy.max_wait;
    loop {
        tokio::time::sleep(policy.interval).await;
        let now = tokio::time::Instant::now();
        if now >= deadline {
            return Err(ControllerError::Timeout);
        }
        let resp = client
            .get(target.clone())
            .timeout(deadline - now)
            .send()
            .await
            .map_err(classify)?;
        if resp.status().as_u16() == 202 {
            continue;
        }
        return read_response(resp).await;
    }
}

/// One controller instance. Holds at most one request in flight.
pub struct Controller {
    spec: ControllerSpec,
    config: ControllerRuntimeConfig,
    client: reqwest::Client,
}

impl Controller {
    pub fn new(spec: ControllerSpec, config: ControllerRuntimeConfig) -> Self {
        Controller {
            spec,
            config,
            client: http_client(),
        }
    }

    pub fn spec(&self) -> &ControllerSpec {
        &self.spec
    }

    pub async fn execute(
        &self,
        req: &RequestDescription,
    ) -> Result<ServiceResponse, ControllerError> {
        match self.config.mode {
            ExecutionMode::Async => execute_async(&self.client, req, self.config.poll).await,
            ExecutionMode::Sync => {
                let started = tokio::time::Instant::now();
                let (resp, location) = send(&self.client, req, self.config.request_timeout).await?;
                match (resp.status().as_u16(), location) {
                    (202, Some(loc)) => {
                        poll(&self.client, &req.url, &loc, self.config.poll, started).await
                    }
                    _ => read_response(resp).await,
                }
            }
        }
    }

    /// Handles one delivery: call the service, reply, then ack or nack.
    pub async fn process(&self, broker: &dyn MessageBroker, delivery: Delivery) {
        let env = &delivery.envelope;
        let outcome = match build_request(&self.spec.connection, env) {
            Ok(req) => self.execute(&req).await,
            Err(e) => Err(e),
        };
        match outcome {
            Ok(resp) => {
                let ct = resp
                    .content_type
                    .unwrap_or_else(|| crate::nif::TURTLE_MEDIA_TYPE.to_string());
                self.reply_and_settle(broker, &delivery, env.reply(ct, resp.body), true);
            }
            Err(e) => {
                let last = e.is_permanent() || env.attempt + 1 >= broker.config().max_attempts;
                debug!(
                    controller = %self.spec.controller_id,
                    attempt = env.attempt,
                    error = %e,
                    "service call failed"
                );
                if last {
                    let problem = ProblemDetails {
                        title: "service call failed".into(),
                        status: e.status(),
                        detail: e.to_string(),
                        node_id: Some(env.node_id),
                        controller_id: Some(self.spec.controller_id.clone()),
                        attempts: env.attempt + 1,
                    };
                    let reply = env.reply(PROBLEM_JSON, problem.to_bytes());
                    self.reply_and_settle(broker, &delivery, reply, false);
                } else if let Err(err) = broker.nack(delivery.tag, true) {
                    warn!(error = %err, "nack failed");
                }
            }
        }
    }

    fn reply_and_settle(
        &self,
        broker: &dyn MessageBroker,
        delivery: &Delivery,
        reply: Envelope,
        success: bool,
    ) {
        let reply_queue = &delivery.envelope.reply_queue;
        match broker.publish(reply_queue, reply) {
            Ok(_) => {
                let settled = if success {
                    broker.ack(delivery.tag)
                } else {
                    broker.nack(delivery.tag, false)
                };
                if let Err(err) = settled {
                    warn!(error = %err, "could not settle delivery");
                }
            }
            Err(err) => {
                warn!(queue = %reply_queue, error = %err, "reply could not be published");
                let _ = broker.nack(delivery.tag, false);
            }
        }
    }

    /// Consumes until `stop` is cancelled. Work already in flight completes
    /// before returning.
    pub async fn run(
        &self,
        broker: Arc<dyn MessageBroker>,
        stop: CancellationToken,
    ) -> Result<(), BrokerError> {
        let pair = broker.declare_queues(&self.spec)?;
        loop {
            let delivery = tokio::select! {
                biased;
                _ = stop.cancelled() => break,
                d = broker.wait_next(&pair, self.config.idle_wait) => d,
            };
            if let Some(d) = delivery {
                self.process(broker.as_ref(), d).await;
            }
        }
        Ok(())
    }
}

pub async fn run_controller(
    spec: ControllerSpec,
    broker: Arc<dyn MessageBroker>,
    stop: CancellationToken,
    config: ControllerRuntimeConfig,
) -> Result<(), BrokerError> {
    Controller::new(spec, config).run(broker, stop).await
}
