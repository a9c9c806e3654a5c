//! Message passing between the engine and controllers.
//!
//! Every controller owns two queues, one for normal and one for priority
//! traffic. Consumers always drain the priority queue first and see FIFO
//! order within each queue. Deliveries stay invisible to other consumers
//! until acked, nacked, or their visibility timeout elapses. A message that
//! reaches `max_attempts` deliveries is moved to `<queue>.dlq`.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;

use crate::cwdl::{ControllerSpec, NodeId};

pub const PROBLEM_JSON: &str = "application/problem+json";
pub const DEAD_LETTER_SUFFIX: &str = ".dlq";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Priority {
    #[default]
    Normal,
    Priority,
}

impl std::str::FromStr for Priority {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(Priority::Normal),
            "priority" => Ok(Priority::Priority),
            other => Err(format!("unknown priority {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Envelope {
    pub message_id: String,
    pub execution_id: String,
    pub node_id: NodeId,
    pub reply_queue: String,
    pub priority: Priority,
    pub content_type: String,
    pub payload: Vec<u8>,
    pub attempt: u32,
    #[serde(default)]
    pub param_overrides: BTreeMap<String, String>,
}

impl Envelope {
    pub fn new(
        execution_id: impl Into<String>,
        node_id: NodeId,
        reply_queue: impl Into<String>,
        priority: Priority,
        content_type: impl Into<String>,
        payload: impl Into<Vec<u8>>,
    ) -> Self {
        Envelope {
            message_id: uuid::Uuid::new_v4().to_string(),
            execution_id: execution_id.into(),
            node_id,
            reply_queue: reply_queue.into(),
            priority,
            content_type: content_type.into(),
            payload: payload.into(),
            attempt: 0,
            param_overrides: BTreeMap::new(),
        }
    }

    pub fn with_overrides(mut self, overrides: BTreeMap<String, String>) -> Self {
        self.param_overrides = overrides;
        self
    }

    /// A reply carrying the same correlation ids and priority.
    pub fn reply(&self, content_type: impl Into<String>, payload: impl Into<Vec<u8>>) -> Envelope {
        Envelope {
            message_id: uuid::Uuid::new_v4().to_string(),
            execution_id: self.execution_id.clone(),
            node_id: self.node_id,
            reply_queue: String::new(),
            priority: self.priority,
            content_type: content_type.into(),
            payload: payload.into(),
            attempt: 0,
            param_overrides: BTreeMap::new(),
        }
    }

    pub fn is_problem(&self) -> bool {
        self.content_type.starts_with(PROBLEM_JSON)
    }
}

/// Structured failure carried by `application/problem+json` envelopes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProblemDetails {
    pub title: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    pub detail: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_id: Option<NodeId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub controller_id: Option<String>,
    #[serde(default)]
    pub attempts: u32,
}

impl ProblemDetails {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueuePair {
    pub normal: String,
    pub priority: String,
}

impl QueuePair {
    pub fn for_priority(&self, priority: Priority) -> &str {
        match priority {
            Priority::Normal => &self.normal,
            Priority::Priority => &self.priority,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DeliveryTag(pub u64);

impl fmt::Display for DeliveryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone)]
pub struct Delivery {
    pub tag: DeliveryTag,
    pub queue: String,
    pub envelope: Envelope,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublishAck {
    pub queue: String,
    /// Zero-based position from the head at the time of enqueue.
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BrokerError {
    #[error("unknown queue {0:?}")]
    UnknownQueue(String),
    #[error("{priority:?} message cannot be published on {role} queue {queue:?}")]
    PriorityMismatch {
        queue: String,
        role: &'static str,
        priority: Priority,
    },
    #[error("queue {queue:?} already belongs to {owner}")]
    Conflict { queue: String, owner: String },
    #[error("unknown delivery tag {0}")]
    UnknownTag(DeliveryTag),
    #[error("payload of {size} bytes exceeds the {limit} byte limit")]
    PayloadTooLarge { size: usize, limit: usize },
    #[error("queue {0:?} is managed by the broker")]
    ReservedQueue(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct BrokerConfig {
    #[serde(with = "duration_ms", rename = "visibilityTimeoutMs")]
    pub visibility_timeout: Duration,
    pub max_attempts: u32,
    pub max_payload_bytes: usize,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            visibility_timeout: Duration::from_secs(5),
            max_attempts: 3,
            max_payload_bytes: 64 * 1024 * 1024,
        }
    }
}

pub(crate) mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

/// Monotonic time source, replaceable in tests.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock {
            origin: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

#[derive(Default)]
pub struct ManualClock {
    now: Mutex<Duration>,
}

impl ManualClock {
    pub fn advance(&self, by: Duration) {
        *self.now.lock() += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        *self.now.lock()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct QueueStats {
    pub published: u64,
    pub delivered: u64,
    pub acked: u64,
    pub requeued: u64,
    pub dead_lettered: u64,
    pub depth: usize,
    pub unacked: usize,
}

/// Broker seam. The in-memory [`MemoryBroker`] is the reference
/// implementation; an adapter for an external broker would implement the
/// same contract.
#[async_trait]
pub trait MessageBroker: Send + Sync {
    fn config(&self) -> &BrokerConfig;

    /// Declares the controller's queue pair (and their dead-letter queues).
    /// Idempotent for the same controller.
    fn declare_queues(&self, spec: &ControllerSpec) -> Result<QueuePair, BrokerError>;

    /// Declares a queue that accepts either priority, such as a reply queue.
    fn declare_queue(&self, name: &str) -> Result<(), BrokerError>;

    fn publish(&self, queue: &str, env: Envelope) -> Result<PublishAck, BrokerError>;

    /// Head of the priority queue if non-empty, else head of the normal queue.
    fn consume_next(&self, pair: &QueuePair) -> Option<Delivery>;

    /// Head of a single queue.
    fn consume(&self, queue: &str) -> Option<Delivery>;

    fn ack(&self, tag: DeliveryTag) -> Result<(), BrokerError>;

    fn nack(&self, tag: DeliveryTag, requeue: bool) -> Result<(), BrokerError>;

    /// Waits up to `timeout` for a delivery from the pair.
    async fn wait_next(&self, pair: &QueuePair, timeout: Duration) -> Option<Delivery>;

    /// Waits up to `timeout` for a delivery from one queue.
    async fn wait(&self, queue: &str, timeout: Duration) -> Option<Delivery>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum QueueRole {
    Normal,
    Priority,
    Open,
    DeadLetter,
}

impl QueueRole {
    fn name(self) -> &'static str {
        match self {
            QueueRole::Normal => "normal",
            QueueRole::Priority => "priority",
            QueueRole::Open => "open",
            QueueRole::DeadLetter => "dead-letter",
        }
    }
}

struct QueueState {
    role: QueueRole,
    owner: Option<String>,
    messages: VecDeque<Envelope>,
    stats: QueueStats,
}

impl QueueState {
    fn new(role: QueueRole, owner: Option<String>) -> Self {
        QueueState {
            role,
            owner,
            messages: VecDeque::new(),
            stats: QueueStats::default(),
        }
    }
}

struct Unacked {
    queue: String,
    envelope: Envelope,
    deadline: Duration,
}

#[derive(Default)]
struct State {
    queues: HashMap<String, QueueState>,
    unacked: HashMap<DeliveryTag, Unacked>,
    next_tag: u64,
}

/// In-memory broker. All operations take one lock, so each is linearizable.
pub struct MemoryBroker {
    config: BrokerConfig,
    clock: Arc<dyn Clock>,
    state: Mutex<State>,
    notify: Notify,
}

/// Upper bound on how long a waiter sleeps before re-checking visibility
/// deadlines.
const WAIT_TICK: Duration = Duration::from_millis(50);

impl MemoryBroker {
    pub fn new(config: BrokerConfig) -> Self {
        Self::with_clock(config, Arc::new(SystemClock::default()))
    }

    pub fn with_clock(config: BrokerConfig, clock: Arc<dyn Clock>) -> Self {
        MemoryBroker {
            config,
            clock,
            state: Mutex::new(State::default()),
            notify: Notify::new(),
        }
    }

    pub fn stats(&self, queue: &str) -> Option<QueueStats> {
        let st = self.state.lock();
        let q = st.queues.get(queue)?;
        let mut stats = q.stats;
        stats.depth = q.messages.len();
        stats.unacked = st.unacked.values().filter(|u| u.queue == queue).count();
        Some(stats)
    }

    /// Queued (not in-flight) messages of a queue, head first.
    pub fn snapshot(&self, queue: &str) -> Vec<Envelope> {
        self.state
            .lock()
            .queues
            .get(queue)
            .map(|q| q.messages.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn queue_names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.state.lock().queues.keys().cloned().collect();
        names.sort();
        names
    }

    /// Moves every delivery whose visibility deadline has passed back to the
    /// head of its queue, or to its dead-letter queue when out of attempts.
    pub fn reap_expired(&self) -> usize {
        let now = self.clock.now();
        let mut st = self.state.lock();
        let mut expired: Vec<DeliveryTag> = st
            .unacked
            .iter()
            .filter(|(_, u)| u.deadline <= now)
            .map(|(t, _)| *t)
            .collect();
        if expired.is_empty() {
            return 0;
        }
        // Requeue newest first so the oldest ends up at the head.
        expired.sort_by(|a, b| b.cmp(a));
        for tag in &expired {
            if let Some(u) = st.unacked.remove(tag) {
                self.redeliver(&mut st, u);
            }
        }
        drop(st);
        self.notify.notify_waiters();
        expired.len()
    }

    fn redeliver(&self, st: &mut State, u: Unacked) {
        let Unacked {
            queue,
            mut envelope,
            ..
        } = u;
        envelope.attempt += 1;
        if envelope.attempt >= self.config.max_attempts {
            self.dead_letter(st, &queue, envelope, true);
        } else if let Some(q) = st.queues.get_mut(&queue) {
            q.stats.requeued += 1;
            q.messages.push_front(envelope);
        }
    }

    fn dead_letter(&self, st: &mut State, queue: &str, envelope: Envelope, notify_reply: bool) {
        if notify_reply && !envelope.reply_queue.is_empty() {
            if let Some(rq) = st.queues.get_mut(&envelope.reply_queue) {
                let problem = ProblemDetails {
                    title: "delivery attempts exhausted".into(),
                    status: None,
                    detail: format!(
                        "message {} on {queue:?} was not processed after {} deliveries",
                        envelope.message_id, envelope.attempt
                    ),
                    node_id: Some(envelope.node_id),
                    controller_id: None,
                    attempts: envelope.attempt,
                };
                let notice = envelope.reply(PROBLEM_JSON, problem.to_bytes());
                rq.stats.published += 1;
                rq.messages.push_back(notice);
            }
        }
        if let Some(q) = st.queues.get_mut(queue) {
            q.stats.dead_lettered += 1;
        }
        let dlq = format!("{queue}{DEAD_LETTER_SUFFIX}");
        st.queues
            .entry(dlq)
            .or_insert_with(|| QueueState::new(QueueRole::DeadLetter, None))
            .messages
            .push_back(envelope);
    }

    fn take(&self, st: &mut State, queue: &str) -> Option<Delivery> {
        let q = st.queues.get_mut(queue)?;
        let envelope = q.messages.pop_front()?;
        q.stats.delivered += 1;
        st.next_tag += 1;
        let tag = DeliveryTag(st.next_tag);
        st.unacked.insert(
            tag,
            Unacked {
                queue: queue.to_string(),
                envelope: envelope.clone(),
                deadline: self.clock.now() + self.config.visibility_timeout,
            },
        );
        Some(Delivery {
            tag,
            queue: queue.to_string(),
            envelope,
        })
    }

    async fn wait_with<F>(&self, timeout: Duration, mut attempt: F) -> Option<Delivery>
    where
        F: FnMut() -> Option<Delivery> + Send,
    {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let notified = self.notify.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            if let Some(d) = attempt() {
                return Some(d);
            }
            let now = tokio::time::Instant::now();
            if now >= deadline {
                return None;
            }
            let wake = deadline.min(now + WAIT_TICK);
            tokio::select! {
                _ = notified => {}
                _ = tokio::time::sleep_until(wake) => {}
            }
        }
    }
}

#[async_trait]
impl MessageBroker for MemoryBroker {
    fn config(&self) -> &BrokerConfig {
        &self.config
    }

    fn declare_queues(&self, spec: &ControllerSpec) -> Result<QueuePair, BrokerError> {
        let pair = QueuePair {
            normal: spec.queues.normal.clone(),
            priority: spec.queues.priority.clone(),
        };
        let owner = &spec.controller_id;
        let mut st = self.state.lock();
        for name in [&pair.normal, &pair.priority] {
            if let Some(q) = st.queues.get(name) {
                if q.owner.as_ref() != Some(owner) {
                    return Err(BrokerError::Conflict {
                        queue: name.clone(),
                        owner: q
                            .owner
                            .clone()
                            .unwrap_or_else(|| format!("a {} queue", q.role.name())),
                    });
                }
            }
        }
        for (name, role) in [
            (&pair.normal, QueueRole::Normal),
            (&pair.priority, QueueRole::Priority),
        ] {
            st.queues
                .entry(name.clone())
                .or_insert_with(|| QueueState::new(role, Some(owner.clone())));
            st.queues
                .entry(format!("{name}{DEAD_LETTER_SUFFIX}"))
                .or_insert_with(|| QueueState::new(QueueRole::DeadLetter, None));
        }
        Ok(pair)
    }

    fn declare_queue(&self, name: &str) -> Result<(), BrokerError> {
        let mut st = self.state.lock();
        match st.queues.get(name) {
            Some(q) if q.role == QueueRole::Open => Ok(()),
            Some(q) => Err(BrokerError::Conflict {
                queue: name.to_string(),
                owner: q
                    .owner
                    .clone()
                    .unwrap_or_else(|| format!("a {} queue", q.role.name())),
            }),
            None => {
                st.queues
                    .insert(name.to_string(), QueueState::new(QueueRole::Open, None));
                st.queues
                    .entry(format!("{name}{DEAD_LETTER_SUFFIX}"))
                    .or_insert_with(|| QueueState::new(QueueRole::DeadLetter, None));
                Ok(())
            }
        }
    }

    fn publish(&self, queue: &str, env: Envelope) -> Result<PublishAck, BrokerError> {
        if env.payload.len() > self.config.max_payload_bytes {
            return Err(BrokerError::PayloadTooLarge {
                size: env.payload.len(),
                limit: self.config.max_payload_bytes,
            });
        }
        let mut st = self.state.lock();
        let q = st
            .queues
            .get_mut(queue)
            .ok_or_else(|| BrokerError::UnknownQueue(queue.to_string()))?;
        let ok = match q.role {
            QueueRole::Normal => env.priority == Priority::Normal,
            QueueRole::Priority => env.priority == Priority::Priority,
            QueueRole::Open => true,
            QueueRole::DeadLetter => return Err(BrokerError::ReservedQueue(queue.to_string())),
        };
        if !ok {
            return Err(BrokerError::PriorityMismatch {
                queue: queue.to_string(),
                role: q.role.name(),
                priority: env.priority,
            });
        }
        q.messages.push_back(env);
        q.stats.published += 1;
        let position = q.messages.len() - 1;
        drop(st);
        self.notify.notify_waiters();
        Ok(PublishAck {
            queue: queue.to_string(),
            position,
        })
    }

    fn consume_next(&self, pair: &QueuePair) -> Option<Delivery> {
        self.reap_expired();
        let mut st = self.state.lock();
        self.take(&mut st, &pair.priority)
            .or_else(|| self.take(&mut st, &pair.normal))
    }

    fn consume(&self, queue: &str) -> Option<Delivery> {
        self.reap_expired();
        let mut st = self.state.lock();
        self.take(&mut st, queue)
    }

    fn ack(&self, tag: DeliveryTag) -> Result<(), BrokerError> {
        let mut st = self.state.lock();
        let u = st
            .unacked
            .remove(&tag)
            .ok_or(BrokerError::UnknownTag(tag))?;
        if let Some(q) = st.queues.get_mut(&u.queue) {
            q.stats.acked += 1;
        }
        Ok(())
    }

    fn nack(&self, tag: DeliveryTag, requeue: bool) -> Result<(), BrokerError> {
        let mut st = self.state.lock();
        let u = st
            .unacked
            .remove(&tag)
            .ok_or(BrokerError::UnknownTag(tag))?;
        if requeue {
            self.redeliver(&mut st, u);
        } else {
            self.dead_letter(&mut st, &u.queue, u.envelope, false);
        }
        drop(st);
        self.notify.notify_waiters();
        Ok(())
    }

    async fn wait_next(&self, pair: &QueuePair, timeout: Duration) -> Option<Delivery> {
        self.wait_with(timeout, || self.consume_next(pair)).await
    }

    async fn wait(&self, queue: &str, timeout: Duration) -> Option<Delivery> {
        self.wait_with(timeout, || self.consume(queue)).await
    }
}
