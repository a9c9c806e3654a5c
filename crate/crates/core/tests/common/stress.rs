//! Randomized concurrent publish/consume/ack/nack load on one queue pair.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use cwm_core::broker::{
    BrokerConfig, Delivery, Envelope, MemoryBroker, MessageBroker, Priority, QueuePair,
};
use cwm_core::cwdl::{parse_controller, ControllerSpec, NodeId};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};

pub fn controller() -> ControllerSpec {
    parse_controller(
        r#"{"controllerName":"S","serviceId":"S","controllerId":"S",
        "queues":{"nameInputNormal":"S_input_normal","nameInputPriority":"S_input_prio"},
        "connection":{"connection_type":"restapi","method":"POST","endpoint_url":"http://localhost/"}}"#,
    )
    .unwrap()
}

pub fn env(priority: Priority, id: u64) -> Envelope {
    Envelope::new(
        "x",
        NodeId(1),
        "",
        priority,
        "text/plain",
        id.to_string().into_bytes(),
    )
}

pub fn id_of(d: &Delivery) -> u64 {
    std::str::from_utf8(&d.envelope.payload)
        .unwrap()
        .parse()
        .unwrap()
}

pub struct StressOutcome {
    pub published: u64,
    pub acked: u64,
    pub dead: u64,
    pub double_deliveries: u64,
    pub duplicate_acks: u64,
}

pub async fn stress(total: u64, consumers: usize, seed: u64) -> StressOutcome {
    let broker = Arc::new(MemoryBroker::new(BrokerConfig {
        visibility_timeout: Duration::from_secs(60),
        ..Default::default()
    }));
    let pair: QueuePair = broker.declare_queues(&controller()).unwrap();
    let held = Arc::new(Mutex::new(HashSet::new()));
    let acked = Arc::new(Mutex::new(HashSet::new()));
    let double = Arc::new(AtomicU64::new(0));
    let dup_acks = Arc::new(AtomicU64::new(0));
    let settled = Arc::new(AtomicU64::new(0));

    let publisher = {
        let (broker, pair) = (broker.clone(), pair.clone());
        tokio::spawn(async move {
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            for id in 0..total {
                let p = if rng.random_bool(0.3) {
                    Priority::Priority
                } else {
                    Priority::Normal
                };
                broker.publish(pair.for_priority(p), env(p, id)).unwrap();
                if id % 64 == 0 {
                    tokio::task::yield_now().await;
                }
            }
        })
    };

    let mut workers = Vec::new();
    for w in 0..consumers {
        let (broker, pair) = (broker.clone(), pair.clone());
        let (held, acked, double, dup_acks, settled) = (
            held.clone(),
            acked.clone(),
            double.clone(),
            dup_acks.clone(),
            settled.clone(),
        );
        workers.push(tokio::spawn(async move {
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed ^ (w as u64 + 1));
            while settled.load(Ordering::SeqCst) < total {
                let Some(d) = broker.wait_next(&pair, Duration::from_millis(20)).await else {
                    continue;
                };
                let id = id_of(&d);
                if !held.lock().insert(id) {
                    double.fetch_add(1, Ordering::SeqCst);
                }
                if rng.random_bool(0.1) {
                    tokio::task::yield_now().await;
                }
                let roll: f64 = rng.random();
                held.lock().remove(&id);
                if roll < 0.7 {
                    broker.ack(d.tag).unwrap();
                    if !acked.lock().insert(id) {
                        dup_acks.fetch_add(1, Ordering::SeqCst);
                    }
                    settled.fetch_add(1, Ordering::SeqCst);
                } else if roll < 0.95 {
                    let dead = d.envelope.attempt + 1 >= broker.config().max_attempts;
                    broker.nack(d.tag, true).unwrap();
                    if dead {
                        settled.fetch_add(1, Ordering::SeqCst);
                    }
                } else {
                    broker.nack(d.tag, false).unwrap();
                    settled.fetch_add(1, Ordering::SeqCst);
                }
            }
        }));
    }
    publisher.await.unwrap();
    for w in workers {
        w.await.unwrap();
    }
    let stats = |q: &str| broker.stats(q).unwrap();
    let dead = stats("S_input_normal.dlq").depth as u64 + stats("S_input_prio.dlq").depth as u64;
    assert_eq!(stats(&pair.normal).depth + stats(&pair.priority).depth, 0);
    assert_eq!(
        stats(&pair.normal).unacked + stats(&pair.priority).unacked,
        0
    );
    let acked_n = acked.lock().len() as u64;
    StressOutcome {
        published: total,
        acked: acked_n,
        dead,
        double_deliveries: double.load(Ordering::SeqCst),
        duplicate_acks: dup_acks.load(Ordering::SeqCst),
    }
}
