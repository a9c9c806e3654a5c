//! Workflow orchestration for chaining containerised text-processing
//! services.
//!
//! * [`cwdl`] parses, validates and compiles JSON workflow definitions.
//! * [`nif`] models NIF stand-off annotation documents (turtle).
//! * [`broker`] is the in-memory message broker with normal/priority queues.
//! * [`controller`] proxies broker envelopes to REST services.
//! * [`engine`] instantiates templates and drives executions.
//! * [`api`] exposes the management and execution REST surface.
//! * [`mocks`] provides deterministic gazetteer services for tests and demos.

pub mod api;
pub mod broker;
pub mod controller;
pub mod cwdl;
pub mod engine;
pub mod mocks;
pub mod nif;
pub mod report;
