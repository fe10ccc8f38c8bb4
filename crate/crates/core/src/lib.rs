//! Benchmark harness for time-series databases.
//!
//! The crate is organised the way a benchmark run flows:
//!
//! - [`config`] parses workload-definition files and expands them into [`config::RunPlan`]s.
//! - [`generator`] produces deterministic synthetic sensor batches.
//! - [`query`] describes the five query workloads and their result shapes, and
//!   [`reference`] evaluates them by brute force as a correctness oracle.
//! - [`adapter`] wraps each target database behind one [`adapter::Backend`] trait.
//! - [`engine`] drives concurrent ingestion clients and repeated query runs.
//! - [`metrics`] turns latency samples into rates and summary statistics.
//! - [`sysmon`] polls a Glances-compatible endpoint for server resource usage.
//! - [`report`] persists samples, summaries, snapshots and the run manifest as files.

pub mod adapter;
pub mod config;
pub mod engine;
pub mod generator;
pub mod metrics;
pub mod query;
pub mod reference;
pub mod report;
pub mod sysmon;

pub use config::{RunPlan, TargetDatabase, WorkloadDefinition, WorkloadKind};
pub use generator::{Generator, SensorRecord};
pub use query::{QuerySpec, QueryType, ResultSet};
