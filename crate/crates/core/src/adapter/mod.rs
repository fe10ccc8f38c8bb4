//! Database abstraction layer.
//!
//! A [`Backend`] is a factory for [`Connection`]s. Each client worker opens
//! its own connection; connections are never shared between threads.
//!
//! All backends store the same logical table, `sensor_data(timestamp,
//! sensor_id, value)`, with a combined index on `(timestamp, sensor_id)`,
//! and bucket timestamps on epoch-aligned boundaries.

use std::time::Duration;

use thiserror::Error;

use crate::config::{ConnectionInfo, TargetDatabase, WorkloadDefinition};
use crate::generator::SensorRecord;
use crate::query::{QuerySpec, ResultSet};

pub mod clickhouse;
pub mod influx;
pub mod memory;
pub mod postgres;

pub use memory::MemoryBackend;

/// Table name used by every backend.
pub const TABLE: &str = "sensor_data";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InsertReceipt {
    pub records_written: usize,
    pub elapsed: Duration,
}

#[derive(Debug, Error)]
pub enum AdapterError {
    /// The server could not be reached or the connection broke.
    #[error("cannot reach {target}: {message}")]
    Connect {
        target: TargetDatabase,
        message: String,
    },
    /// Network failure mid-operation; the operation may be retried.
    #[error("transport error: {0}")]
    Transport(String),
    /// The server refused the request; retrying will not help.
    #[error("server rejected request: {0}")]
    Rejected(String),
    #[error("operation timed out after {0:?}")]
    Timeout(Duration),
    #[error("insert_batch called with an empty batch")]
    EmptyBatch,
    #[error("unexpected response: {0}")]
    Protocol(String),
}

impl AdapterError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, AdapterError::Transport(_) | AdapterError::Timeout(_))
    }
}

pub type Result<T, E = AdapterError> = std::result::Result<T, E>;

/// One client's session with a target database.
pub trait Connection: Send {
    /// Version string reported by the server.
    fn server_version(&mut self) -> Result<String>;

    /// Drops and recreates the measurements table, leaving it empty.
    fn init_schema(&mut self, sensor_number: u64) -> Result<()>;

    /// Writes the whole batch in one bulk operation.
    ///
    /// `elapsed` spans from just before submission to acknowledgment.
    fn insert_batch(&mut self, batch: &[SensorRecord]) -> Result<InsertReceipt>;

    /// Runs one query and materializes every row in canonical order.
    fn execute_query(&mut self, spec: &QuerySpec) -> Result<(ResultSet, Duration)>;

    /// `COUNT(*)` of the measurements table.
    fn row_count(&mut self) -> Result<u64>;

    /// Cheap round trip used as a health check.
    fn probe(&mut self) -> Result<()>;
}

pub trait Backend: Send + Sync {
    fn target(&self) -> TargetDatabase;

    fn connect(&self) -> Result<Box<dyn Connection>>;
}

/// Builds the backend named by the definition.
///
/// Credentials from the `TSBENCH_*` environment variables override the file.
pub fn backend_for(def: &WorkloadDefinition) -> Box<dyn Backend> {
    let info = def.connection.clone().with_env_overrides();
    let timeout = def.query_timeout;
    match def.target_database {
        TargetDatabase::Reference => Box::new(MemoryBackend::new()),
        TargetDatabase::PostgreSQL => Box::new(postgres::PostgresBackend::new(
            postgres::Flavor::Plain,
            info,
            timeout,
        )),
        TargetDatabase::TimescaleDB => Box::new(postgres::PostgresBackend::new(
            postgres::Flavor::Timescale,
            info,
            timeout,
        )),
        TargetDatabase::InfluxDB => Box::new(influx::InfluxBackend::new(info, timeout)),
        TargetDatabase::ClickHouse => Box::new(clickhouse::ClickHouseBackend::new(info, timeout)),
    }
}

pub(crate) fn port_or_default(info: &ConnectionInfo, target: TargetDatabase) -> u16 {
    info.port
        .or_else(|| target.default_port())
        .expect("server backends have a default port")
}
