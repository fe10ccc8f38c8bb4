//! ClickHouse over its native TCP protocol.
//!
//! ```sql
//! CREATE TABLE sensor_data (timestamp DateTime64(3, 'UTC'), sensor_id UInt64, value Float64)
//! ENGINE = MergeTree PARTITION BY toYYYYMMDD(timestamp) ORDER BY (timestamp, sensor_id)
//! SETTINGS index_granularity = 8192
//! ```
//!
//! Each batch is sent as one native block. The client library is async, so
//! every connection drives its own single-threaded runtime.

use std::future::Future;
use std::time::{Duration, Instant};

use klickhouse::{Client, ClientOptions, DateTime64, KlickhouseError, Row, Tz};
use tokio::runtime::Runtime;

use super::{port_or_default, AdapterError, Backend, Connection, InsertReceipt, Result, TABLE};
use crate::config::{ConnectionInfo, TargetDatabase};
use crate::generator::SensorRecord;
use crate::query::{
    AggFunc, BucketRow, BucketWidth, Query, QuerySpec, RangeRow, RawRow, ResultSet,
    SensorBucketRow,
};

pub struct ClickHouseBackend {
    info: ConnectionInfo,
    query_timeout: Duration,
}

impl ClickHouseBackend {
    pub fn new(info: ConnectionInfo, query_timeout: Duration) -> Self {
        ClickHouseBackend {
            info,
            query_timeout,
        }
    }
}

impl Backend for ClickHouseBackend {
    fn target(&self) -> TargetDatabase {
        TargetDatabase::ClickHouse
    }

    fn connect(&self) -> Result<Box<dyn Connection>> {
        let connect_err = |message: String| AdapterError::Connect {
            target: TargetDatabase::ClickHouse,
            message,
        };
        let runtime = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .map_err(|e| connect_err(e.to_string()))?;
        let mut options = ClientOptions {
            username: self.info.user.clone().unwrap_or_else(|| "default".into()),
            password: self.info.password.clone().unwrap_or_default(),
            default_database: self.info.database.clone(),
            ..ClientOptions::default()
        };
        options.settings.insert(
            "max_execution_time".into(),
            self.query_timeout.as_secs().max(1).to_string(),
        );
        options
            .settings
            .insert("async_insert".into(), "0".into());
        let addr = (
            self.info.host.clone(),
            port_or_default(&self.info, TargetDatabase::ClickHouse),
        );
        let client = runtime
            .block_on(async {
                tokio::time::timeout(Duration::from_secs(10), Client::connect(addr, options)).await
            })
            .map_err(|_| connect_err("connection attempt timed out".into()))?
            .map_err(|e| connect_err(e.to_string()))?;
        Ok(Box::new(ClickHouseConnection {
            runtime,
            client,
            query_timeout: self.query_timeout,
        }))
    }
}

struct ClickHouseConnection {
    runtime: Runtime,
    client: Client,
    query_timeout: Duration,
}

fn map_err(e: KlickhouseError) -> AdapterError {
    match e {
        KlickhouseError::ServerException { code, name, message, .. } => {
            AdapterError::Rejected(format!("{code} {name}: {message}"))
        }
        KlickhouseError::Io(e) => AdapterError::Transport(e.to_string()),
        other => AdapterError::Protocol(other.to_string()),
    }
}

#[derive(Row, Debug, Clone)]
struct InsertRow {
    timestamp: DateTime64<3>,
    sensor_id: u64,
    value: f64,
}

#[derive(Row, Debug)]
struct RawOut {
    ts: i64,
    sensor_id: u64,
    value: f64,
}

#[derive(Row, Debug)]
struct RangeOut {
    b: i64,
    mx: f64,
    mn: f64,
}

#[derive(Row, Debug)]
struct ScalarOut {
    v: Option<f64>,
}

#[derive(Row, Debug)]
struct SensorBucketOut {
    b: i64,
    sensor_id: u64,
    v: Option<f64>,
}

#[derive(Row, Debug)]
struct BucketOut {
    b: i64,
    v: Option<f64>,
}

#[derive(Row, Debug)]
struct CountOut {
    n: u64,
}

#[derive(Row, Debug)]
struct VersionOut {
    v: String,
}

/// DDL statements that (re)create the measurements table.
pub fn schema_sql() -> Vec<String> {
    vec![
        format!("DROP TABLE IF EXISTS {TABLE} SYNC"),
        format!(
            "CREATE TABLE {TABLE} (timestamp DateTime64(3, 'UTC'), sensor_id UInt64, value Float64) \
             ENGINE = MergeTree PARTITION BY toYYYYMMDD(timestamp) ORDER BY (timestamp, sensor_id) \
             SETTINGS index_granularity = 8192"
        ),
    ]
}

const EPOCH_MS: &str = "toUnixTimestamp64Milli(timestamp)";

fn bucket_expr(bucket: BucketWidth) -> String {
    let w = bucket.millis();
    format!("toInt64({EPOCH_MS} - ((({EPOCH_MS} % {w}) + {w}) % {w}))")
}

fn agg_sql(agg: AggFunc) -> &'static str {
    match agg {
        AggFunc::Average => "avgOrNull(value)",
        AggFunc::StdDev => "stddevSampOrNull(value)",
        AggFunc::Min => "minOrNull(value)",
        AggFunc::Max => "maxOrNull(value)",
    }
}

fn float_literal(v: f64) -> String {
    format!("toFloat64('{v:?}')")
}

fn sensor_list(sensors: &[u64]) -> String {
    sensors
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// SQL text for one query; every literal is numeric so it is inlined.
pub fn query_sql(spec: &QuerySpec) -> String {
    let time_filter = format!(
        "timestamp >= fromUnixTimestamp64Milli(toInt64({}), 'UTC') AND timestamp < fromUnixTimestamp64Milli(toInt64({}), 'UTC')",
        spec.range.start_ms, spec.range.end_ms
    );
    match &spec.query {
        Query::RawFetch { sensors } => format!(
            "SELECT {EPOCH_MS} AS ts, sensor_id, value FROM {TABLE} WHERE {time_filter} AND sensor_id IN ({}) ORDER BY ts, sensor_id, value",
            sensor_list(sensors)
        ),
        Query::OutOfRange {
            sensor,
            bucket,
            min_value,
            max_value,
        } => format!(
            "SELECT {} AS b, max(value) AS mx, min(value) AS mn FROM {TABLE} WHERE {time_filter} AND sensor_id = {sensor} GROUP BY b HAVING mn < {} OR mx > {} ORDER BY b",
            bucket_expr(*bucket),
            float_literal(*min_value),
            float_literal(*max_value)
        ),
        Query::Aggregate { sensors, agg } => format!(
            "SELECT {} AS v FROM {TABLE} WHERE {time_filter} AND sensor_id IN ({})",
            agg_sql(*agg),
            sensor_list(sensors)
        ),
        Query::Downsample {
            sensors,
            bucket,
            agg,
        } => format!(
            "SELECT {} AS b, sensor_id, {} AS v FROM {TABLE} WHERE {time_filter} AND sensor_id IN ({}) GROUP BY b, sensor_id ORDER BY b, sensor_id",
            bucket_expr(*bucket),
            agg_sql(*agg),
            sensor_list(sensors)
        ),
        Query::CompareDownsampled {
            first,
            second,
            bucket,
            agg,
            comp: _,
        } => {
            let side = |sensor: u64| {
                format!(
                    "SELECT {} AS b, {} AS val FROM {TABLE} WHERE {time_filter} AND sensor_id = {sensor} GROUP BY b",
                    bucket_expr(*bucket),
                    agg_sql(*agg)
                )
            };
            format!(
                "SELECT s1.b AS b, s1.val - s2.val AS v FROM ({}) AS s1 INNER JOIN ({}) AS s2 ON s1.b = s2.b ORDER BY b",
                side(*first),
                side(*second)
            )
        }
    }
}

/// ClickHouse reports undefined aggregates as NaN or infinity.
fn defined(v: Option<f64>) -> Option<f64> {
    v.filter(|x| x.is_finite())
}

impl ClickHouseConnection {
    fn run<T>(&self, fut: impl Future<Output = klickhouse::Result<T>>) -> Result<T> {
        let timeout = self.query_timeout;
        self.runtime
            .block_on(async { tokio::time::timeout(timeout, fut).await })
            .map_err(|_| AdapterError::Timeout(timeout))?
            .map_err(map_err)
    }
}

impl Connection for ClickHouseConnection {
    fn server_version(&mut self) -> Result<String> {
        let row: VersionOut = self.run(self.client.query_one("SELECT version() AS v"))?;
        Ok(format!("ClickHouse {}", row.v))
    }

    fn init_schema(&mut self, _sensor_number: u64) -> Result<()> {
        for stmt in schema_sql() {
            self.run(self.client.execute(stmt.as_str()))?;
        }
        Ok(())
    }

    fn insert_batch(&mut self, batch: &[SensorRecord]) -> Result<InsertReceipt> {
        if batch.is_empty() {
            return Err(AdapterError::EmptyBatch);
        }
        let rows: Vec<InsertRow> = batch
            .iter()
            .map(|r| InsertRow {
                timestamp: DateTime64::<3>(Tz::UTC, r.timestamp_ms as u64),
                sensor_id: r.sensor_id,
                value: r.value,
            })
            .collect();
        let query = format!("INSERT INTO {TABLE} (timestamp, sensor_id, value) FORMAT Native");
        let start = Instant::now();
        self.run(self.client.insert_native_block(query.as_str(), rows))?;
        Ok(InsertReceipt {
            records_written: batch.len(),
            elapsed: start.elapsed(),
        })
    }

    fn execute_query(&mut self, spec: &QuerySpec) -> Result<(ResultSet, Duration)> {
        spec.validate()
            .map_err(|e| AdapterError::Rejected(e.to_string()))?;
        let sql = query_sql(spec);
        let sql = sql.as_str();
        let start = Instant::now();
        let mut result = match &spec.query {
            Query::RawFetch { .. } => {
                let rows: Vec<RawOut> = self.run(self.client.query_collect(sql))?;
                ResultSet::Raw(
                    rows.into_iter()
                        .map(|r| RawRow {
                            timestamp_ms: r.ts,
                            sensor_id: r.sensor_id,
                            value: r.value,
                        })
                        .collect(),
                )
            }
            Query::OutOfRange { .. } => {
                let rows: Vec<RangeOut> = self.run(self.client.query_collect(sql))?;
                ResultSet::OutOfRange(
                    rows.into_iter()
                        .map(|r| RangeRow {
                            interval_start_ms: r.b,
                            max: r.mx,
                            min: r.mn,
                        })
                        .collect(),
                )
            }
            Query::Aggregate { .. } => {
                let rows: Vec<ScalarOut> = self.run(self.client.query_collect(sql))?;
                ResultSet::Aggregate(rows.first().and_then(|r| defined(r.v)))
            }
            Query::Downsample { .. } => {
                let rows: Vec<SensorBucketOut> = self.run(self.client.query_collect(sql))?;
                ResultSet::Downsampled(
                    rows.into_iter()
                        .map(|r| SensorBucketRow {
                            interval_start_ms: r.b,
                            sensor_id: r.sensor_id,
                            value: defined(r.v),
                        })
                        .collect(),
                )
            }
            Query::CompareDownsampled { .. } => {
                let rows: Vec<BucketOut> = self.run(self.client.query_collect(sql))?;
                ResultSet::Compared(
                    rows.into_iter()
                        .map(|r| BucketRow {
                            interval_start_ms: r.b,
                            value: defined(r.v),
                        })
                        .collect(),
                )
            }
        };
        let elapsed = start.elapsed();
        result.canonicalize();
        Ok((result, elapsed))
    }

    fn row_count(&mut self) -> Result<u64> {
        let sql = format!("SELECT count() AS n FROM {TABLE}");
        let row: CountOut = self.run(self.client.query_one(sql.as_str()))?;
        Ok(row.n)
    }

    fn probe(&mut self) -> Result<()> {
        self.run(self.client.execute("SELECT 1"))
    }
}
