//! PostgreSQL and TimescaleDB over the PostgreSQL wire protocol.
//!
//! Batches are written with one binary `COPY ... FROM STDIN`. The schema is
//!
//! ```sql
//! CREATE TABLE sensor_data ("timestamp" timestamptz NOT NULL,
//!                           sensor_id bigint NOT NULL,
//!                           value double precision NOT NULL);
//! CREATE INDEX sensor_data_ts_sensor_idx ON sensor_data ("timestamp", sensor_id);
//! ```
//!
//! TimescaleDB additionally turns the table into a hypertable with 12-hour
//! chunks. Buckets are epoch-aligned: integer arithmetic on epoch
//! milliseconds for PostgreSQL, `time_bucket` with a 1970 origin for
//! TimescaleDB.

use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use postgres::binary_copy::BinaryCopyInWriter;
use postgres::error::SqlState;
use postgres::types::Type;
use postgres::{Client, NoTls};

use super::{port_or_default, AdapterError, Backend, Connection, InsertReceipt, Result, TABLE};
use crate::config::{ConnectionInfo, TargetDatabase};
use crate::generator::SensorRecord;
use crate::query::{
    AggFunc, BucketRow, BucketWidth, Query, QuerySpec, RangeRow, RawRow, ResultSet,
    SensorBucketRow,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    Plain,
    Timescale,
}

pub struct PostgresBackend {
    flavor: Flavor,
    info: ConnectionInfo,
    query_timeout: Duration,
}

impl PostgresBackend {
    pub fn new(flavor: Flavor, info: ConnectionInfo, query_timeout: Duration) -> Self {
        PostgresBackend {
            flavor,
            info,
            query_timeout,
        }
    }

    fn target_db(&self) -> TargetDatabase {
        match self.flavor {
            Flavor::Plain => TargetDatabase::PostgreSQL,
            Flavor::Timescale => TargetDatabase::TimescaleDB,
        }
    }
}

impl Backend for PostgresBackend {
    fn target(&self) -> TargetDatabase {
        self.target_db()
    }

    fn connect(&self) -> Result<Box<dyn Connection>> {
        let mut config = postgres::Config::new();
        config
            .host(&self.info.host)
            .port(port_or_default(&self.info, self.target_db()))
            .dbname(&self.info.database)
            .user(self.info.user.as_deref().unwrap_or("postgres"))
            .connect_timeout(Duration::from_secs(10))
            .application_name("tsbench");
        if let Some(password) = &self.info.password {
            config.password(password);
        }
        let mut client = config.connect(NoTls).map_err(|e| AdapterError::Connect {
            target: self.target_db(),
            message: e.to_string(),
        })?;
        client
            .batch_execute(&format!(
                "SET statement_timeout = {}",
                self.query_timeout.as_millis()
            ))
            .map_err(map_err)?;
        Ok(Box::new(PostgresConnection {
            flavor: self.flavor,
            client,
            query_timeout: self.query_timeout,
        }))
    }
}

struct PostgresConnection {
    flavor: Flavor,
    client: Client,
    query_timeout: Duration,
}

fn map_err(e: postgres::Error) -> AdapterError {
    if let Some(db) = e.as_db_error() {
        return AdapterError::Rejected(format!("{}: {}", db.code().code(), db.message()));
    }
    if e.is_closed() {
        return AdapterError::Transport(e.to_string());
    }
    AdapterError::Transport(e.to_string())
}

fn map_query_err(e: postgres::Error, timeout: Duration) -> AdapterError {
    if e.code() == Some(&SqlState::QUERY_CANCELED) {
        AdapterError::Timeout(timeout)
    } else {
        map_err(e)
    }
}

fn to_datetime(ms: i64) -> DateTime<Utc> {
    DateTime::from_timestamp_millis(ms).expect("timestamp within chrono range")
}

/// DDL statements that (re)create the measurements table.
pub fn schema_sql(flavor: Flavor) -> Vec<String> {
    let mut stmts = Vec::new();
    if flavor == Flavor::Timescale {
        stmts.push("CREATE EXTENSION IF NOT EXISTS timescaledb".to_string());
    }
    stmts.push(format!("DROP TABLE IF EXISTS {TABLE}"));
    stmts.push(format!(
        "CREATE TABLE {TABLE} (\"timestamp\" timestamptz NOT NULL, sensor_id bigint NOT NULL, value double precision NOT NULL)"
    ));
    if flavor == Flavor::Timescale {
        stmts.push(format!(
            "SELECT create_hypertable('{TABLE}', 'timestamp', chunk_time_interval => INTERVAL '12 hours', create_default_indexes => false)"
        ));
    }
    stmts.push(format!(
        "CREATE INDEX {TABLE}_ts_sensor_idx ON {TABLE} (\"timestamp\", sensor_id)"
    ));
    stmts
}

fn ts_literal(ms: i64) -> String {
    format!("(TIMESTAMPTZ 'epoch' + {ms} * INTERVAL '1 millisecond')")
}

const EPOCH_MS: &str = "round(extract(epoch FROM \"timestamp\") * 1000)::bigint";

fn bucket_expr(flavor: Flavor, bucket: BucketWidth) -> String {
    let w = bucket.millis();
    match flavor {
        Flavor::Plain => format!("(floor({EPOCH_MS}::numeric / {w}) * {w})::bigint"),
        Flavor::Timescale => format!(
            "round(extract(epoch FROM time_bucket(INTERVAL '{w} milliseconds', \"timestamp\", TIMESTAMPTZ '1970-01-01 00:00:00+00')) * 1000)::bigint"
        ),
    }
}

fn agg_sql(agg: AggFunc) -> &'static str {
    match agg {
        AggFunc::Average => "avg(value)",
        AggFunc::StdDev => "stddev_samp(value)",
        AggFunc::Min => "min(value)",
        AggFunc::Max => "max(value)",
    }
}

fn float_literal(v: f64) -> String {
    format!("CAST('{v:?}' AS double precision)")
}

fn sensor_list(sensors: &[u64]) -> String {
    let ids: Vec<String> = sensors.iter().map(u64::to_string).collect();
    format!("ARRAY[{}]::bigint[]", ids.join(","))
}

/// SQL text for one query; every literal is numeric so it is inlined.
pub fn query_sql(flavor: Flavor, spec: &QuerySpec) -> String {
    let time_filter = format!(
        "\"timestamp\" >= {} AND \"timestamp\" < {}",
        ts_literal(spec.range.start_ms),
        ts_literal(spec.range.end_ms)
    );
    match &spec.query {
        Query::RawFetch { sensors } => format!(
            "SELECT {EPOCH_MS}, sensor_id, value FROM {TABLE} WHERE {time_filter} AND sensor_id = ANY({}) ORDER BY 1, 2, 3",
            sensor_list(sensors)
        ),
        Query::OutOfRange {
            sensor,
            bucket,
            min_value,
            max_value,
        } => format!(
            "SELECT b, max(value), min(value) FROM (SELECT {} AS b, value FROM {TABLE} WHERE {time_filter} AND sensor_id = {sensor}) t GROUP BY b HAVING min(value) < {} OR max(value) > {} ORDER BY b",
            bucket_expr(flavor, *bucket),
            float_literal(*min_value),
            float_literal(*max_value)
        ),
        Query::Aggregate { sensors, agg } => format!(
            "SELECT {} FROM {TABLE} WHERE {time_filter} AND sensor_id = ANY({})",
            agg_sql(*agg),
            sensor_list(sensors)
        ),
        Query::Downsample {
            sensors,
            bucket,
            agg,
        } => format!(
            "SELECT b, sensor_id, {} FROM (SELECT {} AS b, sensor_id, value FROM {TABLE} WHERE {time_filter} AND sensor_id = ANY({})) t GROUP BY b, sensor_id ORDER BY b, sensor_id",
            agg_sql(*agg),
            bucket_expr(flavor, *bucket),
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
                    "SELECT b, {} AS val FROM (SELECT {} AS b, value FROM {TABLE} WHERE {time_filter} AND sensor_id = {sensor}) t GROUP BY b",
                    agg_sql(*agg),
                    bucket_expr(flavor, *bucket)
                )
            };
            // Subtract is the only comparison function.
            format!(
                "SELECT s1.b, s1.val - s2.val FROM ({}) s1 INNER JOIN ({}) s2 ON s1.b = s2.b ORDER BY s1.b",
                side(*first),
                side(*second)
            )
        }
    }
}

impl Connection for PostgresConnection {
    fn server_version(&mut self) -> Result<String> {
        let row = self
            .client
            .query_one("SHOW server_version", &[])
            .map_err(map_err)?;
        let pg: String = row.get(0);
        if self.flavor == Flavor::Timescale {
            let ext = self
                .client
                .query_opt(
                    "SELECT extversion FROM pg_extension WHERE extname = 'timescaledb'",
                    &[],
                )
                .map_err(map_err)?;
            let ts = ext
                .map(|r| r.get::<_, String>(0))
                .unwrap_or_else(|| "not installed".into());
            return Ok(format!("TimescaleDB {ts} on PostgreSQL {pg}"));
        }
        Ok(format!("PostgreSQL {pg}"))
    }

    fn init_schema(&mut self, _sensor_number: u64) -> Result<()> {
        let mut tx = self.client.transaction().map_err(map_err)?;
        for stmt in schema_sql(self.flavor) {
            tx.batch_execute(&stmt).map_err(map_err)?;
        }
        tx.commit().map_err(map_err)
    }

    fn insert_batch(&mut self, batch: &[SensorRecord]) -> Result<InsertReceipt> {
        if batch.is_empty() {
            return Err(AdapterError::EmptyBatch);
        }
        let rows: Vec<(DateTime<Utc>, i64, f64)> = batch
            .iter()
            .map(|r| (to_datetime(r.timestamp_ms), r.sensor_id as i64, r.value))
            .collect();
        let start = Instant::now();
        let sink = self
            .client
            .copy_in(&format!(
                "COPY {TABLE} (\"timestamp\", sensor_id, value) FROM STDIN (FORMAT binary)"
            ))
            .map_err(map_err)?;
        let mut writer =
            BinaryCopyInWriter::new(sink, &[Type::TIMESTAMPTZ, Type::INT8, Type::FLOAT8]);
        for (ts, id, value) in &rows {
            writer.write(&[ts, id, value]).map_err(map_err)?;
        }
        let written = writer.finish().map_err(map_err)?;
        let elapsed = start.elapsed();
        if written as usize != batch.len() {
            return Err(AdapterError::Protocol(format!(
                "COPY reported {written} rows for a batch of {}",
                batch.len()
            )));
        }
        Ok(InsertReceipt {
            records_written: batch.len(),
            elapsed,
        })
    }

    fn execute_query(&mut self, spec: &QuerySpec) -> Result<(ResultSet, Duration)> {
        spec.validate()
            .map_err(|e| AdapterError::Rejected(e.to_string()))?;
        let sql = query_sql(self.flavor, spec);
        let timeout = self.query_timeout;
        let start = Instant::now();
        let rows = self
            .client
            .query(sql.as_str(), &[])
            .map_err(|e| map_query_err(e, timeout))?;
        let mut result = match &spec.query {
            Query::RawFetch { .. } => ResultSet::Raw(
                rows.iter()
                    .map(|r| RawRow {
                        timestamp_ms: r.get(0),
                        sensor_id: r.get::<_, i64>(1) as u64,
                        value: r.get(2),
                    })
                    .collect(),
            ),
            Query::OutOfRange { .. } => ResultSet::OutOfRange(
                rows.iter()
                    .map(|r| RangeRow {
                        interval_start_ms: r.get(0),
                        max: r.get(1),
                        min: r.get(2),
                    })
                    .collect(),
            ),
            Query::Aggregate { .. } => {
                ResultSet::Aggregate(rows.first().and_then(|r| r.get::<_, Option<f64>>(0)))
            }
            Query::Downsample { .. } => ResultSet::Downsampled(
                rows.iter()
                    .map(|r| SensorBucketRow {
                        interval_start_ms: r.get(0),
                        sensor_id: r.get::<_, i64>(1) as u64,
                        value: r.get(2),
                    })
                    .collect(),
            ),
            Query::CompareDownsampled { .. } => ResultSet::Compared(
                rows.iter()
                    .map(|r| BucketRow {
                        interval_start_ms: r.get(0),
                        value: r.get(1),
                    })
                    .collect(),
            ),
        };
        let elapsed = start.elapsed();
        result.canonicalize();
        Ok((result, elapsed))
    }

    fn row_count(&mut self) -> Result<u64> {
        let row = self
            .client
            .query_one(&format!("SELECT count(*) FROM {TABLE}"), &[])
            .map_err(map_err)?;
        Ok(row.get::<_, i64>(0) as u64)
    }

    fn probe(&mut self) -> Result<()> {
        self.client.simple_query("SELECT 1").map_err(map_err)?;
        Ok(())
    }
}
