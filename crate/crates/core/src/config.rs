//! Workload-definition files and run expansion.
//!
//! A definition is an XML document with one element per parameter under a
//! versioned `<Workload version="1">` root. The full schema is documented in
//! `docs/workload-format.md`. Unknown elements are rejected.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::query::{AggFunc, CompFunc, QueryType};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetDatabase {
    ClickHouse,
    InfluxDB,
    TimescaleDB,
    PostgreSQL,
    /// In-process store, no server required.
    Reference,
}

impl TargetDatabase {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetDatabase::ClickHouse => "ClickHouse",
            TargetDatabase::InfluxDB => "InfluxDB",
            TargetDatabase::TimescaleDB => "TimescaleDB",
            TargetDatabase::PostgreSQL => "PostgreSQL",
            TargetDatabase::Reference => "Reference",
        }
    }

    pub fn default_port(self) -> Option<u16> {
        match self {
            TargetDatabase::ClickHouse => Some(9000),
            TargetDatabase::InfluxDB => Some(8086),
            TargetDatabase::TimescaleDB | TargetDatabase::PostgreSQL => Some(5432),
            TargetDatabase::Reference => None,
        }
    }
}

impl fmt::Display for TargetDatabase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetDatabase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "clickhouse" => Ok(TargetDatabase::ClickHouse),
            "influxdb" | "influx" => Ok(TargetDatabase::InfluxDB),
            "timescaledb" | "timescale" => Ok(TargetDatabase::TimescaleDB),
            "postgresql" | "postgres" => Ok(TargetDatabase::PostgreSQL),
            "reference" => Ok(TargetDatabase::Reference),
            _ => Err(format!(
                "unknown target database `{s}`, expected ClickHouse, InfluxDB, TimescaleDB, PostgreSQL or Reference"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WorkloadKind {
    Ingestion,
    Query,
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WorkloadKind::Ingestion => "Ingestion",
            WorkloadKind::Query => "Query",
        })
    }
}

impl FromStr for WorkloadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ingestion" => Ok(WorkloadKind::Ingestion),
            "query" => Ok(WorkloadKind::Query),
            _ => Err(format!("unknown workload kind `{s}`, expected Ingestion or Query")),
        }
    }
}

/// When an ingestion run ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StopCondition {
    /// Each client inserts exactly this many batches.
    BatchesPerClient(u64),
    /// Whole batches are dealt round-robin to clients until at least this
    /// many records are covered.
    TotalRecords(u64),
    /// Clients keep inserting until the run has lasted this long.
    Duration(Duration),
}

impl fmt::Display for StopCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopCondition::BatchesPerClient(n) => write!(f, "batches:{n}"),
            StopCondition::TotalRecords(n) => write!(f, "records:{n}"),
            StopCondition::Duration(d) => write!(f, "duration:{}", humantime::format_duration(*d)),
        }
    }
}

impl FromStr for StopCondition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, value) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| format!("expected `batches:N`, `records:N` or `duration:D`, got `{s}`"))?;
        let count = |v: &str| {
            v.trim()
                .parse::<u64>()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| format!("`{v}` is not a positive integer"))
        };
        match kind.trim().to_ascii_lowercase().as_str() {
            "batches" => count(value).map(StopCondition::BatchesPerClient),
            "records" => count(value).map(StopCondition::TotalRecords),
            "duration" => parse_duration(value).map(StopCondition::Duration),
            other => Err(format!("unknown stop condition `{other}`")),
        }
    }
}

/// Where and how to reach the target server.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConnectionInfo {
    pub host: String,
    pub port: Option<u16>,
    pub user: Option<String>,
    pub password: Option<String>,
    /// Database name; the bucket name for InfluxDB.
    pub database: String,
    /// InfluxDB organization.
    pub organization: Option<String>,
    /// InfluxDB API token.
    pub token: Option<String>,
}

/// Credential overrides read from the environment.
pub const ENV_USER: &str = "TSBENCH_DB_USER";
pub const ENV_PASSWORD: &str = "TSBENCH_DB_PASSWORD";
pub const ENV_TOKEN: &str = "TSBENCH_INFLUX_TOKEN";
pub const ENV_ORG: &str = "TSBENCH_INFLUX_ORG";

impl ConnectionInfo {
    /// Applies `TSBENCH_*` credential variables on top of the file values.
    pub fn with_env_overrides(mut self) -> Self {
        self.apply_overrides(|name| std::env::var(name).ok());
        self
    }

    fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(v) = lookup(ENV_USER) {
            self.user = Some(v);
        }
        if let Some(v) = lookup(ENV_PASSWORD) {
            self.password = Some(v);
        }
        if let Some(v) = lookup(ENV_TOKEN) {
            self.token = Some(v);
        }
        if let Some(v) = lookup(ENV_ORG) {
            self.organization = Some(v);
        }
    }
}

/// A validated workload definition.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadDefinition {
    pub target_database: TargetDatabase,
    pub connection: ConnectionInfo,
    pub day_span: u32,
    pub start_time: DateTime<Utc>,
    pub batch_size_options: Vec<usize>,
    pub client_number_options: Vec<usize>,
    pub sensor_number: u64,
    pub workload_kind: WorkloadKind,
    pub query_type: Option<QueryType>,
    pub test_retries: u32,
    pub duration_minutes: u32,
    pub aggregation_interval: Duration,
    pub agg_func: AggFunc,
    pub comp_func: CompFunc,
    pub sensors_filter: Vec<u64>,
    pub min_value: Option<f64>,
    pub max_value: Option<f64>,
    pub timestamp_granularity: Duration,
    pub seed: u64,
    pub stop_condition: Option<StopCondition>,
    pub warmup_batches: u64,
    pub reset_between_runs: bool,
    pub max_consecutive_failures: u32,
    pub query_timeout: Duration,
    pub prepopulate_records: Option<u64>,
    pub monitor_endpoint: Option<String>,
    pub monitor_period: Duration,
    pub reset_hook: Option<String>,
}

impl WorkloadDefinition {
    pub fn start_ms(&self) -> i64 {
        self.start_time.timestamp_millis()
    }

    pub fn day_span_ms(&self) -> i64 {
        i64::from(self.day_span) * 86_400_000
    }

    /// Exclusive end of the data span.
    pub fn end_ms(&self) -> i64 {
        self.start_ms() + self.day_span_ms()
    }

    pub fn granularity_ms(&self) -> i64 {
        self.timestamp_granularity.as_millis() as i64
    }

    /// Checks every cross-field invariant.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field: &'static str, constraint: String| {
            Err(ConfigError::Invalid { field, constraint })
        };
        if self.day_span == 0 {
            return invalid("DaySpan", "must be at least 1 day".into());
        }
        if self.start_time.timestamp_millis() < 0 {
            return invalid("StartTime", "must not precede 1970-01-01T00:00:00Z".into());
        }
        if self.sensor_number == 0 {
            return invalid("SensorNumber", "must be at least 1".into());
        }
        let gran = self.timestamp_granularity.as_millis();
        if gran == 0 || self.timestamp_granularity.as_nanos() % 1_000_000 != 0 {
            return invalid(
                "TimestampGranularity",
                "must be a positive whole number of milliseconds".into(),
            );
        }
        if self.monitor_period.is_zero() {
            return invalid("MonitorPeriod", "must be positive".into());
        }
        if let Some(&bad) = self.sensors_filter.iter().find(|&&s| s >= self.sensor_number) {
            return invalid(
                "SensorsFilter",
                format!(
                    "sensor {bad} is outside [0, {}) given SensorNumber",
                    self.sensor_number
                ),
            );
        }
        match self.workload_kind {
            WorkloadKind::Ingestion => self.validate_ingestion(),
            WorkloadKind::Query => self.validate_query(),
        }
    }

    fn validate_ingestion(&self) -> Result<(), ConfigError> {
        let invalid = |field: &'static str, constraint: &str| {
            Err(ConfigError::Invalid {
                field,
                constraint: constraint.to_string(),
            })
        };
        if self.batch_size_options.is_empty() {
            return invalid("BatchSizeOptions", "at least one batch size is required");
        }
        if self.batch_size_options.contains(&0) {
            return invalid("BatchSizeOptions", "every batch size must be at least 1");
        }
        if self.client_number_options.is_empty() {
            return invalid("ClientNumberOptions", "at least one client count is required");
        }
        if self.client_number_options.contains(&0) {
            return invalid("ClientNumberOptions", "every client count must be at least 1");
        }
        if self.stop_condition.is_none() {
            return invalid("StopCondition", "required for ingestion workloads");
        }
        if let Some(&c) = self
            .client_number_options
            .iter()
            .find(|&&c| c as u64 > self.sensor_number)
        {
            return Err(ConfigError::Invalid {
                field: "ClientNumberOptions",
                constraint: format!(
                    "{c} clients exceed SensorNumber {}; every client needs its own sensors",
                    self.sensor_number
                ),
            });
        }
        Ok(())
    }

    fn validate_query(&self) -> Result<(), ConfigError> {
        let Some(query_type) = self.query_type else {
            return Err(ConfigError::Missing("QueryType"));
        };
        let invalid = |field: &'static str, constraint: String| {
            Err(ConfigError::Invalid { field, constraint })
        };
        if self.test_retries == 0 {
            return invalid("TestRetries", "must be at least 1".into());
        }
        if self.duration_minutes == 0 {
            return invalid("DurationMinutes", "must be at least 1".into());
        }
        if i64::from(self.duration_minutes) * 60_000 > self.day_span_ms() {
            return invalid(
                "DurationMinutes",
                format!(
                    "{} minutes do not fit in a {}-day span",
                    self.duration_minutes, self.day_span
                ),
            );
        }
        if self.aggregation_interval.as_millis() == 0 {
            return invalid("AggregationIntervalHour", "must be at least 1 ms".into());
        }
        if self.sensors_filter.is_empty() {
            return invalid(
                "SensorsFilter",
                format!("{query_type} requires at least one sensor"),
            );
        }
        match query_type {
            QueryType::Q2 => {
                if self.sensors_filter.len() != 1 {
                    return invalid("SensorsFilter", "Q2 filters exactly one sensor".into());
                }
                let (Some(min), Some(max)) = (self.min_value, self.max_value) else {
                    return Err(ConfigError::Missing(if self.min_value.is_none() {
                        "MinValue"
                    } else {
                        "MaxValue"
                    }));
                };
                if !(min < max) {
                    return invalid("MinValue", format!("MinValue {min} must be below MaxValue {max}"));
                }
            }
            QueryType::Q5 if self.sensors_filter.len() != 2 => {
                return invalid("SensorsFilter", "Q5 compares exactly two sensors".into());
            }
            _ => {}
        }
        if let Some(0) = self.prepopulate_records {
            return invalid("PrepopulateRecords", "must be positive when present".into());
        }
        Ok(())
    }

    /// Serializes back into the definition-file format.
    pub fn to_xml(&self) -> String {
        let doc = RawDocument::from(self);
        let body = quick_xml::se::to_string_with_root("Workload", &doc)
            .expect("definition serializes to XML");
        format!("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n{body}\n")
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed workload definition: {0}")]
    Parse(String),
    #[error("element <{element}>: {message}")]
    Element { element: &'static str, message: String },
    #[error("missing required element <{0}>")]
    Missing(&'static str),
    #[error("unsupported schema version `{0}`, expected `{SCHEMA_VERSION}`")]
    Version(String),
    #[error("invalid <{field}>: {constraint}")]
    Invalid {
        field: &'static str,
        constraint: String,
    },
}

// Wire form: every value is text so that errors can name the element.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConnection {
    #[serde(rename = "Host", default)]
    host: Option<String>,
    #[serde(rename = "Port", default, skip_serializing_if = "Option::is_none")]
    port: Option<String>,
    #[serde(rename = "User", default, skip_serializing_if = "Option::is_none")]
    user: Option<String>,
    #[serde(rename = "Password", default, skip_serializing_if = "Option::is_none")]
    password: Option<String>,
    #[serde(rename = "Database", default)]
    database: Option<String>,
    #[serde(rename = "Organization", default, skip_serializing_if = "Option::is_none")]
    organization: Option<String>,
    #[serde(rename = "Token", default, skip_serializing_if = "Option::is_none")]
    token: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDocument {
    #[serde(rename = "@version", default)]
    version: Option<String>,
    #[serde(rename = "TargetDatabase", default)]
    target_database: Option<String>,
    #[serde(rename = "Connection", default, skip_serializing_if = "Option::is_none")]
    connection: Option<RawConnection>,
    #[serde(rename = "WorkloadKind", default)]
    workload_kind: Option<String>,
    #[serde(rename = "DaySpan", default)]
    day_span: Option<String>,
    #[serde(rename = "StartTime", default)]
    start_time: Option<String>,
    #[serde(rename = "SensorNumber", default)]
    sensor_number: Option<String>,
    #[serde(rename = "TimestampGranularity", default, skip_serializing_if = "Option::is_none")]
    timestamp_granularity: Option<String>,
    #[serde(rename = "Seed", default, skip_serializing_if = "Option::is_none")]
    seed: Option<String>,
    #[serde(rename = "BatchSizeOptions", default, skip_serializing_if = "Option::is_none")]
    batch_size_options: Option<String>,
    #[serde(rename = "ClientNumberOptions", default, skip_serializing_if = "Option::is_none")]
    client_number_options: Option<String>,
    #[serde(rename = "StopCondition", default, skip_serializing_if = "Option::is_none")]
    stop_condition: Option<String>,
    #[serde(rename = "WarmupBatches", default, skip_serializing_if = "Option::is_none")]
    warmup_batches: Option<String>,
    #[serde(rename = "ResetBetweenRuns", default, skip_serializing_if = "Option::is_none")]
    reset_between_runs: Option<String>,
    #[serde(rename = "MaxConsecutiveFailures", default, skip_serializing_if = "Option::is_none")]
    max_consecutive_failures: Option<String>,
    #[serde(rename = "QueryType", default, skip_serializing_if = "Option::is_none")]
    query_type: Option<String>,
    #[serde(rename = "TestRetries", default, skip_serializing_if = "Option::is_none")]
    test_retries: Option<String>,
    #[serde(rename = "DurationMinutes", default, skip_serializing_if = "Option::is_none")]
    duration_minutes: Option<String>,
    #[serde(rename = "AggregationIntervalHour", default, skip_serializing_if = "Option::is_none")]
    aggregation_interval: Option<String>,
    #[serde(rename = "AggregationFunction", default, skip_serializing_if = "Option::is_none")]
    agg_func: Option<String>,
    #[serde(rename = "CompareFunction", default, skip_serializing_if = "Option::is_none")]
    comp_func: Option<String>,
    #[serde(rename = "SensorsFilter", default, skip_serializing_if = "Option::is_none")]
    sensors_filter: Option<String>,
    #[serde(rename = "MinValue", default, skip_serializing_if = "Option::is_none")]
    min_value: Option<String>,
    #[serde(rename = "MaxValue", default, skip_serializing_if = "Option::is_none")]
    max_value: Option<String>,
    #[serde(rename = "QueryTimeout", default, skip_serializing_if = "Option::is_none")]
    query_timeout: Option<String>,
    #[serde(rename = "PrepopulateRecords", default, skip_serializing_if = "Option::is_none")]
    prepopulate_records: Option<String>,
    #[serde(rename = "MonitorEndpoint", default, skip_serializing_if = "Option::is_none")]
    monitor_endpoint: Option<String>,
    #[serde(rename = "MonitorPeriod", default, skip_serializing_if = "Option::is_none")]
    monitor_period: Option<String>,
    #[serde(rename = "ResetHook", default, skip_serializing_if = "Option::is_none")]
    reset_hook: Option<String>,
}

fn parse_duration(text: &str) -> Result<Duration, String> {
    humantime::parse_duration(text.trim()).map_err(|e| format!("`{}`: {e}", text.trim()))
}

/// A duration string, or a bare (possibly fractional) number of hours.
fn parse_hours(text: &str) -> Result<Duration, String> {
    match text.trim().parse::<f64>() {
        Ok(h) if h.is_finite() && h >= 0.0 => Ok(Duration::from_secs_f64(h * 3600.0)),
        Ok(_) => Err(format!("`{}` is not a non-negative number of hours", text.trim())),
        Err(_) => parse_duration(text),
    }
}

fn format_duration(d: Duration) -> String {
    humantime::format_duration(d).to_string()
}

/// Parses a comma-separated list of positive integers, whitespace tolerated.
pub fn parse_int_list<T: FromStr>(text: &str) -> Result<Vec<T>, String> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|item| {
            let item = item.trim();
            item.parse::<T>()
                .map_err(|_| format!("`{item}` is not a non-negative integer"))
        })
        .collect()
}

fn join_list<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn field<T>(
    element: &'static str,
    raw: Option<&String>,
    parse: impl FnOnce(&str) -> Result<T, String>,
) -> Result<Option<T>, ConfigError> {
    raw.map(|text| parse(text).map_err(|message| ConfigError::Element { element, message }))
        .transpose()
}

fn required<T>(
    element: &'static str,
    raw: Option<&String>,
    parse: impl FnOnce(&str) -> Result<T, String>,
) -> Result<T, ConfigError> {
    field(element, raw, parse)?.ok_or(ConfigError::Missing(element))
}

fn from_str<T: FromStr>(text: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    text.trim().parse::<T>().map_err(|e| format!("`{}`: {e}", text.trim()))
}

fn parse_bool(text: &str) -> Result<bool, String> {
    match text.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(format!("`{other}` is not a boolean")),
    }
}

fn non_empty(text: Option<String>) -> Option<String> {
    text.map(|t| t.trim().to_string()).filter(|t| !t.is_empty())
}

/// Parses and validates a workload-definition document.
pub fn parse_workload(document: &str) -> Result<WorkloadDefinition, ConfigError> {
    let raw: RawDocument =
        quick_xml::de::from_str(document).map_err(|e| ConfigError::Parse(e.to_string()))?;
    match raw.version.as_deref().map(str::trim) {
        Some(SCHEMA_VERSION) => {}
        Some(other) => return Err(ConfigError::Version(other.to_string())),
        None => return Err(ConfigError::Version(String::new())),
    }

    let target_database = required("TargetDatabase", raw.target_database.as_ref(), from_str)?;
    let workload_kind = required("WorkloadKind", raw.workload_kind.as_ref(), from_str)?;
    let conn = raw.connection.unwrap_or_default();
    let connection = ConnectionInfo {
        host: non_empty(conn.host).unwrap_or_else(|| "localhost".into()),
        port: field("Port", conn.port.as_ref(), from_str)?,
        user: non_empty(conn.user),
        password: conn.password.filter(|p| !p.is_empty()),
        database: non_empty(conn.database).unwrap_or_else(|| "tsbench".into()),
        organization: non_empty(conn.organization),
        token: non_empty(conn.token),
    };
    let start_time = required("StartTime", raw.start_time.as_ref(), |t| {
        DateTime::parse_from_rfc3339(t.trim())
            .map(|d| d.with_timezone(&Utc))
            .map_err(|e| format!("`{}`: {e}", t.trim()))
    })?;

    let def = WorkloadDefinition {
        target_database,
        connection,
        day_span: required("DaySpan", raw.day_span.as_ref(), from_str)?,
        start_time,
        batch_size_options: field("BatchSizeOptions", raw.batch_size_options.as_ref(), parse_int_list)?
            .unwrap_or_default(),
        client_number_options: field(
            "ClientNumberOptions",
            raw.client_number_options.as_ref(),
            parse_int_list,
        )?
        .unwrap_or_default(),
        sensor_number: required("SensorNumber", raw.sensor_number.as_ref(), from_str)?,
        workload_kind,
        query_type: field("QueryType", raw.query_type.as_ref(), from_str)?,
        test_retries: match workload_kind {
            WorkloadKind::Query => required("TestRetries", raw.test_retries.as_ref(), from_str)?,
            WorkloadKind::Ingestion => {
                field("TestRetries", raw.test_retries.as_ref(), from_str)?.unwrap_or(1)
            }
        },
        duration_minutes: match workload_kind {
            WorkloadKind::Query => {
                required("DurationMinutes", raw.duration_minutes.as_ref(), from_str)?
            }
            WorkloadKind::Ingestion => {
                field("DurationMinutes", raw.duration_minutes.as_ref(), from_str)?.unwrap_or(1)
            }
        },
        aggregation_interval: field(
            "AggregationIntervalHour",
            raw.aggregation_interval.as_ref(),
            parse_hours,
        )?
        .unwrap_or(Duration::from_secs(3600)),
        agg_func: field("AggregationFunction", raw.agg_func.as_ref(), from_str)?.unwrap_or_default(),
        comp_func: field("CompareFunction", raw.comp_func.as_ref(), from_str)?.unwrap_or_default(),
        sensors_filter: field("SensorsFilter", raw.sensors_filter.as_ref(), parse_int_list)?
            .unwrap_or_default(),
        min_value: field("MinValue", raw.min_value.as_ref(), from_str)?,
        max_value: field("MaxValue", raw.max_value.as_ref(), from_str)?,
        timestamp_granularity: field(
            "TimestampGranularity",
            raw.timestamp_granularity.as_ref(),
            parse_duration,
        )?
        .unwrap_or(Duration::from_secs(1)),
        seed: field("Seed", raw.seed.as_ref(), from_str)?.unwrap_or(0),
        stop_condition: field("StopCondition", raw.stop_condition.as_ref(), from_str)?,
        warmup_batches: field("WarmupBatches", raw.warmup_batches.as_ref(), from_str)?.unwrap_or(0),
        reset_between_runs: field("ResetBetweenRuns", raw.reset_between_runs.as_ref(), parse_bool)?
            .unwrap_or(true),
        max_consecutive_failures: field(
            "MaxConsecutiveFailures",
            raw.max_consecutive_failures.as_ref(),
            from_str,
        )?
        .unwrap_or(5),
        query_timeout: field("QueryTimeout", raw.query_timeout.as_ref(), parse_duration)?
            .unwrap_or(Duration::from_secs(60)),
        prepopulate_records: field("PrepopulateRecords", raw.prepopulate_records.as_ref(), from_str)?,
        monitor_endpoint: non_empty(raw.monitor_endpoint),
        monitor_period: field("MonitorPeriod", raw.monitor_period.as_ref(), parse_duration)?
            .unwrap_or(Duration::from_secs(1)),
        reset_hook: non_empty(raw.reset_hook),
    };
    def.validate()?;
    Ok(def)
}

impl From<&WorkloadDefinition> for RawDocument {
    fn from(d: &WorkloadDefinition) -> Self {
        let c = &d.connection;
        RawDocument {
            version: Some(SCHEMA_VERSION.into()),
            target_database: Some(d.target_database.to_string()),
            connection: Some(RawConnection {
                host: Some(c.host.clone()),
                port: c.port.map(|p| p.to_string()),
                user: c.user.clone(),
                password: c.password.clone(),
                database: Some(c.database.clone()),
                organization: c.organization.clone(),
                token: c.token.clone(),
            }),
            workload_kind: Some(d.workload_kind.to_string()),
            day_span: Some(d.day_span.to_string()),
            start_time: Some(d.start_time.to_rfc3339_opts(chrono::SecondsFormat::Millis, true)),
            sensor_number: Some(d.sensor_number.to_string()),
            timestamp_granularity: Some(format_duration(d.timestamp_granularity)),
            seed: Some(d.seed.to_string()),
            batch_size_options: Some(join_list(&d.batch_size_options)),
            client_number_options: Some(join_list(&d.client_number_options)),
            stop_condition: d.stop_condition.map(|s| s.to_string()),
            warmup_batches: Some(d.warmup_batches.to_string()),
            reset_between_runs: Some(d.reset_between_runs.to_string()),
            max_consecutive_failures: Some(d.max_consecutive_failures.to_string()),
            query_type: d.query_type.map(|q| q.to_string()),
            test_retries: Some(d.test_retries.to_string()),
            duration_minutes: Some(d.duration_minutes.to_string()),
            aggregation_interval: Some(format_duration(d.aggregation_interval)),
            agg_func: Some(d.agg_func.to_string()),
            comp_func: Some(d.comp_func.to_string()),
            sensors_filter: Some(join_list(&d.sensors_filter)),
            // `{:?}` prints the shortest representation that parses back exactly.
            min_value: d.min_value.map(|v| format!("{v:?}")),
            max_value: d.max_value.map(|v| format!("{v:?}")),
            query_timeout: Some(format_duration(d.query_timeout)),
            prepopulate_records: d.prepopulate_records.map(|n| n.to_string()),
            monitor_endpoint: d.monitor_endpoint.clone(),
            monitor_period: Some(format_duration(d.monitor_period)),
            reset_hook: d.reset_hook.clone(),
        }
    }
}

/// The resolved shape of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlannedWorkload {
    Ingestion { batch_size: usize, client_count: usize },
    Query { query_type: QueryType, repetitions: u32 },
}

/// One atomic run: a definition with its option lists resolved to single values.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub ordinal: usize,
    pub workload: PlannedWorkload,
    pub definition: Arc<WorkloadDefinition>,
}

impl RunPlan {
    pub fn kind(&self) -> WorkloadKind {
        match self.workload {
            PlannedWorkload::Ingestion { .. } => WorkloadKind::Ingestion,
            PlannedWorkload::Query { .. } => WorkloadKind::Query,
        }
    }

    pub fn client_count(&self) -> usize {
        match self.workload {
            PlannedWorkload::Ingestion { client_count, .. } => client_count,
            PlannedWorkload::Query { .. } => 1,
        }
    }

    pub fn batch_size(&self) -> Option<usize> {
        match self.workload {
            PlannedWorkload::Ingestion { batch_size, .. } => Some(batch_size),
            PlannedWorkload::Query { .. } => None,
        }
    }
}

impl fmt::Display for RunPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = &self.definition;
        match self.workload {
            PlannedWorkload::Ingestion {
                batch_size,
                client_count,
            } => write!(
                f,
                "run {:03}: ingestion target={} batch_size={} clients={} sensors={} stop={} seed={}",
                self.ordinal,
                d.target_database,
                batch_size,
                client_count,
                d.sensor_number,
                d.stop_condition
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| "-".into()),
                d.seed
            ),
            PlannedWorkload::Query {
                query_type,
                repetitions,
            } => write!(
                f,
                "run {:03}: query target={} type={} repetitions={} duration_min={} sensors=[{}] seed={}",
                self.ordinal,
                d.target_database,
                query_type,
                repetitions,
                d.duration_minutes,
                join_list(&d.sensors_filter),
                d.seed
            ),
        }
    }
}

/// Expands a definition into its ordered runs.
///
/// Ingestion definitions yield one run per (batch size, client count) pair,
/// batch sizes outermost, both in declaration order.
pub fn expand_runs(def: &WorkloadDefinition) -> Vec<RunPlan> {
    let shared = Arc::new(def.clone());
    match def.workload_kind {
        WorkloadKind::Ingestion => def
            .batch_size_options
            .iter()
            .flat_map(|&batch_size| {
                def.client_number_options
                    .iter()
                    .map(move |&client_count| PlannedWorkload::Ingestion {
                        batch_size,
                        client_count,
                    })
            })
            .enumerate()
            .map(|(ordinal, workload)| RunPlan {
                ordinal,
                workload,
                definition: Arc::clone(&shared),
            })
            .collect(),
        WorkloadKind::Query => vec![RunPlan {
            ordinal: 0,
            workload: PlannedWorkload::Query {
                query_type: def.query_type.expect("validated query definition"),
                repetitions: def.test_retries,
            },
            definition: shared,
        }],
    }
}
