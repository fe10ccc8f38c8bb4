//! InfluxDB 2.x over HTTP.
//!
//! Writes use the line protocol with millisecond precision, one request per
//! batch:
//!
//! ```text
//! sensor_data,sensor_id=42 value=1234.5 1640995200000
//! ```
//!
//! `sensor_id` is a tag and `value` a field. Queries are Flux scripts posted
//! to `/api/v2/query`; buckets are computed from `_time` in integer
//! nanoseconds so they stay aligned to the epoch rather than to the range
//! start. Resetting the schema deletes and recreates the bucket.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use chrono::DateTime;
use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{port_or_default, AdapterError, Backend, Connection, InsertReceipt, Result, TABLE};
use crate::config::{ConnectionInfo, TargetDatabase};
use crate::generator::SensorRecord;
use crate::query::{
    AggFunc, BucketRow, BucketWidth, Query, QuerySpec, RangeRow, RawRow, ResultSet,
    SensorBucketRow, TimeRange,
};

const MEASUREMENT: &str = TABLE;

pub struct InfluxBackend {
    info: ConnectionInfo,
    query_timeout: Duration,
}

impl InfluxBackend {
    pub fn new(info: ConnectionInfo, query_timeout: Duration) -> Self {
        InfluxBackend {
            info,
            query_timeout,
        }
    }
}

impl Backend for InfluxBackend {
    fn target(&self) -> TargetDatabase {
        TargetDatabase::InfluxDB
    }

    fn connect(&self) -> Result<Box<dyn Connection>> {
        let connect_err = |message: String| AdapterError::Connect {
            target: TargetDatabase::InfluxDB,
            message,
        };
        let client = Client::builder()
            .timeout(self.query_timeout)
            .connect_timeout(Duration::from_secs(10))
            .build()
            .map_err(|e| connect_err(e.to_string()))?;
        let mut conn = InfluxConnection {
            client,
            base: format!(
                "http://{}:{}",
                self.info.host,
                port_or_default(&self.info, TargetDatabase::InfluxDB)
            ),
            org: self
                .info
                .organization
                .clone()
                .unwrap_or_else(|| "tsbench".into()),
            bucket: self.info.database.clone(),
            token: self.info.token.clone().unwrap_or_default(),
            query_timeout: self.query_timeout,
        };
        conn.probe().map_err(|e| connect_err(e.to_string()))?;
        Ok(Box::new(conn))
    }
}

struct InfluxConnection {
    client: Client,
    base: String,
    org: String,
    bucket: String,
    token: String,
    query_timeout: Duration,
}

fn transport(e: reqwest::Error, timeout: Duration) -> AdapterError {
    if e.is_timeout() {
        AdapterError::Timeout(timeout)
    } else {
        AdapterError::Transport(e.to_string())
    }
}

fn check(resp: Response) -> Result<Response> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let body = resp.text().unwrap_or_default();
    let message = serde_json::from_str::<Value>(&body)
        .ok()
        .and_then(|v| v.get("message").and_then(Value::as_str).map(str::to_string))
        .unwrap_or(body);
    let message = format!("HTTP {status}: {message}");
    if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
        Err(AdapterError::Transport(message))
    } else {
        Err(AdapterError::Rejected(message))
    }
}

/// Encodes a batch as line protocol, one point per line.
pub fn line_protocol(batch: &[SensorRecord]) -> String {
    use std::fmt::Write;
    let mut body = String::with_capacity(batch.len() * 48);
    for r in batch {
        // `{}` on f64 prints the shortest text that parses back to the same value.
        let _ = writeln!(
            body,
            "{MEASUREMENT},sensor_id={} value={} {}",
            r.sensor_id, r.value, r.timestamp_ms
        );
    }
    body
}

fn flux_time(ms: i64) -> String {
    DateTime::from_timestamp_millis(ms)
        .expect("timestamp within chrono range")
        .to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn flux_float(v: f64) -> String {
    format!("float(v: \"{v:?}\")")
}

fn agg_call(agg: AggFunc) -> &'static str {
    match agg {
        AggFunc::Average => "mean()",
        AggFunc::StdDev => "stddev(mode: \"sample\")",
        AggFunc::Min => "min()",
        AggFunc::Max => "max()",
    }
}

fn source(bucket: &str, range: TimeRange, sensors: &[u64]) -> String {
    let filter = sensors
        .iter()
        .map(|s| format!("r.sensor_id == \"{s}\""))
        .collect::<Vec<_>>()
        .join(" or ");
    format!(
        "from(bucket: \"{bucket}\")\n  |> range(start: {}, stop: {})\n  |> filter(fn: (r) => r._measurement == \"{MEASUREMENT}\" and r._field == \"value\" and ({filter}))",
        flux_time(range.start_ms),
        flux_time(range.end_ms)
    )
}

fn with_bucket(width: BucketWidth) -> String {
    let ns = width.millis() * 1_000_000;
    format!("\n  |> map(fn: (r) => ({{r with bucket: int(v: r._time) / {ns} * {ns}}}))")
}

/// Flux script for one query.
pub fn flux_query(bucket: &str, spec: &QuerySpec) -> String {
    let range = spec.range;
    match &spec.query {
        Query::RawFetch { sensors } => format!(
            "{}\n  |> keep(columns: [\"_time\", \"sensor_id\", \"_value\"])\n  |> group()",
            source(bucket, range, sensors)
        ),
        Query::OutOfRange {
            sensor,
            bucket: width,
            min_value,
            max_value,
        } => format!(
            "data = {}{}\n  |> group(columns: [\"bucket\"])\n\
             mx = data |> max() |> keep(columns: [\"bucket\", \"_value\"])\n\
             mn = data |> min() |> keep(columns: [\"bucket\", \"_value\"])\n\
             join(tables: {{mx: mx, mn: mn}}, on: [\"bucket\"])\n  \
             |> filter(fn: (r) => r._value_mn < {} or r._value_mx > {})\n  \
             |> keep(columns: [\"bucket\", \"_value_mx\", \"_value_mn\"])\n  |> group()",
            source(bucket, range, &[*sensor]),
            with_bucket(*width),
            flux_float(*min_value),
            flux_float(*max_value)
        ),
        Query::Aggregate { sensors, agg } => format!(
            "{}\n  |> group()\n  |> {}\n  |> keep(columns: [\"_value\"])",
            source(bucket, range, sensors),
            agg_call(*agg)
        ),
        Query::Downsample {
            sensors,
            bucket: width,
            agg,
        } => format!(
            "{}{}\n  |> group(columns: [\"bucket\", \"sensor_id\"])\n  |> {}\n  |> keep(columns: [\"bucket\", \"sensor_id\", \"_value\"])\n  |> group()",
            source(bucket, range, sensors),
            with_bucket(*width),
            agg_call(*agg)
        ),
        Query::CompareDownsampled {
            first,
            second,
            bucket: width,
            agg,
            comp: _,
        } => {
            let side = |sensor: u64| {
                format!(
                    "{}{}\n  |> group(columns: [\"bucket\"])\n  |> {}\n  |> keep(columns: [\"bucket\", \"_value\"])",
                    source(bucket, range, &[sensor]),
                    with_bucket(*width),
                    agg_call(*agg)
                )
            };
            format!(
                "s1 = {}\ns2 = {}\njoin(tables: {{s1: s1, s2: s2}}, on: [\"bucket\"])\n  \
                 |> map(fn: (r) => ({{bucket: r.bucket, _value: r._value_s1 - r._value_s2}}))\n  |> group()",
                side(*first),
                side(*second)
            )
        }
    }
}

/// Parses the CSV returned by `/api/v2/query` without annotations.
///
/// Each table starts with its own header row; tables are separated by blank lines.
pub fn parse_flux_csv(body: &str) -> Result<Vec<HashMap<String, String>>> {
    let mut rows = Vec::new();
    let normalized = body.replace("\r\n", "\n");
    for block in normalized.split("\n\n") {
        if block.trim().is_empty() {
            continue;
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(block.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| AdapterError::Protocol(e.to_string()))?
            .clone();
        if headers.iter().any(|h| h == "error") && headers.iter().any(|h| h == "reference") {
            let detail = reader
                .records()
                .next()
                .and_then(|r| r.ok())
                .map(|r| r.iter().collect::<Vec<_>>().join(" "))
                .unwrap_or_default();
            return Err(AdapterError::Rejected(detail));
        }
        for record in reader.records() {
            let record = record.map_err(|e| AdapterError::Protocol(e.to_string()))?;
            rows.push(
                headers
                    .iter()
                    .zip(record.iter())
                    .filter(|(h, _)| !h.is_empty())
                    .map(|(h, v)| (h.to_string(), v.to_string()))
                    .collect(),
            );
        }
    }
    Ok(rows)
}

fn col<'a>(row: &'a HashMap<String, String>, name: &str) -> Result<&'a str> {
    row.get(name)
        .map(String::as_str)
        .ok_or_else(|| AdapterError::Protocol(format!("missing column `{name}`")))
}

fn parse_num<T: std::str::FromStr>(row: &HashMap<String, String>, name: &str) -> Result<T> {
    let text = col(row, name)?;
    text.parse()
        .map_err(|_| AdapterError::Protocol(format!("column `{name}`: cannot parse `{text}`")))
}

fn parse_opt_float(row: &HashMap<String, String>, name: &str) -> Result<Option<f64>> {
    let text = col(row, name)?;
    if text.is_empty() {
        return Ok(None);
    }
    let v: f64 = text
        .parse()
        .map_err(|_| AdapterError::Protocol(format!("column `{name}`: cannot parse `{text}`")))?;
    Ok(Some(v).filter(|x| x.is_finite()))
}

fn bucket_ms(row: &HashMap<String, String>) -> Result<i64> {
    Ok(parse_num::<i64>(row, "bucket")? / 1_000_000)
}

/// Converts parsed Flux rows into the result shape of `spec`.
pub fn decode_result(spec: &QuerySpec, rows: &[HashMap<String, String>]) -> Result<ResultSet> {
    let mut result = match &spec.query {
        Query::RawFetch { .. } => ResultSet::Raw(
            rows.iter()
                .map(|r| {
                    let t = col(r, "_time")?;
                    let ts = DateTime::parse_from_rfc3339(t)
                        .map_err(|e| AdapterError::Protocol(format!("_time `{t}`: {e}")))?;
                    Ok(RawRow {
                        timestamp_ms: ts.timestamp_millis(),
                        sensor_id: parse_num(r, "sensor_id")?,
                        value: parse_num(r, "_value")?,
                    })
                })
                .collect::<Result<_>>()?,
        ),
        Query::OutOfRange { .. } => ResultSet::OutOfRange(
            rows.iter()
                .map(|r| {
                    Ok(RangeRow {
                        interval_start_ms: bucket_ms(r)?,
                        max: parse_num(r, "_value_mx")?,
                        min: parse_num(r, "_value_mn")?,
                    })
                })
                .collect::<Result<_>>()?,
        ),
        Query::Aggregate { .. } => ResultSet::Aggregate(match rows.first() {
            Some(r) => parse_opt_float(r, "_value")?,
            None => None,
        }),
        Query::Downsample { .. } => ResultSet::Downsampled(
            rows.iter()
                .map(|r| {
                    Ok(SensorBucketRow {
                        interval_start_ms: bucket_ms(r)?,
                        sensor_id: parse_num(r, "sensor_id")?,
                        value: parse_opt_float(r, "_value")?,
                    })
                })
                .collect::<Result<_>>()?,
        ),
        Query::CompareDownsampled { .. } => ResultSet::Compared(
            rows.iter()
                .map(|r| {
                    Ok(BucketRow {
                        interval_start_ms: bucket_ms(r)?,
                        value: parse_opt_float(r, "_value")?,
                    })
                })
                .collect::<Result<_>>()?,
        ),
    };
    result.canonicalize();
    Ok(result)
}

impl InfluxConnection {
    fn auth(&self, req: RequestBuilder) -> RequestBuilder {
        if self.token.is_empty() {
            req
        } else {
            req.header("Authorization", format!("Token {}", self.token))
        }
    }

    fn send(&self, req: RequestBuilder) -> Result<Response> {
        let resp = self
            .auth(req)
            .send()
            .map_err(|e| transport(e, self.query_timeout))?;
        check(resp)
    }

    fn json(&self, req: RequestBuilder) -> Result<Value> {
        self.send(req)?
            .json::<Value>()
            .map_err(|e| AdapterError::Protocol(e.to_string()))
    }

    fn flux(&self, script: &str) -> Result<Vec<HashMap<String, String>>> {
        let body = json!({
            "query": script,
            "type": "flux",
            "dialect": {"header": true, "annotations": [], "delimiter": ","}
        });
        let text = self
            .send(
                self.client
                    .post(format!("{}/api/v2/query", self.base))
                    .query(&[("org", self.org.as_str())])
                    .header("Accept", "application/csv")
                    .json(&body),
            )?
            .text()
            .map_err(|e| transport(e, self.query_timeout))?;
        parse_flux_csv(&text)
    }

    fn first_id(value: &Value, list: &str) -> Option<String> {
        value
            .get(list)?
            .as_array()?
            .first()?
            .get("id")?
            .as_str()
            .map(str::to_string)
    }
}

impl Connection for InfluxConnection {
    fn server_version(&mut self) -> Result<String> {
        let health = self.json(self.client.get(format!("{}/health", self.base)))?;
        let version = health
            .get("version")
            .and_then(Value::as_str)
            .unwrap_or("unknown");
        Ok(format!("InfluxDB {version}"))
    }

    fn init_schema(&mut self, _sensor_number: u64) -> Result<()> {
        let found = self.json(
            self.client
                .get(format!("{}/api/v2/buckets", self.base))
                .query(&[("org", self.org.as_str()), ("name", self.bucket.as_str())]),
        )?;
        if let Some(id) = Self::first_id(&found, "buckets") {
            self.send(self.client.delete(format!("{}/api/v2/buckets/{id}", self.base)))?;
        }
        let orgs = self.json(
            self.client
                .get(format!("{}/api/v2/orgs", self.base))
                .query(&[("org", self.org.as_str())]),
        )?;
        let org_id = Self::first_id(&orgs, "orgs")
            .ok_or_else(|| AdapterError::Rejected(format!("organization `{}` not found", self.org)))?;
        self.send(
            self.client
                .post(format!("{}/api/v2/buckets", self.base))
                .json(&json!({"orgID": org_id, "name": self.bucket, "retentionRules": []})),
        )?;
        Ok(())
    }

    fn insert_batch(&mut self, batch: &[SensorRecord]) -> Result<InsertReceipt> {
        if batch.is_empty() {
            return Err(AdapterError::EmptyBatch);
        }
        let body = line_protocol(batch);
        let req = self
            .client
            .post(format!("{}/api/v2/write", self.base))
            .query(&[
                ("org", self.org.as_str()),
                ("bucket", self.bucket.as_str()),
                ("precision", "ms"),
            ])
            .header("Content-Type", "text/plain; charset=utf-8")
            .body(body);
        let start = Instant::now();
        self.send(req)?;
        Ok(InsertReceipt {
            records_written: batch.len(),
            elapsed: start.elapsed(),
        })
    }

    fn execute_query(&mut self, spec: &QuerySpec) -> Result<(ResultSet, Duration)> {
        spec.validate()
            .map_err(|e| AdapterError::Rejected(e.to_string()))?;
        let script = flux_query(&self.bucket, spec);
        let start = Instant::now();
        let rows = self.flux(&script)?;
        let result = decode_result(spec, &rows)?;
        Ok((result, start.elapsed()))
    }

    fn row_count(&mut self) -> Result<u64> {
        let script = format!(
            "from(bucket: \"{}\")\n  |> range(start: 1970-01-01T00:00:00Z, stop: 2262-01-01T00:00:00Z)\n  |> filter(fn: (r) => r._measurement == \"{MEASUREMENT}\" and r._field == \"value\")\n  |> group()\n  |> count()",
            self.bucket
        );
        let rows = self.flux(&script)?;
        match rows.first() {
            Some(r) => parse_num(r, "_value"),
            None => Ok(0),
        }
    }

    fn probe(&mut self) -> Result<()> {
        self.send(self.client.get(format!("{}/ping", self.base)))?;
        Ok(())
    }
}
