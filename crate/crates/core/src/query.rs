//! The five query workloads, their parameters and their result shapes.
//!
//! Every time range is half-open, `[start, end)`, in milliseconds since the
//! Unix epoch. Buckets are aligned to the epoch: a timestamp `t` belongs to
//! the bucket starting at `t - t.rem_euclid(width)`.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QueryType {
    Q1,
    Q2,
    Q3,
    Q4,
    Q5,
}

impl QueryType {
    pub const ALL: [QueryType; 5] = [
        QueryType::Q1,
        QueryType::Q2,
        QueryType::Q3,
        QueryType::Q4,
        QueryType::Q5,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryType::Q1 => "Q1",
            QueryType::Q2 => "Q2",
            QueryType::Q3 => "Q3",
            QueryType::Q4 => "Q4",
            QueryType::Q5 => "Q5",
        }
    }
}

impl fmt::Display for QueryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QueryType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QueryType::ALL
            .into_iter()
            .find(|q| q.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown query type `{s}`, expected Q1..Q5"))
    }
}

/// Aggregation applied to `value` inside a time range or bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum AggFunc {
    #[default]
    Average,
    /// Sample standard deviation (n - 1 denominator), undefined below two values.
    StdDev,
    Min,
    Max,
}

impl AggFunc {
    pub fn as_str(self) -> &'static str {
        match self {
            AggFunc::Average => "Average",
            AggFunc::StdDev => "StdDev",
            AggFunc::Min => "Min",
            AggFunc::Max => "Max",
        }
    }
}

impl fmt::Display for AggFunc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggFunc {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "average" | "avg" | "mean" => Ok(AggFunc::Average),
            "stddev" | "std" => Ok(AggFunc::StdDev),
            "min" => Ok(AggFunc::Min),
            "max" => Ok(AggFunc::Max),
            _ => Err(format!(
                "unknown aggregation `{s}`, expected Average, StdDev, Min or Max"
            )),
        }
    }
}

/// Combines two down-sampled values sharing a bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum CompFunc {
    #[default]
    Subtract,
}

impl CompFunc {
    pub fn as_str(self) -> &'static str {
        match self {
            CompFunc::Subtract => "Subtract",
        }
    }

    pub fn apply(self, first: f64, second: f64) -> f64 {
        match self {
            CompFunc::Subtract => first - second,
        }
    }
}

impl fmt::Display for CompFunc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CompFunc {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "subtract" | "sub" => Ok(CompFunc::Subtract),
            _ => Err(format!("unknown comparison `{s}`, expected Subtract")),
        }
    }
}

/// Half-open interval `[start_ms, end_ms)` in epoch milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TimeRange {
    pub start_ms: i64,
    pub end_ms: i64,
}

impl TimeRange {
    pub fn new(start_ms: i64, end_ms: i64) -> Self {
        TimeRange { start_ms, end_ms }
    }

    #[inline]
    pub fn contains(&self, ts_ms: i64) -> bool {
        ts_ms >= self.start_ms && ts_ms < self.end_ms
    }
}

/// Bucket width in milliseconds, always positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BucketWidth(i64);

impl BucketWidth {
    pub fn from_millis(ms: i64) -> Result<Self, QueryError> {
        if ms <= 0 {
            return Err(QueryError::InvalidBucket(ms));
        }
        Ok(BucketWidth(ms))
    }

    pub fn from_duration(d: Duration) -> Result<Self, QueryError> {
        let ms = i64::try_from(d.as_millis()).unwrap_or(i64::MAX);
        Self::from_millis(ms)
    }

    pub fn millis(self) -> i64 {
        self.0
    }

    /// Start of the epoch-aligned bucket containing `ts_ms`.
    #[inline]
    pub fn truncate(self, ts_ms: i64) -> i64 {
        ts_ms - ts_ms.rem_euclid(self.0)
    }
}

/// What to compute; each variant carries exactly the parameters its query needs.
#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    /// Q1: raw rows of the filtered sensors.
    RawFetch { sensors: Vec<u64> },
    /// Q2: buckets of one sensor whose min or max leaves `[min_value, max_value]`.
    OutOfRange {
        sensor: u64,
        bucket: BucketWidth,
        min_value: f64,
        max_value: f64,
    },
    /// Q3: one aggregate over all filtered sensors together.
    Aggregate { sensors: Vec<u64>, agg: AggFunc },
    /// Q4: per bucket and sensor aggregate.
    Downsample {
        sensors: Vec<u64>,
        bucket: BucketWidth,
        agg: AggFunc,
    },
    /// Q5: two sensors down-sampled, joined on bucket and combined.
    CompareDownsampled {
        first: u64,
        second: u64,
        bucket: BucketWidth,
        agg: AggFunc,
        comp: CompFunc,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub range: TimeRange,
    pub query: Query,
}

#[derive(Debug, Error, PartialEq)]
pub enum QueryError {
    #[error("time range start {start} must be before end {end}")]
    EmptyRange { start: i64, end: i64 },
    #[error("bucket width must be positive, got {0} ms")]
    InvalidBucket(i64),
    #[error("range query needs min_value < max_value, got [{0}, {1}]")]
    InvalidBounds(f64, f64),
    #[error("{0} requires at least one sensor")]
    NoSensors(QueryType),
}

impl QuerySpec {
    pub fn new(range: TimeRange, query: Query) -> Result<Self, QueryError> {
        let spec = QuerySpec { range, query };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), QueryError> {
        if self.range.start_ms >= self.range.end_ms {
            return Err(QueryError::EmptyRange {
                start: self.range.start_ms,
                end: self.range.end_ms,
            });
        }
        match &self.query {
            Query::RawFetch { sensors }
            | Query::Aggregate { sensors, .. }
            | Query::Downsample { sensors, .. }
                if sensors.is_empty() =>
            {
                Err(QueryError::NoSensors(self.query_type()))
            }
            Query::OutOfRange {
                min_value,
                max_value,
                ..
            } if !(min_value < max_value) => Err(QueryError::InvalidBounds(*min_value, *max_value)),
            _ => Ok(()),
        }
    }

    pub fn query_type(&self) -> QueryType {
        match self.query {
            Query::RawFetch { .. } => QueryType::Q1,
            Query::OutOfRange { .. } => QueryType::Q2,
            Query::Aggregate { .. } => QueryType::Q3,
            Query::Downsample { .. } => QueryType::Q4,
            Query::CompareDownsampled { .. } => QueryType::Q5,
        }
    }

    /// Every sensor id the query touches, in filter order.
    pub fn sensors(&self) -> Vec<u64> {
        match &self.query {
            Query::RawFetch { sensors }
            | Query::Aggregate { sensors, .. }
            | Query::Downsample { sensors, .. } => sensors.clone(),
            Query::OutOfRange { sensor, .. } => vec![*sensor],
            Query::CompareDownsampled { first, second, .. } => vec![*first, *second],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRow {
    pub timestamp_ms: i64,
    pub sensor_id: u64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeRow {
    pub interval_start_ms: i64,
    pub max: f64,
    pub min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorBucketRow {
    pub interval_start_ms: i64,
    pub sensor_id: u64,
    /// `None` where the aggregate is undefined (standard deviation of one value).
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketRow {
    pub interval_start_ms: i64,
    pub value: Option<f64>,
}

/// Rows returned by one query, already in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub enum ResultSet {
    Raw(Vec<RawRow>),
    OutOfRange(Vec<RangeRow>),
    /// SQL aggregates without GROUP BY return exactly one row, NULL on no input.
    Aggregate(Option<f64>),
    Downsampled(Vec<SensorBucketRow>),
    Compared(Vec<BucketRow>),
}

impl ResultSet {
    pub fn row_count(&self) -> usize {
        match self {
            ResultSet::Raw(r) => r.len(),
            ResultSet::OutOfRange(r) => r.len(),
            ResultSet::Aggregate(_) => 1,
            ResultSet::Downsampled(r) => r.len(),
            ResultSet::Compared(r) => r.len(),
        }
    }

    pub fn query_type(&self) -> QueryType {
        match self {
            ResultSet::Raw(_) => QueryType::Q1,
            ResultSet::OutOfRange(_) => QueryType::Q2,
            ResultSet::Aggregate(_) => QueryType::Q3,
            ResultSet::Downsampled(_) => QueryType::Q4,
            ResultSet::Compared(_) => QueryType::Q5,
        }
    }

    /// Sorts rows into canonical `(interval_start, sensor_id)` order.
    ///
    /// Raw rows sharing a timestamp and sensor are ordered by value so that
    /// duplicate points compare deterministically.
    pub fn canonicalize(&mut self) {
        match self {
            ResultSet::Raw(rows) => rows.sort_by(|a, b| {
                (a.timestamp_ms, a.sensor_id)
                    .cmp(&(b.timestamp_ms, b.sensor_id))
                    .then(a.value.total_cmp(&b.value))
            }),
            ResultSet::OutOfRange(rows) => rows.sort_by_key(|r| r.interval_start_ms),
            ResultSet::Aggregate(_) => {}
            ResultSet::Downsampled(rows) => {
                rows.sort_by_key(|r| (r.interval_start_ms, r.sensor_id))
            }
            ResultSet::Compared(rows) => rows.sort_by_key(|r| r.interval_start_ms),
        }
    }

    /// Compares two result sets: timestamps and ids exactly, floats to `rel_tol`.
    pub fn equivalent(&self, other: &ResultSet, rel_tol: f64) -> Result<(), Mismatch> {
        fn rows<T>(
            a: &[T],
            b: &[T],
            mut eq: impl FnMut(&T, &T) -> Result<(), String>,
        ) -> Result<(), Mismatch> {
            if a.len() != b.len() {
                return Err(Mismatch::RowCount(a.len(), b.len()));
            }
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                eq(x, y).map_err(|detail| Mismatch::Row { index: i, detail })?;
            }
            Ok(())
        }
        let f = |name: &str, x: f64, y: f64| {
            if floats_close(x, y, rel_tol) {
                Ok(())
            } else {
                Err(format!("{name}: {x} vs {y}"))
            }
        };
        let opt = |name: &str, x: Option<f64>, y: Option<f64>| match (x, y) {
            (Some(x), Some(y)) => f(name, x, y),
            (None, None) => Ok(()),
            _ => Err(format!("{name}: {x:?} vs {y:?}")),
        };
        let key = |name: &str, x: i64, y: i64| {
            if x == y {
                Ok(())
            } else {
                Err(format!("{name}: {x} vs {y}"))
            }
        };
        match (self, other) {
            (ResultSet::Raw(a), ResultSet::Raw(b)) => rows(a, b, |x, y| {
                key("timestamp", x.timestamp_ms, y.timestamp_ms)?;
                key("sensor_id", x.sensor_id as i64, y.sensor_id as i64)?;
                f("value", x.value, y.value)
            }),
            (ResultSet::OutOfRange(a), ResultSet::OutOfRange(b)) => rows(a, b, |x, y| {
                key("interval_start", x.interval_start_ms, y.interval_start_ms)?;
                f("max", x.max, y.max)?;
                f("min", x.min, y.min)
            }),
            (ResultSet::Aggregate(a), ResultSet::Aggregate(b)) => {
                opt("aggregate", *a, *b).map_err(|detail| Mismatch::Row { index: 0, detail })
            }
            (ResultSet::Downsampled(a), ResultSet::Downsampled(b)) => rows(a, b, |x, y| {
                key("interval_start", x.interval_start_ms, y.interval_start_ms)?;
                key("sensor_id", x.sensor_id as i64, y.sensor_id as i64)?;
                opt("value", x.value, y.value)
            }),
            (ResultSet::Compared(a), ResultSet::Compared(b)) => rows(a, b, |x, y| {
                key("interval_start", x.interval_start_ms, y.interval_start_ms)?;
                opt("value", x.value, y.value)
            }),
            (a, b) => Err(Mismatch::Shape(a.query_type(), b.query_type())),
        }
    }
}

/// Relative comparison with a floor of 1.0 on the scale, so values near zero
/// (differences of two close averages) are compared absolutely.
pub fn floats_close(a: f64, b: f64, rel_tol: f64) -> bool {
    if a == b {
        return true;
    }
    let scale = a.abs().max(b.abs()).max(1.0);
    (a - b).abs() <= rel_tol * scale
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Mismatch {
    #[error("result shapes differ: {0} vs {1}")]
    Shape(QueryType, QueryType),
    #[error("row counts differ: {0} vs {1}")]
    RowCount(usize, usize),
    #[error("row {index} differs: {detail}")]
    Row { index: usize, detail: String },
}
