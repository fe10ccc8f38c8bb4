//! In-process backend for running the harness without a server.
//!
//! Records are kept per sensor in timestamp order, and queries are answered
//! by binary-searching each sensor's range and folding values in a single
//! streaming pass. This is deliberately a different evaluation path from
//! [`crate::reference::reference_evaluate`], so the two can check each other.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use super::{AdapterError, Backend, Connection, InsertReceipt, Result};
use crate::config::TargetDatabase;
use crate::generator::SensorRecord;
use crate::query::{
    AggFunc, BucketRow, BucketWidth, Query, QuerySpec, RangeRow, RawRow, ResultSet,
    SensorBucketRow, TimeRange,
};

#[derive(Debug, Default)]
struct Store {
    series: HashMap<u64, Vec<(i64, f64)>>,
    rows: u64,
}

impl Store {
    fn insert(&mut self, batch: &[SensorRecord]) {
        for r in batch {
            let points = self.series.entry(r.sensor_id).or_default();
            match points.last() {
                Some(&(last, _)) if last > r.timestamp_ms => {
                    let at = points.partition_point(|&(t, _)| t <= r.timestamp_ms);
                    points.insert(at, (r.timestamp_ms, r.value));
                }
                _ => points.push((r.timestamp_ms, r.value)),
            }
        }
        self.rows += batch.len() as u64;
    }

    fn window(&self, sensor: u64, range: TimeRange) -> &[(i64, f64)] {
        let Some(points) = self.series.get(&sensor) else {
            return &[];
        };
        let lo = points.partition_point(|&(t, _)| t < range.start_ms);
        let hi = points.partition_point(|&(t, _)| t < range.end_ms);
        &points[lo..hi]
    }

    /// Aggregates one sensor's window per bucket, in bucket order.
    fn buckets(
        &self,
        sensor: u64,
        range: TimeRange,
        bucket: BucketWidth,
        agg: AggFunc,
    ) -> Vec<(i64, Fold)> {
        let mut out: Vec<(i64, Fold)> = Vec::new();
        for &(t, v) in self.window(sensor, range) {
            let start = bucket.truncate(t);
            match out.last_mut() {
                Some((s, fold)) if *s == start => fold.push(v),
                _ => {
                    let mut fold = Fold::new(agg);
                    fold.push(v);
                    out.push((start, fold));
                }
            }
        }
        out
    }

    fn evaluate(&self, spec: &QuerySpec) -> ResultSet {
        let range = spec.range;
        let mut result = match &spec.query {
            Query::RawFetch { sensors } => {
                let mut rows = Vec::new();
                for &sensor in dedup(sensors).iter() {
                    rows.extend(self.window(sensor, range).iter().map(|&(t, v)| RawRow {
                        timestamp_ms: t,
                        sensor_id: sensor,
                        value: v,
                    }));
                }
                ResultSet::Raw(rows)
            }
            Query::OutOfRange {
                sensor,
                bucket,
                min_value,
                max_value,
            } => {
                let mut rows = Vec::new();
                for (start, fold) in self.buckets(*sensor, range, *bucket, AggFunc::Min) {
                    if fold.min < *min_value || fold.max > *max_value {
                        rows.push(RangeRow {
                            interval_start_ms: start,
                            max: fold.max,
                            min: fold.min,
                        });
                    }
                }
                ResultSet::OutOfRange(rows)
            }
            Query::Aggregate { sensors, agg } => {
                let mut fold = Fold::new(*agg);
                for &sensor in dedup(sensors).iter() {
                    for &(_, v) in self.window(sensor, range) {
                        fold.push(v);
                    }
                }
                ResultSet::Aggregate(fold.finish())
            }
            Query::Downsample {
                sensors,
                bucket,
                agg,
            } => {
                let mut rows = Vec::new();
                for &sensor in dedup(sensors).iter() {
                    rows.extend(self.buckets(sensor, range, *bucket, *agg).into_iter().map(
                        |(start, fold)| SensorBucketRow {
                            interval_start_ms: start,
                            sensor_id: sensor,
                            value: fold.finish(),
                        },
                    ));
                }
                ResultSet::Downsampled(rows)
            }
            Query::CompareDownsampled {
                first,
                second,
                bucket,
                agg,
                comp,
            } => {
                let left = self.buckets(*first, range, *bucket, *agg);
                let right = self.buckets(*second, range, *bucket, *agg);
                // Merge join on bucket start; both sides are sorted.
                let mut rows = Vec::new();
                let (mut i, mut j) = (0, 0);
                while i < left.len() && j < right.len() {
                    let (ls, rs) = (left[i].0, right[j].0);
                    if ls < rs {
                        i += 1;
                    } else if rs < ls {
                        j += 1;
                    } else {
                        let value = left[i]
                            .1
                            .finish()
                            .zip(right[j].1.finish())
                            .map(|(a, b)| comp.apply(a, b));
                        rows.push(BucketRow {
                            interval_start_ms: ls,
                            value,
                        });
                        i += 1;
                        j += 1;
                    }
                }
                ResultSet::Compared(rows)
            }
        };
        result.canonicalize();
        result
    }
}

fn dedup(sensors: &[u64]) -> Vec<u64> {
    let mut s = sensors.to_vec();
    s.sort_unstable();
    s.dedup();
    s
}

/// Streaming aggregate: Welford's update for mean and variance, plus min/max.
#[derive(Debug, Clone, Copy)]
struct Fold {
    agg: AggFunc,
    n: u64,
    mean: f64,
    m2: f64,
    min: f64,
    max: f64,
}

impl Fold {
    fn new(agg: AggFunc) -> Self {
        Fold {
            agg,
            n: 0,
            mean: 0.0,
            m2: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    fn push(&mut self, v: f64) {
        self.n += 1;
        let delta = v - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (v - self.mean);
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    fn finish(&self) -> Option<f64> {
        if self.n == 0 {
            return None;
        }
        match self.agg {
            AggFunc::Average => Some(self.mean),
            AggFunc::StdDev if self.n < 2 => None,
            AggFunc::StdDev => Some((self.m2 / (self.n - 1) as f64).sqrt()),
            AggFunc::Min => Some(self.min),
            AggFunc::Max => Some(self.max),
        }
    }
}

/// Shared in-memory table; every connection sees the same data.
#[derive(Debug, Clone, Default)]
pub struct MemoryBackend {
    store: Arc<RwLock<Store>>,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every stored record, ordered by sensor then timestamp.
    pub fn records(&self) -> Vec<SensorRecord> {
        let store = self.store.read().expect("store lock");
        let mut sensors: Vec<_> = store.series.keys().copied().collect();
        sensors.sort_unstable();
        sensors
            .into_iter()
            .flat_map(|s| {
                store.series[&s].iter().map(move |&(t, v)| SensorRecord {
                    timestamp_ms: t,
                    sensor_id: s,
                    value: v,
                })
            })
            .collect()
    }

    pub fn len(&self) -> u64 {
        self.store.read().expect("store lock").rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Backend for MemoryBackend {
    fn target(&self) -> TargetDatabase {
        TargetDatabase::Reference
    }

    fn connect(&self) -> Result<Box<dyn Connection>> {
        Ok(Box::new(MemoryConnection {
            store: Arc::clone(&self.store),
        }))
    }
}

struct MemoryConnection {
    store: Arc<RwLock<Store>>,
}

impl Connection for MemoryConnection {
    fn server_version(&mut self) -> Result<String> {
        Ok(format!("reference-memory {}", env!("CARGO_PKG_VERSION")))
    }

    fn init_schema(&mut self, _sensor_number: u64) -> Result<()> {
        *self.store.write().expect("store lock") = Store::default();
        Ok(())
    }

    fn insert_batch(&mut self, batch: &[SensorRecord]) -> Result<InsertReceipt> {
        if batch.is_empty() {
            return Err(AdapterError::EmptyBatch);
        }
        let start = Instant::now();
        self.store.write().expect("store lock").insert(batch);
        Ok(InsertReceipt {
            records_written: batch.len(),
            elapsed: start.elapsed(),
        })
    }

    fn execute_query(&mut self, spec: &QuerySpec) -> Result<(ResultSet, Duration)> {
        spec.validate()
            .map_err(|e| AdapterError::Rejected(e.to_string()))?;
        let start = Instant::now();
        let result = self.store.read().expect("store lock").evaluate(spec);
        Ok((result, start.elapsed()))
    }

    fn row_count(&mut self) -> Result<u64> {
        Ok(self.store.read().expect("store lock").rows)
    }

    fn probe(&mut self) -> Result<()> {
        Ok(())
    }
}
