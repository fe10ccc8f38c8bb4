//! Ingestion rates and query-latency statistics.

use std::time::Duration;

use thiserror::Error;

use crate::engine::LatencySample;

pub const MINUTE: Duration = Duration::from_secs(60);

/// Bytes per record: 8-byte timestamp, 8-byte sensor id, 8-byte double.
pub const DEFAULT_RECORD_SIZE: u64 = 24;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no successful samples to summarize")]
    NoSamples,
    #[error("wall time must be positive")]
    ZeroWallTime,
}

/// Latency summary in the Min / Mean / 95% / Max / Std. Dev. layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryStats {
    pub n: usize,
    pub min: Duration,
    /// Nearest-rank 95th percentile: the `ceil(0.95 n)`-th smallest sample.
    pub p95: Duration,
    pub max: Duration,
    pub mean_ms: f64,
    /// Sample standard deviation (n - 1 denominator); zero for one sample.
    pub stddev_ms: f64,
}

pub fn millis(d: Duration) -> f64 {
    d.as_nanos() as f64 / 1e6
}

impl QueryStats {
    pub fn min_ms(&self) -> f64 {
        millis(self.min)
    }

    pub fn p95_ms(&self) -> f64 {
        millis(self.p95)
    }

    pub fn max_ms(&self) -> f64 {
        millis(self.max)
    }

    /// Header matching [`QueryStats::table_row`].
    pub fn table_header() -> &'static str {
        "      n       Min.      Mean       95%      Max.  Std. Dev.  (ms)"
    }

    pub fn table_row(&self) -> String {
        format!(
            "{:>7} {:>10.2} {:>9.2} {:>9.2} {:>9.2} {:>10.2}",
            self.n,
            self.min_ms(),
            self.mean_ms,
            self.p95_ms(),
            self.max_ms(),
            self.stddev_ms
        )
    }
}

/// 1-based nearest rank of the 95th percentile among `n` samples.
pub fn p95_rank(n: usize) -> usize {
    (95 * n).div_ceil(100)
}

pub fn compute_stats(samples: &[Duration]) -> Result<QueryStats, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::NoSamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let total_ns: u128 = sorted.iter().map(Duration::as_nanos).sum();
    let mean_ns = total_ns as f64 / n as f64;
    let stddev_ns = if n < 2 {
        0.0
    } else {
        let ss: f64 = sorted
            .iter()
            .map(|d| {
                let dev = d.as_nanos() as f64 - mean_ns;
                dev * dev
            })
            .sum();
        (ss / (n - 1) as f64).sqrt()
    };
    Ok(QueryStats {
        n,
        min: sorted[0],
        p95: sorted[p95_rank(n) - 1],
        max: sorted[n - 1],
        mean_ms: mean_ns / 1e6,
        stddev_ms: stddev_ns / 1e6,
    })
}

/// Records per second over the whole run.
pub fn ingestion_rate(total_records: u64, wall_time: Duration) -> Result<f64, MetricsError> {
    if wall_time.is_zero() {
        return Err(MetricsError::ZeroWallTime);
    }
    Ok(total_records as f64 / wall_time.as_secs_f64())
}

/// Bytes per second for `rate` records per second of `record_size` bytes each.
pub fn throughput_bytes(rate: f64, record_size: u64) -> f64 {
    rate * record_size as f64
}

/// Megabytes as 10^6 bytes.
pub fn to_megabytes(bytes: f64) -> f64 {
    bytes / 1e6
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePoint {
    pub minute: usize,
    pub records: u64,
    /// Length of this bucket; a full minute except possibly the last one.
    pub length: Duration,
    pub rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RollingRateSeries {
    pub points: Vec<RatePoint>,
}

impl RollingRateSeries {
    /// Σ rate × bucket length, which reconstructs the record total.
    pub fn reconstructed_records(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.rate * p.length.as_secs_f64())
            .sum()
    }

    pub fn total_records(&self) -> u64 {
        self.points.iter().map(|p| p.records).sum()
    }
}

fn minute_of(offset: Duration) -> usize {
    // Buckets are (k min, (k+1) min]; completion exactly on a boundary
    // closes the earlier minute.
    if offset.is_zero() {
        0
    } else {
        ((offset.as_nanos() - 1) / MINUTE.as_nanos()) as usize
    }
}

/// One-minute rolling ingestion rate.
///
/// Records of each successful sample are attributed to the minute in which
/// the insert completed. The series spans `run_length` (extended to the last
/// completion if that is later); the trailing bucket is divided by its
/// actual length.
pub fn rolling_rate(samples: &[LatencySample], run_length: Duration) -> RollingRateSeries {
    let end = samples
        .iter()
        .filter(|s| !s.failed)
        .map(LatencySample::completion_offset)
        .max()
        .unwrap_or_default()
        .max(run_length);
    let buckets = minute_of(end) + 1;
    let mut records = vec![0u64; buckets];
    for s in samples.iter().filter(|s| !s.failed) {
        records[minute_of(s.completion_offset())] += s.records;
    }
    let points = records
        .into_iter()
        .enumerate()
        .map(|(minute, records)| {
            let start = MINUTE * minute as u32;
            let length = end.saturating_sub(start).min(MINUTE);
            // Only an all-zero run has a zero-length bucket.
            let rate = if length.is_zero() {
                0.0
            } else {
                records as f64 / length.as_secs_f64()
            };
            RatePoint {
                minute,
                records,
                length,
                rate,
            }
        })
        .collect();
    RollingRateSeries { points }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::SampleKind;

    fn ms(v: u64) -> Duration {
        Duration::from_millis(v)
    }

    fn insert(start: Duration, elapsed: Duration, records: u64) -> LatencySample {
        LatencySample {
            run: 0,
            client: 0,
            seq: 0,
            kind: SampleKind::Insert { batch_size: records as usize },
            start_offset: start,
            wall_start_ms: 0,
            elapsed,
            records,
            rows: 0,
            failed: false,
            warmup: false,
            error: None,
        }
    }

    #[test]
    fn singleton_stats() {
        let s = compute_stats(&[ms(100)]).unwrap();
        assert_eq!((s.min, s.p95, s.max), (ms(100), ms(100), ms(100)));
        assert_eq!(s.mean_ms, 100.0);
        assert_eq!(s.stddev_ms, 0.0);
    }

    #[test]
    fn four_samples() {
        // Expected values computed by hand: mean 2.5, variance (2.25+0.25+0.25+2.25)/3.
        let s = compute_stats(&[ms(3), ms(1), ms(4), ms(2)]).unwrap();
        assert_eq!(s.min, ms(1));
        assert_eq!(s.max, ms(4));
        assert_eq!(s.p95, ms(4));
        assert_eq!(s.mean_ms, 2.5);
        assert!((s.stddev_ms - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((s.stddev_ms - 1.2910).abs() < 1e-4);
    }

    #[test]
    fn constant_series() {
        let s = compute_stats(&vec![ms(5); 1000]).unwrap();
        assert_eq!(s.stddev_ms, 0.0);
        assert_eq!(s.p95, ms(5));
    }

    #[test]
    fn empty_is_error() {
        assert_eq!(compute_stats(&[]), Err(MetricsError::NoSamples));
    }

    #[test]
    fn p95_ranks() {
        assert_eq!(p95_rank(1), 1);
        assert_eq!(p95_rank(4), 4);
        assert_eq!(p95_rank(20), 19);
        assert_eq!(p95_rank(100), 95);
        assert_eq!(p95_rank(1000), 950);
    }

    #[test]
    fn rates() {
        assert_eq!(ingestion_rate(20_000, ms(100)).unwrap(), 200_000.0);
        assert_eq!(ingestion_rate(0, Duration::from_secs(10)).unwrap(), 0.0);
        assert_eq!(ingestion_rate(1, Duration::ZERO), Err(MetricsError::ZeroWallTime));
        let r = ingestion_rate(2_880_000_000, Duration::from_secs(2252)).unwrap();
        // Independent: 2.88e9 / 2252 by long division ~ 1278863.2
        assert!((r - 1_278_863.232_682).abs() < 1e-3);
    }

    #[test]
    fn throughput_in_megabytes() {
        assert!((to_megabytes(throughput_bytes(1_278_928.0, 24)) - 30.694_272).abs() < 1e-9);
        assert_eq!(throughput_bytes(0.0, 24), 0.0);
    }

    #[test]
    fn single_minute_bucket() {
        let samples: Vec<_> = (0..6).map(|i| insert(ms(i * 1000), ms(500), 100_000)).collect();
        let series = rolling_rate(&samples, MINUTE);
        assert_eq!(series.points.len(), 1);
        assert_eq!(series.points[0].rate, 10_000.0);
    }

    #[test]
    fn equal_minutes_equal_rates() {
        let samples: Vec<_> = (0..3)
            .map(|m| insert(MINUTE * m + ms(10), ms(20), 6000))
            .collect();
        let series = rolling_rate(&samples, MINUTE * 3);
        let rates: Vec<_> = series.points.iter().map(|p| p.rate).collect();
        assert_eq!(rates, vec![100.0, 100.0, 100.0]);
    }

    #[test]
    fn trailing_partial_minute_uses_actual_length() {
        let samples = vec![insert(ms(0), ms(10), 600), insert(MINUTE, ms(30_000), 300)];
        let series = rolling_rate(&samples, ms(90_000));
        assert_eq!(series.points.len(), 2);
        assert_eq!(series.points[1].length, ms(30_000));
        assert_eq!(series.points[1].rate, 10.0);
        assert_eq!(series.reconstructed_records(), 900.0);
    }

    #[test]
    fn boundary_completion_closes_earlier_minute() {
        let series = rolling_rate(&[insert(ms(59_000), ms(1000), 60)], MINUTE);
        assert_eq!(series.points.len(), 1);
        assert_eq!(series.points[0].records, 60);
    }

    #[test]
    fn failed_samples_do_not_count() {
        let mut bad = insert(ms(0), ms(10), 500);
        bad.failed = true;
        let series = rolling_rate(&[bad, insert(ms(0), ms(10), 60)], MINUTE);
        assert_eq!(series.total_records(), 60);
    }
}
