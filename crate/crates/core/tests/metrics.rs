use std::time::Duration;

use proptest::prelude::*;
use tsbench_core::engine::{LatencySample, SampleKind};
use tsbench_core::metrics::{compute_stats, rolling_rate, MINUTE};

/// Statistics straight from the definitions, using exact integer sums.
fn oracle(ns: &[u64]) -> (u64, u64, u64, f64, f64) {
    let mut sorted = ns.to_vec();
    sorted.sort();
    let n = sorted.len();
    // Smallest rank k with k / n >= 0.95.
    let k = (1..=n).find(|&k| 100 * k >= 95 * n).unwrap();
    let sum: u128 = sorted.iter().map(|&x| x as u128).sum();
    let sum_sq: u128 = sorted.iter().map(|&x| (x as u128) * (x as u128)).sum();
    let mean = sum as f64 / n as f64;
    let var = if n < 2 {
        0.0
    } else {
        (n as u128 * sum_sq - sum * sum) as f64 / (n as f64 * (n - 1) as f64)
    };
    (sorted[0], sorted[k - 1], sorted[n - 1], mean / 1e6, var.sqrt() / 1e6)
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn insert(start_us: u64, elapsed_us: u64, records: u64, failed: bool) -> LatencySample {
    LatencySample {
        run: 0,
        client: 0,
        seq: 0,
        kind: SampleKind::Insert {
            batch_size: records as usize,
        },
        start_offset: Duration::from_micros(start_us),
        wall_start_ms: 0,
        elapsed: Duration::from_micros(elapsed_us),
        records,
        rows: 0,
        failed,
        warmup: false,
        error: None,
    }
}

proptest! {
    #[test]
    fn stats_match_definitions(ns in prop::collection::vec(1u64..50_000_000_000, 1..400)) {
        let durations: Vec<Duration> = ns.iter().map(|&n| Duration::from_nanos(n)).collect();
        let s = compute_stats(&durations).unwrap();
        let (min, p95, max, mean, sd) = oracle(&ns);
        prop_assert_eq!(s.min, Duration::from_nanos(min));
        prop_assert_eq!(s.p95, Duration::from_nanos(p95));
        prop_assert_eq!(s.max, Duration::from_nanos(max));
        prop_assert!(rel(s.mean_ms, mean) <= 1e-12);
        prop_assert!(rel(s.stddev_ms, sd) <= 1e-12, "{} vs {}", s.stddev_ms, sd);
    }

    #[test]
    fn rolling_rate_conserves_records(
        raw in prop::collection::vec((0u64..600_000_000, 1u64..5_000_000, 1u64..100_000, any::<bool>()), 0..200),
        tail_us in 0u64..120_000_000,
    ) {
        let samples: Vec<_> = raw.iter().map(|&(s, e, r, f)| insert(s, e, r, f && r % 3 == 0)).collect();
        let total: u64 = samples.iter().filter(|s| !s.failed).map(|s| s.records).sum();
        let last = samples.iter().map(|s| s.completion_offset()).max().unwrap_or_default();
        let series = rolling_rate(&samples, last + Duration::from_micros(tail_us));
        prop_assert_eq!(series.total_records(), total);
        let rebuilt = series.reconstructed_records();
        prop_assert_eq!(rebuilt.round() as u64, total);
        prop_assert!(rel(rebuilt, total as f64) <= 1e-12);
        for p in &series.points {
            prop_assert!(p.length <= MINUTE);
        }
        let covered: Duration = series.points.iter().map(|p| p.length).sum();
        prop_assert!(covered >= last);
    }
}

#[test]
fn rolling_series_covers_an_idle_tail() {
    let series = rolling_rate(&[insert(0, 1000, 10, false)], MINUTE * 3);
    assert_eq!(series.points.len(), 3);
    assert_eq!(series.points[2].records, 0);
}
