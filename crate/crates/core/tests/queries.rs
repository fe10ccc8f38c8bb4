//! Query semantics: a hand-computed fixture plus randomized agreement between
//! the in-memory backend and the brute-force evaluator.

use std::path::PathBuf;

use proptest::prelude::*;
use tsbench_core::adapter::{Backend, MemoryBackend};
use tsbench_core::generator::SensorRecord;
use tsbench_core::query::{
    AggFunc, BucketRow, BucketWidth, CompFunc, Query, QuerySpec, RangeRow, ResultSet, SensorBucketRow, TimeRange,
};
use tsbench_core::reference::reference_evaluate;

const HOUR: i64 = 3_600_000;

fn fixture() -> Vec<SensorRecord> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/q4-small.csv");
    let mut reader = csv::Reader::from_path(path).unwrap();
    reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            SensorRecord {
                timestamp_ms: r[0].parse().unwrap(),
                sensor_id: r[1].parse().unwrap(),
                value: r[2].parse().unwrap(),
            }
        })
        .collect()
}

fn hourly() -> BucketWidth {
    BucketWidth::from_millis(HOUR).unwrap()
}

/// Evaluates through both routes and checks they agree before returning.
fn both(data: &[SensorRecord], spec: &QuerySpec) -> ResultSet {
    let backend = MemoryBackend::new();
    let mut conn = backend.connect().unwrap();
    if !data.is_empty() {
        conn.insert_batch(data).unwrap();
    }
    let (fast, _) = conn.execute_query(spec).unwrap();
    let slow = reference_evaluate(data, spec);
    fast.equivalent(&slow, 1e-9).unwrap_or_else(|m| panic!("{m:?}\n{fast:?}\n{slow:?}"));
    slow
}

#[test]
fn fixture_q4_hourly_average() {
    let spec = QuerySpec::new(
        TimeRange::new(0, 2 * HOUR),
        Query::Downsample {
            sensors: vec![1, 2],
            bucket: hourly(),
            agg: AggFunc::Average,
        },
    )
    .unwrap();
    let row = |t, s, v| SensorBucketRow {
        interval_start_ms: t,
        sensor_id: s,
        value: Some(v),
    };
    // (10+20)/2, (1+3)/2, (30+50)/2, (100+200)/2; the 7200000 row is outside.
    assert_eq!(
        both(&fixture(), &spec),
        ResultSet::Downsampled(vec![row(0, 1, 15.0), row(0, 2, 2.0), row(HOUR, 1, 40.0), row(HOUR, 2, 150.0)])
    );
}

#[test]
fn fixture_q5_difference() {
    let spec = QuerySpec::new(
        TimeRange::new(0, 2 * HOUR),
        Query::CompareDownsampled {
            first: 1,
            second: 2,
            bucket: hourly(),
            agg: AggFunc::Average,
            comp: CompFunc::Subtract,
        },
    )
    .unwrap();
    assert_eq!(
        both(&fixture(), &spec),
        ResultSet::Compared(vec![
            BucketRow { interval_start_ms: 0, value: Some(13.0) },
            BucketRow { interval_start_ms: HOUR, value: Some(-110.0) },
        ])
    );
}

#[test]
fn fixture_q3_average_of_union() {
    let spec = QuerySpec::new(
        TimeRange::new(0, 2 * HOUR),
        Query::Aggregate {
            sensors: vec![1, 2],
            agg: AggFunc::Average,
        },
    )
    .unwrap();
    // (10+20+30+50+1+3+100+200)/8
    assert_eq!(both(&fixture(), &spec), ResultSet::Aggregate(Some(51.75)));
}

#[test]
fn fixture_q2_out_of_range_hours() {
    let spec = QuerySpec::new(
        TimeRange::new(0, 7_300_000),
        Query::OutOfRange {
            sensor: 1,
            bucket: hourly(),
            min_value: 8.0,
            max_value: 45.0,
        },
    )
    .unwrap();
    assert_eq!(
        both(&fixture(), &spec),
        ResultSet::OutOfRange(vec![
            RangeRow { interval_start_ms: HOUR, max: 50.0, min: 30.0 },
            RangeRow { interval_start_ms: 2 * HOUR, max: 7.0, min: 7.0 },
        ])
    );
}

#[test]
fn fixture_q1_half_open() {
    let spec = QuerySpec::new(TimeRange::new(100, 7_300_000), Query::RawFetch { sensors: vec![3] }).unwrap();
    // 7300000 is the exclusive end.
    assert_eq!(both(&fixture(), &spec).row_count(), 2);
}

#[test]
fn q1_example_row_count() {
    // 10 sensors at 1 s over 10 minutes.
    let data: Vec<SensorRecord> = (0..3600)
        .flat_map(|t| {
            (0..12).map(move |s| SensorRecord {
                timestamp_ms: t * 1000,
                sensor_id: s,
                value: 1.0,
            })
        })
        .collect();
    let spec = QuerySpec::new(
        TimeRange::new(60_000, 660_000),
        Query::RawFetch {
            sensors: (0..10).collect(),
        },
    )
    .unwrap();
    assert_eq!(both(&data, &spec).row_count(), 6000);
}

fn records() -> impl Strategy<Value = Vec<SensorRecord>> {
    prop::collection::vec(
        (0i64..20_000, 0u64..6, prop_oneof![Just(0.0), Just(1.0), -1e6f64..1e6]),
        0..300,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(t, s, value)| SensorRecord {
                timestamp_ms: t - 5_000,
                sensor_id: s,
                value,
            })
            .collect()
    })
}

fn agg() -> impl Strategy<Value = AggFunc> {
    prop_oneof![
        Just(AggFunc::Average),
        Just(AggFunc::StdDev),
        Just(AggFunc::Min),
        Just(AggFunc::Max)
    ]
}

fn spec() -> impl Strategy<Value = QuerySpec> {
    let range = (-6_000i64..16_000, 1i64..12_000).prop_map(|(s, len)| TimeRange::new(s, s + len));
    let sensors = prop::collection::vec(0u64..7, 1..4);
    let bucket = (1i64..4_000).prop_map(|w| BucketWidth::from_millis(w).unwrap());
    let query = prop_oneof![
        sensors.clone().prop_map(|sensors| Query::RawFetch { sensors }),
        (0u64..6, bucket.clone(), -1e6f64..1e6, 1.0f64..1e6).prop_map(|(sensor, bucket, lo, gap)| {
            Query::OutOfRange {
                sensor,
                bucket,
                min_value: lo,
                max_value: lo + gap,
            }
        }),
        (sensors.clone(), agg()).prop_map(|(sensors, agg)| Query::Aggregate { sensors, agg }),
        (sensors, bucket.clone(), agg()).prop_map(|(sensors, bucket, agg)| Query::Downsample {
            sensors,
            bucket,
            agg
        }),
        (0u64..6, 0u64..6, bucket, agg()).prop_map(|(first, second, bucket, agg)| Query::CompareDownsampled {
            first,
            second,
            bucket,
            agg,
            comp: CompFunc::Subtract,
        }),
    ];
    (range, query).prop_map(|(range, query)| QuerySpec { range, query })
}

proptest! {
    #[test]
    fn memory_backend_matches_oracle(data in records(), spec in spec()) {
        both(&data, &spec);
    }

    #[test]
    fn compare_is_composition_of_downsamples(
        data in records(),
        first in 0u64..6,
        second in 0u64..6,
        width in 1i64..4_000,
        agg in agg(),
    ) {
        let range = TimeRange::new(-5_000, 15_000);
        let bucket = BucketWidth::from_millis(width).unwrap();
        let down = |sensor| match reference_evaluate(&data, &QuerySpec {
            range,
            query: Query::Downsample { sensors: vec![sensor], bucket, agg },
        }) {
            ResultSet::Downsampled(rows) => rows,
            other => panic!("{other:?}"),
        };
        let a = down(first);
        let b = down(second);
        let expected: Vec<BucketRow> = a
            .iter()
            .filter_map(|ra| {
                b.iter().find(|rb| rb.interval_start_ms == ra.interval_start_ms).map(|rb| BucketRow {
                    interval_start_ms: ra.interval_start_ms,
                    value: match (ra.value, rb.value) {
                        (Some(x), Some(y)) => Some(x - y),
                        _ => None,
                    },
                })
            })
            .collect();
        let got = both(&data, &QuerySpec {
            range,
            query: Query::CompareDownsampled { first, second, bucket, agg, comp: CompFunc::Subtract },
        });
        prop_assert!(got.equivalent(&ResultSet::Compared(expected), 1e-9).is_ok());
    }

    #[test]
    fn raw_fetch_is_filter(data in records(), spec in spec()) {
        if let Query::RawFetch { sensors } = &spec.query {
            let expected = data
                .iter()
                .filter(|r| spec.range.contains(r.timestamp_ms) && sensors.contains(&r.sensor_id))
                .count();
            prop_assert_eq!(both(&data, &spec).row_count(), expected);
        }
    }
}
