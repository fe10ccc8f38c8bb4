//! Brute-force evaluation of the five query templates.
//!
//! This is the correctness oracle that adapters are checked against. It is
//! written to mirror the SQL literally: a full scan with the WHERE clause,
//! grouping into ordered maps, then a direct two-pass aggregate per group.
//! Nothing here is shared with the indexed in-memory backend.

use std::collections::BTreeMap;

use crate::generator::SensorRecord;
use crate::query::{
    AggFunc, BucketRow, Query, QuerySpec, RangeRow, RawRow, ResultSet, SensorBucketRow,
};

/// Evaluates `spec` over `data` by scanning every record.
pub fn reference_evaluate(data: &[SensorRecord], spec: &QuerySpec) -> ResultSet {
    let in_range = |r: &&SensorRecord| spec.range.contains(r.timestamp_ms);
    let mut result = match &spec.query {
        Query::RawFetch { sensors } => ResultSet::Raw(
            data.iter()
                .filter(in_range)
                .filter(|r| sensors.contains(&r.sensor_id))
                .map(|r| RawRow {
                    timestamp_ms: r.timestamp_ms,
                    sensor_id: r.sensor_id,
                    value: r.value,
                })
                .collect(),
        ),
        Query::OutOfRange {
            sensor,
            bucket,
            min_value,
            max_value,
        } => {
            let mut groups: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
            for r in data.iter().filter(in_range).filter(|r| r.sensor_id == *sensor) {
                groups.entry(bucket.truncate(r.timestamp_ms)).or_default().push(r.value);
            }
            ResultSet::OutOfRange(
                groups
                    .into_iter()
                    .filter_map(|(start, values)| {
                        let max = aggregate(AggFunc::Max, &values)?;
                        let min = aggregate(AggFunc::Min, &values)?;
                        (min < *min_value || max > *max_value).then_some(RangeRow {
                            interval_start_ms: start,
                            max,
                            min,
                        })
                    })
                    .collect(),
            )
        }
        Query::Aggregate { sensors, agg } => {
            let values: Vec<f64> = data
                .iter()
                .filter(in_range)
                .filter(|r| sensors.contains(&r.sensor_id))
                .map(|r| r.value)
                .collect();
            ResultSet::Aggregate(aggregate(*agg, &values))
        }
        Query::Downsample {
            sensors,
            bucket,
            agg,
        } => {
            let mut groups: BTreeMap<(i64, u64), Vec<f64>> = BTreeMap::new();
            for r in data
                .iter()
                .filter(in_range)
                .filter(|r| sensors.contains(&r.sensor_id))
            {
                groups
                    .entry((bucket.truncate(r.timestamp_ms), r.sensor_id))
                    .or_default()
                    .push(r.value);
            }
            ResultSet::Downsampled(
                groups
                    .into_iter()
                    .map(|((start, sensor_id), values)| SensorBucketRow {
                        interval_start_ms: start,
                        sensor_id,
                        value: aggregate(*agg, &values),
                    })
                    .collect(),
            )
        }
        Query::CompareDownsampled {
            first,
            second,
            bucket,
            agg,
            comp,
        } => {
            let downsample = |sensor: u64| {
                let mut groups: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
                for r in data.iter().filter(in_range).filter(|r| r.sensor_id == sensor) {
                    groups.entry(bucket.truncate(r.timestamp_ms)).or_default().push(r.value);
                }
                groups
                    .into_iter()
                    .map(|(k, v)| (k, aggregate(*agg, &v)))
                    .collect::<BTreeMap<_, _>>()
            };
            let left = downsample(*first);
            let right = downsample(*second);
            ResultSet::Compared(
                left.iter()
                    .filter_map(|(start, a)| {
                        let b = right.get(start)?;
                        Some(BucketRow {
                            interval_start_ms: *start,
                            value: a.zip(*b).map(|(a, b)| comp.apply(a, b)),
                        })
                    })
                    .collect(),
            )
        }
    };
    result.canonicalize();
    result
}

/// SQL aggregate semantics: `None` for no input, and for the sample
/// standard deviation of fewer than two values.
pub fn aggregate(agg: AggFunc, values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    match agg {
        AggFunc::Average => Some(values.iter().sum::<f64>() / n),
        AggFunc::StdDev => {
            if values.len() < 2 {
                return None;
            }
            let mean = values.iter().sum::<f64>() / n;
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            Some((ss / (n - 1.0)).sqrt())
        }
        AggFunc::Min => values.iter().copied().reduce(f64::min),
        AggFunc::Max => values.iter().copied().reduce(f64::max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::{BucketWidth, CompFunc, TimeRange};

    fn rec(ts: i64, sensor: u64, value: f64) -> SensorRecord {
        SensorRecord {
            timestamp_ms: ts,
            sensor_id: sensor,
            value,
        }
    }

    fn hour() -> BucketWidth {
        BucketWidth::from_millis(3_600_000).unwrap()
    }

    #[test]
    fn q3_average() {
        let data = [rec(0, 1, 1.0), rec(1000, 1, 2.0), rec(2000, 1, 3.0), rec(0, 2, 50.0)];
        let spec = QuerySpec::new(
            TimeRange::new(0, 10_000),
            Query::Aggregate {
                sensors: vec![1],
                agg: AggFunc::Average,
            },
        )
        .unwrap();
        assert_eq!(reference_evaluate(&data, &spec), ResultSet::Aggregate(Some(2.0)));
    }

    #[test]
    fn q3_with_no_rows_is_null() {
        let spec = QuerySpec::new(
            TimeRange::new(0, 10),
            Query::Aggregate {
                sensors: vec![1],
                agg: AggFunc::StdDev,
            },
        )
        .unwrap();
        assert_eq!(reference_evaluate(&[], &spec), ResultSet::Aggregate(None));
    }

    #[test]
    fn q2_having_clause() {
        // One bucket with min 5 and max 10.
        let data = [rec(0, 0, 5.0), rec(1000, 0, 10.0), rec(2000, 0, 7.0)];
        let q = |lo, hi| {
            QuerySpec::new(
                TimeRange::new(0, 3_600_000),
                Query::OutOfRange {
                    sensor: 0,
                    bucket: hour(),
                    min_value: lo,
                    max_value: hi,
                },
            )
            .unwrap()
        };
        assert_eq!(reference_evaluate(&data, &q(0.0, 20.0)), ResultSet::OutOfRange(vec![]));
        assert_eq!(
            reference_evaluate(&data, &q(6.0, 20.0)),
            ResultSet::OutOfRange(vec![RangeRow {
                interval_start_ms: 0,
                max: 10.0,
                min: 5.0
            }])
        );
    }

    #[test]
    fn q5_subtracts_joined_buckets() {
        let data = [
            rec(0, 1, 8.0),
            rec(1000, 1, 12.0),
            rec(0, 2, 4.0),
            // Sensor 1 only: no join partner.
            rec(3_600_000, 1, 1.0),
        ];
        let spec = QuerySpec::new(
            TimeRange::new(0, 7_200_000),
            Query::CompareDownsampled {
                first: 1,
                second: 2,
                bucket: hour(),
                agg: AggFunc::Average,
                comp: CompFunc::Subtract,
            },
        )
        .unwrap();
        assert_eq!(
            reference_evaluate(&data, &spec),
            ResultSet::Compared(vec![BucketRow {
                interval_start_ms: 0,
                value: Some(6.0)
            }])
        );
    }

    #[test]
    fn q1_range_is_half_open() {
        let data = [rec(0, 1, 1.0), rec(999, 1, 2.0), rec(1000, 1, 3.0), rec(500, 9, 4.0)];
        let spec = QuerySpec::new(TimeRange::new(0, 1000), Query::RawFetch { sensors: vec![1] })
            .unwrap();
        let ResultSet::Raw(rows) = reference_evaluate(&data, &spec) else {
            panic!()
        };
        assert_eq!(rows.iter().map(|r| r.timestamp_ms).collect::<Vec<_>>(), vec![0, 999]);
        let none = QuerySpec::new(TimeRange::new(0, 1000), Query::RawFetch { sensors: vec![42] })
            .unwrap();
        assert_eq!(reference_evaluate(&data, &none), ResultSet::Raw(vec![]));
    }

    #[test]
    fn stddev_of_single_value_is_null() {
        assert_eq!(aggregate(AggFunc::StdDev, &[3.0]), None);
        let sd = aggregate(AggFunc::StdDev, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((sd - 1.290_994_448_735_805_6).abs() < 1e-15);
    }
}
