//! Deterministic synthetic sensor data.
//!
//! Each client owns a contiguous slice of sensor ids and a ChaCha8 stream
//! selected by its ordinal under the definition seed. Records cycle
//! round-robin through the slice; the timestamp advances by one granularity
//! step each time the cycle wraps. Values are uniform over
//! `[0, 2^31 - 1]` computed as `(next_u64 >> 11) * 2^-53 * (2^31 - 1)`.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::WorkloadDefinition;

/// Upper bound of generated values: the largest signed 32-bit integer.
pub const MAX_VALUE: f64 = i32::MAX as f64;

/// Bytes per record in [`dump_records`]: timestamp, sensor id and value, 8 bytes each.
pub const RECORD_BYTES: usize = 24;

/// One data point of the `(timestamp, sensor_id, value)` table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorRecord {
    pub timestamp_ms: i64,
    pub sensor_id: u64,
    pub value: f64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeneratorError {
    #[error("{clients} clients cannot share {sensors} sensors; each client needs at least one")]
    TooFewSensors { sensors: u64, clients: usize },
    #[error("client ordinal {ordinal} is not below client count {clients}")]
    BadOrdinal { ordinal: usize, clients: usize },
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("next timestamp {next_ms} ms would pass the end of the day span at {end_ms} ms")]
    SpanExhausted { next_ms: i64, end_ms: i64 },
}

/// Sensor ids owned by `client` when `sensors` are split across `clients`.
///
/// Slices are contiguous with width `ceil(sensors / clients)`; the last one
/// may be shorter.
pub fn sensor_slice(sensors: u64, clients: usize, client: usize) -> Result<Range<u64>, GeneratorError> {
    if client >= clients {
        return Err(GeneratorError::BadOrdinal {
            ordinal: client,
            clients,
        });
    }
    let width = sensors.div_ceil(clients as u64);
    let start = width * client as u64;
    let end = (start + width).min(sensors);
    if start >= end {
        return Err(GeneratorError::TooFewSensors { sensors, clients });
    }
    Ok(start..end)
}

/// Generation cursor for one client. Not shared between threads.
#[derive(Debug, Clone)]
pub struct Generator {
    rng: ChaCha8Rng,
    sensors: Range<u64>,
    /// Offset of the next sensor within `sensors`.
    cursor: u64,
    next_timestamp_ms: i64,
    granularity_ms: i64,
    start_ms: i64,
    end_ms: i64,
}

impl Generator {
    /// Creates the generator of client `client` out of `client_count`.
    pub fn new(def: &WorkloadDefinition, client: usize, client_count: usize) -> Result<Self, GeneratorError> {
        let sensors = sensor_slice(def.sensor_number, client_count, client)?;
        Ok(Self::with_parts(
            def.seed,
            client as u64,
            sensors,
            def.start_ms(),
            def.end_ms(),
            def.granularity_ms(),
        ))
    }

    /// Builds a generator directly; `stream` selects the ChaCha stream.
    pub fn with_parts(
        seed: u64,
        stream: u64,
        sensors: Range<u64>,
        start_ms: i64,
        end_ms: i64,
        granularity_ms: i64,
    ) -> Self {
        assert!(!sensors.is_empty(), "sensor slice must not be empty");
        assert!(granularity_ms > 0, "granularity must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Generator {
            rng,
            sensors,
            cursor: 0,
            next_timestamp_ms: start_ms,
            granularity_ms,
            start_ms,
            end_ms,
        }
    }

    pub fn sensors(&self) -> Range<u64> {
        self.sensors.clone()
    }

    pub fn next_timestamp_ms(&self) -> i64 {
        self.next_timestamp_ms
    }

    pub fn start_ms(&self) -> i64 {
        self.start_ms
    }

    /// Records still available before the span end is reached.
    pub fn remaining(&self) -> u64 {
        if self.next_timestamp_ms >= self.end_ms {
            return 0;
        }
        let ticks = (self.end_ms - self.next_timestamp_ms - 1) / self.granularity_ms + 1;
        let width = self.sensors.end - self.sensors.start;
        (ticks as u64).saturating_mul(width).saturating_sub(self.cursor)
    }

    fn next_value(&mut self) -> f64 {
        let bits = self.rng.next_u64() >> 11;
        bits as f64 * (1.0 / (1u64 << 53) as f64) * MAX_VALUE
    }

    /// Produces the next `batch_size` records, or fails without advancing.
    pub fn next_batch(&mut self, batch_size: usize) -> Result<Vec<SensorRecord>, GeneratorError> {
        if batch_size == 0 {
            return Err(GeneratorError::EmptyBatch);
        }
        if (batch_size as u64) > self.remaining() {
            let width = self.sensors.end - self.sensors.start;
            let wraps = (self.cursor + batch_size as u64 - 1) / width;
            return Err(GeneratorError::SpanExhausted {
                next_ms: self.next_timestamp_ms + wraps as i64 * self.granularity_ms,
                end_ms: self.end_ms,
            });
        }
        let width = self.sensors.end - self.sensors.start;
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let value = self.next_value();
            batch.push(SensorRecord {
                timestamp_ms: self.next_timestamp_ms,
                sensor_id: self.sensors.start + self.cursor,
                value,
            });
            self.cursor += 1;
            if self.cursor == width {
                self.cursor = 0;
                self.next_timestamp_ms += self.granularity_ms;
            }
        }
        Ok(batch)
    }
}

/// Little-endian dump: `i64` timestamp, `u64` sensor id, `f64` value bits.
pub fn dump_records(records: &[SensorRecord], out: &mut Vec<u8>) {
    out.reserve(records.len() * RECORD_BYTES);
    for r in records {
        out.extend_from_slice(&r.timestamp_ms.to_le_bytes());
        out.extend_from_slice(&r.sensor_id.to_le_bytes());
        out.extend_from_slice(&r.value.to_bits().to_le_bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen(seed: u64, stream: u64, sensors: Range<u64>) -> Generator {
        Generator::with_parts(seed, stream, sensors, 1_000_000, 1_000_000 + 86_400_000, 1000)
    }

    #[test]
    fn round_robin_with_wrap() {
        let t = 1_000_000;
        let mut g = gen(1, 0, 0..2);
        let batch = g.next_batch(4).unwrap();
        let keys: Vec<_> = batch.iter().map(|r| (r.timestamp_ms, r.sensor_id)).collect();
        assert_eq!(keys, vec![(t, 0), (t, 1), (t + 1000, 0), (t + 1000, 1)]);
        assert_eq!(g.next_timestamp_ms(), t + 2000);
    }

    #[test]
    fn batch_of_twenty_thousand() {
        let mut g = gen(3, 0, 0..2084);
        assert_eq!(g.next_batch(20_000).unwrap().len(), 20_000);
    }

    #[test]
    fn same_state_same_records() {
        let a = gen(7, 0, 0..10);
        let mut b = a.clone();
        let mut a = a;
        assert_eq!(a.next_batch(50).unwrap(), b.next_batch(50).unwrap());
    }

    #[test]
    fn seeds_and_streams_separate() {
        let first = |seed, stream| gen(seed, stream, 0..10).next_batch(8).unwrap();
        assert_eq!(first(7, 0), first(7, 0));
        let v0: Vec<f64> = first(7, 0).iter().map(|r| r.value).collect();
        let v1: Vec<f64> = first(7, 1).iter().map(|r| r.value).collect();
        let v2: Vec<f64> = first(8, 0).iter().map(|r| r.value).collect();
        assert_ne!(v0, v1);
        assert_ne!(v0, v2);
    }

    #[test]
    fn slice_width_matches_independent_partition() {
        // 100000 sensors over 48 clients: the smallest width w with 48 * w >= 100000.
        let oracle_width = (1u64..).find(|w| 48 * w >= 100_000).unwrap();
        assert_eq!(oracle_width, 2084);
        assert_eq!(sensor_slice(100_000, 48, 0).unwrap(), 0..2084);
        assert_eq!(sensor_slice(100_000, 48, 47).unwrap(), 47 * 2084..100_000);
    }

    #[test]
    fn too_few_sensors() {
        assert_eq!(
            sensor_slice(3, 4, 3),
            Err(GeneratorError::TooFewSensors {
                sensors: 3,
                clients: 4
            })
        );
        // 10 sensors over 7 clients: width 2 leaves the last two clients empty.
        assert!(sensor_slice(10, 7, 6).is_err());
        assert!(sensor_slice(10, 4, 4).is_err());
    }

    #[test]
    fn span_exhaustion_does_not_advance() {
        let mut g = Generator::with_parts(0, 0, 0..2, 0, 3000, 1000);
        assert_eq!(g.remaining(), 6);
        g.next_batch(5).unwrap();
        let before = g.clone();
        let err = g.next_batch(2).unwrap_err();
        assert!(matches!(err, GeneratorError::SpanExhausted { end_ms: 3000, .. }));
        assert_eq!(g.next_timestamp_ms(), before.next_timestamp_ms());
        assert_eq!(g.next_batch(1).unwrap()[0].timestamp_ms, 2000);
        assert_eq!(g.remaining(), 0);
        assert_eq!(g.next_timestamp_ms(), 3000);
    }

    #[test]
    fn empty_batch_rejected() {
        assert_eq!(gen(0, 0, 0..1).next_batch(0), Err(GeneratorError::EmptyBatch));
    }

    #[test]
    fn dump_is_24_bytes_per_record() {
        let recs = gen(0, 0, 0..3).next_batch(3).unwrap();
        let mut out = Vec::new();
        dump_records(&recs, &mut out);
        assert_eq!(out.len(), 3 * RECORD_BYTES);
        assert_eq!(&out[8..16], &0u64.to_le_bytes());
    }
}
