//! Executes run plans against a backend.
//!
//! Ingestion runs start one worker thread per client. Each worker owns its
//! generator and connection and reports [`LatencySample`]s over a channel to
//! the calling thread, which is the only collector. Query runs execute on a
//! single connection, drawing a fresh window for every repetition.

use std::io::Read;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adapter::{AdapterError, Backend, Connection};
use crate::config::{PlannedWorkload, RunPlan, WorkloadDefinition};
pub use crate::config::StopCondition;
use crate::generator::{Generator, GeneratorError};
use crate::metrics::{ingestion_rate, rolling_rate, RollingRateSeries};
use crate::query::{BucketWidth, Query, QuerySpec, QueryType, TimeRange};

/// ChaCha stream used for query-window draws, far from any client ordinal.
pub const QUERY_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Insert { batch_size: usize },
    Query { query_type: QueryType },
}

/// One timed operation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencySample {
    pub run: usize,
    pub client: usize,
    /// Position of the sample in its client's stream.
    pub seq: u64,
    pub kind: SampleKind,
    /// Monotonic offset from the start of the run.
    pub start_offset: Duration,
    /// Wall clock at start, for lining samples up with resource snapshots.
    pub wall_start_ms: i64,
    pub elapsed: Duration,
    /// Records written; zero for queries and failed inserts.
    pub records: u64,
    /// Rows returned by a query.
    pub rows: u64,
    pub failed: bool,
    /// Leading insert excluded from latency statistics.
    pub warmup: bool,
    pub error: Option<String>,
}

impl LatencySample {
    pub fn completion_offset(&self) -> Duration {
        self.start_offset + self.elapsed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestionSummary {
    pub total_records: u64,
    pub wall_time: Duration,
    pub overall_rate: f64,
    pub rolling: RollingRateSeries,
}

#[derive(Debug, Clone)]
pub struct IngestionOutcome {
    pub summary: IngestionSummary,
    /// Ordered by client, then sequence.
    pub samples: Vec<LatencySample>,
    /// Set when the run stopped early; the samples so far are still valid.
    pub aborted: Option<String>,
}

#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub samples: Vec<LatencySample>,
    pub wall_time: Duration,
}

impl QueryOutcome {
    pub fn failed(&self) -> usize {
        self.samples.iter().filter(|s| s.failed).count()
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Backend(#[from] AdapterError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error("run {0} is not a {1} run")]
    WrongKind(usize, &'static str),
    #[error("ingestion run needs a stop condition")]
    NoStopCondition,
    #[error("reset hook `{command}` failed ({status}):\n{output}")]
    HookFailed {
        command: String,
        status: String,
        output: String,
    },
    #[error("backend not healthy {0:?} after reset hook: {1}")]
    HealthTimeout(Duration, String),
    #[error("cannot start reset hook: {0}")]
    HookSpawn(std::io::Error),
}

fn wall_now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or_default()
}

/// Batches each client inserts, or `None` for a time-bounded run.
///
/// For a record total, `ceil(total / batch)` batches are dealt round-robin,
/// so the generated data does not depend on thread scheduling.
pub fn batch_quota(stop: StopCondition, batch_size: usize, clients: usize, client: usize) -> Option<u64> {
    match stop {
        StopCondition::BatchesPerClient(n) => Some(n),
        StopCondition::TotalRecords(total) => {
            let batches = total.div_ceil(batch_size as u64);
            let clients = clients as u64;
            Some(batches / clients + u64::from((client as u64) < batches % clients))
        }
        StopCondition::Duration(_) => None,
    }
}

enum WorkerEvent {
    Sample(LatencySample),
    Aborted(String),
}

struct Worker {
    run: usize,
    client: usize,
    batch_size: usize,
    quota: Option<u64>,
    deadline: Option<Duration>,
    warmup: u64,
    max_failures: u32,
    generator: Generator,
    conn: Box<dyn Connection>,
}

impl Worker {
    fn run(mut self, run_start: Instant, abort: &AtomicBool, tx: mpsc::Sender<WorkerEvent>) {
        let mut seq = 0u64;
        let mut done = 0u64;
        let mut consecutive = 0u32;
        let mut pending = None;
        loop {
            if abort.load(Ordering::Relaxed) {
                break;
            }
            if self.quota.is_some_and(|q| done >= q) {
                break;
            }
            if self.deadline.is_some_and(|d| run_start.elapsed() >= d) {
                break;
            }
            let batch = match pending.take() {
                Some(b) => b,
                None => match self.generator.next_batch(self.batch_size) {
                    Ok(b) => b,
                    Err(e) => {
                        abort.store(true, Ordering::Relaxed);
                        let _ = tx.send(WorkerEvent::Aborted(format!("client {}: {e}", self.client)));
                        break;
                    }
                },
            };
            let start_offset = run_start.elapsed();
            let wall_start_ms = wall_now_ms();
            let attempt = Instant::now();
            let mut sample = LatencySample {
                run: self.run,
                client: self.client,
                seq,
                kind: SampleKind::Insert {
                    batch_size: self.batch_size,
                },
                start_offset,
                wall_start_ms,
                elapsed: Duration::ZERO,
                records: 0,
                rows: 0,
                failed: false,
                warmup: false,
                error: None,
            };
            seq += 1;
            match self.conn.insert_batch(&batch) {
                Ok(receipt) => {
                    sample.elapsed = receipt.elapsed;
                    sample.records = receipt.records_written as u64;
                    sample.warmup = done < self.warmup;
                    consecutive = 0;
                    done += 1;
                    let _ = tx.send(WorkerEvent::Sample(sample));
                }
                Err(e) => {
                    sample.elapsed = attempt.elapsed();
                    sample.failed = true;
                    sample.error = Some(e.to_string());
                    let _ = tx.send(WorkerEvent::Sample(sample));
                    // The same batch is resubmitted so the data stays deterministic.
                    pending = Some(batch);
                    consecutive += 1;
                    if consecutive >= self.max_failures {
                        abort.store(true, Ordering::Relaxed);
                        let _ = tx.send(WorkerEvent::Aborted(format!(
                            "client {}: {consecutive} consecutive insert failures, last: {e}",
                            self.client
                        )));
                        break;
                    }
                }
            }
        }
    }
}

/// Runs one ingestion plan until `stop` holds for every client.
pub fn run_ingestion(
    backend: &dyn Backend,
    plan: &RunPlan,
    stop: StopCondition,
) -> Result<IngestionOutcome, EngineError> {
    let PlannedWorkload::Ingestion {
        batch_size,
        client_count,
    } = plan.workload
    else {
        return Err(EngineError::WrongKind(plan.ordinal, "ingestion"));
    };
    let def = &plan.definition;
    let mut workers = Vec::with_capacity(client_count);
    for client in 0..client_count {
        workers.push(Worker {
            run: plan.ordinal,
            client,
            batch_size,
            quota: batch_quota(stop, batch_size, client_count, client),
            deadline: match stop {
                StopCondition::Duration(d) => Some(d),
                _ => None,
            },
            warmup: def.warmup_batches,
            max_failures: def.max_consecutive_failures.max(1),
            generator: Generator::new(def, client, client_count)?,
            conn: backend.connect()?,
        });
    }

    let abort = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel();
    let run_start = Instant::now();
    let mut samples = Vec::new();
    let mut aborted: Option<String> = None;
    thread::scope(|scope| {
        for worker in workers {
            let tx = tx.clone();
            let abort = &abort;
            scope.spawn(move || worker.run(run_start, abort, tx));
        }
        drop(tx);
        for event in rx {
            match event {
                WorkerEvent::Sample(s) => samples.push(s),
                WorkerEvent::Aborted(reason) => {
                    aborted.get_or_insert(reason);
                }
            }
        }
    });
    let wall_time = run_start.elapsed();
    samples.sort_by_key(|s| (s.client, s.seq));

    let total_records: u64 = samples.iter().filter(|s| !s.failed).map(|s| s.records).sum();
    let summary = IngestionSummary {
        total_records,
        wall_time,
        overall_rate: ingestion_rate(total_records, wall_time).unwrap_or(0.0),
        rolling: rolling_rate(&samples, wall_time),
    };
    Ok(IngestionOutcome {
        summary,
        samples,
        aborted,
    })
}

/// Draws a window of `duration_minutes` uniformly inside the day span.
pub fn draw_window(def: &WorkloadDefinition, rng: &mut ChaCha8Rng) -> TimeRange {
    let length = i64::from(def.duration_minutes) * 60_000;
    let latest = def.day_span_ms() - length;
    let offset = rng.random_range(0..=latest);
    let start = def.start_ms() + offset;
    TimeRange::new(start, start + length)
}

/// Builds the query a definition describes over `range`.
pub fn query_for(def: &WorkloadDefinition, query_type: QueryType, range: TimeRange) -> QuerySpec {
    let bucket = BucketWidth::from_duration(def.aggregation_interval)
        .expect("validated aggregation interval");
    let sensors = def.sensors_filter.clone();
    let query = match query_type {
        QueryType::Q1 => Query::RawFetch { sensors },
        QueryType::Q2 => Query::OutOfRange {
            sensor: sensors[0],
            bucket,
            min_value: def.min_value.expect("validated Q2 bounds"),
            max_value: def.max_value.expect("validated Q2 bounds"),
        },
        QueryType::Q3 => Query::Aggregate {
            sensors,
            agg: def.agg_func,
        },
        QueryType::Q4 => Query::Downsample {
            sensors,
            bucket,
            agg: def.agg_func,
        },
        QueryType::Q5 => Query::CompareDownsampled {
            first: sensors[0],
            second: sensors[1],
            bucket,
            agg: def.agg_func,
            comp: def.comp_func,
        },
    };
    QuerySpec { range, query }
}

/// Window generator seeded from the definition, so query runs replay exactly.
pub fn window_rng(def: &WorkloadDefinition) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(def.seed);
    rng.set_stream(QUERY_STREAM);
    rng
}

/// Runs every repetition of a query plan on one connection.
pub fn run_query(backend: &dyn Backend, plan: &RunPlan) -> Result<QueryOutcome, EngineError> {
    let PlannedWorkload::Query {
        query_type,
        repetitions,
    } = plan.workload
    else {
        return Err(EngineError::WrongKind(plan.ordinal, "query"));
    };
    let def = &plan.definition;
    let mut conn = backend.connect()?;
    let mut rng = window_rng(def);
    let mut samples = Vec::with_capacity(repetitions as usize);
    let run_start = Instant::now();
    for seq in 0..u64::from(repetitions) {
        let spec = query_for(def, query_type, draw_window(def, &mut rng));
        let start_offset = run_start.elapsed();
        let wall_start_ms = wall_now_ms();
        let attempt = Instant::now();
        let mut sample = LatencySample {
            run: plan.ordinal,
            client: 0,
            seq,
            kind: SampleKind::Query { query_type },
            start_offset,
            wall_start_ms,
            elapsed: Duration::ZERO,
            records: 0,
            rows: 0,
            failed: false,
            warmup: false,
            error: None,
        };
        match conn.execute_query(&spec) {
            Ok((result, elapsed)) => {
                sample.elapsed = elapsed;
                sample.rows = result.row_count() as u64;
            }
            Err(e) => {
                sample.elapsed = attempt.elapsed();
                sample.failed = true;
                sample.error = Some(e.to_string());
                log::warn!("query repetition {seq} failed: {e}");
                if matches!(e, AdapterError::Transport(_)) {
                    // Reconnect so later repetitions are not poisoned by a dead session.
                    if let Ok(fresh) = backend.connect() {
                        conn = fresh;
                    }
                }
            }
        }
        samples.push(sample);
    }
    Ok(QueryOutcome {
        samples,
        wall_time: run_start.elapsed(),
    })
}

/// Fills the table with `total_records` generated records before a query run.
///
/// All sensors are written by a single generator in batches of `batch_size`.
pub fn populate(
    backend: &dyn Backend,
    def: &WorkloadDefinition,
    total_records: u64,
    batch_size: usize,
) -> Result<u64, EngineError> {
    let mut conn = backend.connect()?;
    let mut generator = Generator::new(def, 0, 1)?;
    let mut written = 0u64;
    while written < total_records {
        let n = batch_size.min((total_records - written) as usize);
        let batch = generator.next_batch(n)?;
        written += conn.insert_batch(&batch)?.records_written as u64;
    }
    Ok(written)
}

/// External command run between runs, followed by a health wait.
#[derive(Debug, Clone)]
pub struct ResetHook {
    pub command: String,
    pub health_timeout: Duration,
    pub poll_interval: Duration,
}

impl ResetHook {
    pub fn new(command: impl Into<String>) -> Self {
        ResetHook {
            command: command.into(),
            health_timeout: Duration::from_secs(120),
            poll_interval: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HookReport {
    pub output: String,
    pub health_wait: Duration,
    pub probes: u32,
}

fn capture(child: &mut std::process::Child) -> String {
    let mut out = String::new();
    if let Some(mut s) = child.stdout.take() {
        let _ = s.read_to_string(&mut out);
    }
    if let Some(mut s) = child.stderr.take() {
        let mut err = String::new();
        let _ = s.read_to_string(&mut err);
        out.push_str(&err);
    }
    out
}

/// Runs the reset hook, if any, then waits until the backend answers a probe.
pub fn between_runs_reset(
    hook: Option<&ResetHook>,
    backend: &dyn Backend,
) -> Result<Option<HookReport>, EngineError> {
    let Some(hook) = hook else {
        return Ok(None);
    };
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&hook.command)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(EngineError::HookSpawn)?;
    let output = capture(&mut child);
    let status = child.wait().map_err(EngineError::HookSpawn)?;
    if !status.success() {
        return Err(EngineError::HookFailed {
            command: hook.command.clone(),
            status: status.to_string(),
            output,
        });
    }
    log::info!("reset hook finished: {}", output.trim());

    let waited = Instant::now();
    let mut probes = 0;
    loop {
        probes += 1;
        let result = backend.connect().and_then(|mut c| c.probe());
        match result {
            Ok(()) => {
                return Ok(Some(HookReport {
                    output,
                    health_wait: waited.elapsed(),
                    probes,
                }))
            }
            Err(e) if waited.elapsed() >= hook.health_timeout => {
                return Err(EngineError::HealthTimeout(hook.health_timeout, e.to_string()))
            }
            Err(_) => thread::sleep(hook.poll_interval),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_quota_is_dealt_round_robin() {
        // 10 batches over 4 clients: 3, 3, 2, 2.
        let quotas: Vec<_> = (0..4)
            .map(|c| batch_quota(StopCondition::TotalRecords(1000), 100, 4, c).unwrap())
            .collect();
        assert_eq!(quotas, vec![3, 3, 2, 2]);
        // A partial batch rounds up to a whole one.
        assert_eq!(batch_quota(StopCondition::TotalRecords(150), 100, 1, 0), Some(2));
        assert_eq!(batch_quota(StopCondition::Duration(Duration::from_secs(1)), 100, 1, 0), None);
    }
}
