use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use tsbench_core::adapter::{AdapterError, Backend, Connection, InsertReceipt, MemoryBackend};
use tsbench_core::config::{expand_runs, parse_workload, StopCondition, TargetDatabase, WorkloadDefinition};
use tsbench_core::engine::{
    between_runs_reset, draw_window, populate, run_ingestion, run_query, window_rng, EngineError, ResetHook,
    SampleKind,
};
use tsbench_core::generator::SensorRecord;
use tsbench_core::query::{QuerySpec, ResultSet};

fn ingestion_def(batches: &str, clients: &str, stop: &str, extra: &str) -> WorkloadDefinition {
    parse_workload(&format!(
        r#"<Workload version="1">
  <TargetDatabase>Reference</TargetDatabase>
  <WorkloadKind>Ingestion</WorkloadKind>
  <DaySpan>1</DaySpan>
  <StartTime>2022-01-01T00:00:00Z</StartTime>
  <SensorNumber>100</SensorNumber>
  <Seed>3</Seed>
  <BatchSizeOptions>{batches}</BatchSizeOptions>
  <ClientNumberOptions>{clients}</ClientNumberOptions>
  <StopCondition>{stop}</StopCondition>
  {extra}
</Workload>"#
    ))
    .unwrap()
}

fn query_def(query: &str, sensors: &str, minutes: u32, retries: u32) -> WorkloadDefinition {
    parse_workload(&format!(
        r#"<Workload version="1">
  <TargetDatabase>Reference</TargetDatabase>
  <WorkloadKind>Query</WorkloadKind>
  <DaySpan>2</DaySpan>
  <StartTime>2022-01-01T00:00:00Z</StartTime>
  <SensorNumber>10</SensorNumber>
  <Seed>11</Seed>
  <QueryType>{query}</QueryType>
  <TestRetries>{retries}</TestRetries>
  <DurationMinutes>{minutes}</DurationMinutes>
  <SensorsFilter>{sensors}</SensorsFilter>
</Workload>"#
    ))
    .unwrap()
}

#[test]
fn every_batch_is_stored() {
    let def = ingestion_def("100", "2", "batches:3", "");
    let plan = &expand_runs(&def)[0];
    let backend = MemoryBackend::new();
    let out = run_ingestion(&backend, plan, StopCondition::BatchesPerClient(3)).unwrap();
    assert!(out.aborted.is_none());
    assert_eq!(out.summary.total_records, 600);
    assert_eq!(backend.len(), 600);
    assert_eq!(out.samples.len(), 6);
    assert_eq!(out.summary.rolling.total_records(), 600);
    assert!(out
        .samples
        .iter()
        .all(|s| s.kind == SampleKind::Insert { batch_size: 100 } && s.records == 100));
}

#[test]
fn record_total_dealt_across_clients() {
    let def = ingestion_def("100", "3", "records:1050", "");
    let plan = &expand_runs(&def)[0];
    let backend = MemoryBackend::new();
    let out = run_ingestion(&backend, plan, StopCondition::TotalRecords(1050)).unwrap();
    // ceil(1050/100) = 11 batches: 4, 4, 3.
    assert_eq!(out.summary.total_records, 1100);
    let per_client: Vec<usize> = (0..3)
        .map(|c| out.samples.iter().filter(|s| s.client == c).count())
        .collect();
    assert_eq!(per_client, vec![4, 4, 3]);
}

#[test]
fn warmup_flags_leading_batches() {
    let def = ingestion_def("10", "1", "batches:5", "<WarmupBatches>2</WarmupBatches>");
    let backend = MemoryBackend::new();
    let out = run_ingestion(&backend, &expand_runs(&def)[0], StopCondition::BatchesPerClient(5)).unwrap();
    let flags: Vec<bool> = out.samples.iter().map(|s| s.warmup).collect();
    assert_eq!(flags, vec![true, true, false, false, false]);
    // Warmup batches are still stored and counted.
    assert_eq!(out.summary.total_records, 50);
}

#[test]
fn wrong_kind_is_rejected() {
    let def = query_def("Q1", "0", 10, 1);
    let err = run_ingestion(&MemoryBackend::new(), &expand_runs(&def)[0], StopCondition::BatchesPerClient(1));
    assert!(matches!(err, Err(EngineError::WrongKind(0, _))));
}

/// Wraps the in-memory store and fails inserts according to a schedule.
struct Faulty {
    inner: MemoryBackend,
    calls: Arc<AtomicU64>,
    /// Returns true if the n-th insert call (0-based) should fail.
    fail: fn(u64) -> bool,
}

struct FaultyConn {
    inner: Box<dyn Connection>,
    calls: Arc<AtomicU64>,
    fail: fn(u64) -> bool,
}

impl Backend for Faulty {
    fn target(&self) -> TargetDatabase {
        TargetDatabase::Reference
    }

    fn connect(&self) -> Result<Box<dyn Connection>, AdapterError> {
        Ok(Box::new(FaultyConn {
            inner: self.inner.connect()?,
            calls: Arc::clone(&self.calls),
            fail: self.fail,
        }))
    }
}

impl Connection for FaultyConn {
    fn server_version(&mut self) -> Result<String, AdapterError> {
        self.inner.server_version()
    }
    fn init_schema(&mut self, n: u64) -> Result<(), AdapterError> {
        self.inner.init_schema(n)
    }
    fn insert_batch(&mut self, batch: &[SensorRecord]) -> Result<InsertReceipt, AdapterError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if (self.fail)(n) {
            return Err(AdapterError::Transport("connection reset".into()));
        }
        self.inner.insert_batch(batch)
    }
    fn execute_query(&mut self, spec: &QuerySpec) -> Result<(ResultSet, Duration), AdapterError> {
        self.inner.execute_query(spec)
    }
    fn row_count(&mut self) -> Result<u64, AdapterError> {
        self.inner.row_count()
    }
    fn probe(&mut self) -> Result<(), AdapterError> {
        Err(AdapterError::Transport("probe refused".into()))
    }
}

#[test]
fn failed_batches_are_resubmitted_unchanged() {
    let def = ingestion_def("50", "1", "batches:4", "");
    let plan = &expand_runs(&def)[0];
    let clean = MemoryBackend::new();
    run_ingestion(&clean, plan, StopCondition::BatchesPerClient(4)).unwrap();

    let flaky = Faulty {
        inner: MemoryBackend::new(),
        calls: Arc::new(AtomicU64::new(0)),
        fail: |n| n % 2 == 0,
    };
    let out = run_ingestion(&flaky, plan, StopCondition::BatchesPerClient(4)).unwrap();
    assert!(out.aborted.is_none());
    assert_eq!(out.samples.iter().filter(|s| s.failed).count(), 4);
    assert_eq!(out.summary.total_records, 200);
    assert_eq!(flaky.inner.records(), clean.records());
}

#[test]
fn persistent_failure_aborts_run() {
    let def = ingestion_def("50", "2", "batches:10", "<MaxConsecutiveFailures>3</MaxConsecutiveFailures>");
    let backend = Faulty {
        inner: MemoryBackend::new(),
        calls: Arc::new(AtomicU64::new(0)),
        fail: |_| true,
    };
    let out = run_ingestion(&backend, &expand_runs(&def)[0], StopCondition::BatchesPerClient(10)).unwrap();
    let reason = out.aborted.expect("run should abort");
    assert!(reason.contains("consecutive"), "{reason}");
    assert_eq!(out.summary.total_records, 0);
    assert!(out.samples.iter().all(|s| s.failed && s.error.is_some()));
    assert!(out.samples.len() <= 6);
}

#[test]
fn exhausted_span_aborts() {
    // 100 sensors over 1 day at 1 s hold 8.64e6 records; ask for more.
    let def = ingestion_def("1000000", "1", "batches:10", "");
    let out = run_ingestion(&MemoryBackend::new(), &expand_runs(&def)[0], StopCondition::BatchesPerClient(10)).unwrap();
    assert!(out.aborted.is_some());
    assert_eq!(out.summary.total_records, 8_000_000);
}

#[test]
fn windows_stay_inside_span() {
    let def = query_def("Q1", "0", 600, 1);
    let mut rng = window_rng(&def);
    for _ in 0..10_000 {
        let w = draw_window(&def, &mut rng);
        assert_eq!(w.end_ms - w.start_ms, 600 * 60_000);
        assert!(w.start_ms >= def.start_ms());
        assert!(w.end_ms <= def.end_ms());
    }
}

#[test]
fn windows_replay_with_same_seed() {
    let def = query_def("Q3", "0,1", 60, 1);
    let draw = |d: &WorkloadDefinition| {
        let mut rng = window_rng(d);
        (0..50).map(|_| draw_window(d, &mut rng)).collect::<Vec<_>>()
    };
    assert_eq!(draw(&def), draw(&def));
    let mut other = def.clone();
    other.seed += 1;
    assert_ne!(draw(&def), draw(&other));
}

#[test]
fn query_run_records_every_repetition() {
    let def = query_def("Q4", "0,1,2", 120, 25);
    let backend = MemoryBackend::new();
    let written = populate(&backend, &def, 10 * 2 * 86_400, 50_000).unwrap();
    assert_eq!(written, 1_728_000);
    let out = run_query(&backend, &expand_runs(&def)[0]).unwrap();
    assert_eq!(out.samples.len(), 25);
    assert_eq!(out.failed(), 0);
    // Two hourly buckets for each of three sensors, whatever the window.
    assert!(out.samples.iter().all(|s| (6..=9).contains(&s.rows)), "{:?}", out.samples);
    let seqs: Vec<u64> = out.samples.iter().map(|s| s.seq).collect();
    assert_eq!(seqs, (0..25).collect::<Vec<_>>());
}

#[test]
fn no_hook_is_a_no_op() {
    assert!(between_runs_reset(None, &MemoryBackend::new()).unwrap().is_none());
}

#[test]
fn hook_output_and_health_wait() {
    let hook = ResetHook::new("echo restarted");
    let report = between_runs_reset(Some(&hook), &MemoryBackend::new()).unwrap().unwrap();
    assert_eq!(report.output.trim(), "restarted");
    assert_eq!(report.probes, 1);
}

#[test]
fn failing_hook_reports_output() {
    let hook = ResetHook::new("echo boom >&2; exit 3");
    match between_runs_reset(Some(&hook), &MemoryBackend::new()) {
        Err(EngineError::HookFailed { output, .. }) => assert!(output.contains("boom")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn unhealthy_backend_times_out() {
    let mut hook = ResetHook::new("true");
    hook.health_timeout = Duration::from_millis(100);
    hook.poll_interval = Duration::from_millis(20);
    let backend = Faulty {
        inner: MemoryBackend::new(),
        calls: Arc::new(AtomicU64::new(0)),
        fail: |_| false,
    };
    assert!(matches!(
        between_runs_reset(Some(&hook), &backend),
        Err(EngineError::HealthTimeout(..))
    ));
}
