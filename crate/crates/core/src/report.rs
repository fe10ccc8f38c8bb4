//! Result files: per-run CSVs and the manifest.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest.json
//! run-000/samples.csv     one row per timed operation
//! run-000/summary.csv     derived metrics, long format
//! run-000/resources.csv   resource snapshots (only with a monitor)
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{IngestionSummary, LatencySample, SampleKind};
use crate::metrics::{compute_stats, throughput_bytes, to_megabytes, QueryStats, DEFAULT_RECORD_SIZE};
use crate::sysmon::{MonitorLog, ResourceSnapshot};

/// Bumped whenever a CSV header or manifest field changes.
pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RESOURCES_FILE: &str = "resources.csv";

pub const SAMPLES_HEADER: [&str; 14] = [
    "run",
    "client",
    "seq",
    "operation",
    "batch_size",
    "query_type",
    "start_offset_ns",
    "elapsed_ns",
    "wall_start_ms",
    "records",
    "rows",
    "failed",
    "warmup",
    "error",
];

/// Columns whose values depend on the clock rather than the workload.
pub const TIMING_COLUMNS: [&str; 3] = ["start_offset_ns", "elapsed_ns", "wall_start_ms"];

pub const SUMMARY_HEADER: [&str; 3] = ["metric", "value", "unit"];

pub const RESOURCES_HEADER: [&str; 13] = [
    "wall_ms",
    "cpu_user_pct",
    "cpu_system_pct",
    "cpu_iowait_pct",
    "ctx_switches_per_s",
    "mem_used_pct",
    "mem_cached_bytes",
    "swap_used_bytes",
    "disk_read_bytes_per_s",
    "disk_write_bytes_per_s",
    "disk_ops_per_s",
    "net_sent_bytes_per_s",
    "net_recv_bytes_per_s",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Creates `dir` if needed and proves it is writable, without leaving files.
pub fn ensure_writable(dir: &Path) -> Result<(), ReportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let probe = dir.join(".tsbench-write-probe");
    fs::write(&probe, b"").map_err(io_err(&probe))?;
    fs::remove_file(&probe).map_err(io_err(&probe))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub metric: String,
    pub value: String,
    pub unit: &'static str,
}

impl SummaryRow {
    fn new(metric: impl Into<String>, value: impl ToString, unit: &'static str) -> Self {
        SummaryRow {
            metric: metric.into(),
            value: value.to_string(),
            unit,
        }
    }
}

/// Latencies that enter the statistics: successful, non-warmup samples.
pub fn measured_latencies(samples: &[LatencySample]) -> Vec<Duration> {
    samples
        .iter()
        .filter(|s| !s.failed && !s.warmup)
        .map(|s| s.elapsed)
        .collect()
}

fn stats_rows(prefix: &str, stats: &QueryStats) -> Vec<SummaryRow> {
    vec![
        SummaryRow::new(format!("{prefix}_count"), stats.n, "count"),
        SummaryRow::new(format!("{prefix}_min"), stats.min_ms(), "ms"),
        SummaryRow::new(format!("{prefix}_mean"), stats.mean_ms, "ms"),
        SummaryRow::new(format!("{prefix}_p95"), stats.p95_ms(), "ms"),
        SummaryRow::new(format!("{prefix}_max"), stats.max_ms(), "ms"),
        SummaryRow::new(format!("{prefix}_stddev"), stats.stddev_ms, "ms"),
    ]
}

pub fn ingestion_summary_rows(summary: &IngestionSummary, samples: &[LatencySample]) -> Vec<SummaryRow> {
    let failed = samples.iter().filter(|s| s.failed).count();
    let mut rows = vec![
        SummaryRow::new("total_records", summary.total_records, "records"),
        SummaryRow::new("wall_time", summary.wall_time.as_secs_f64(), "s"),
        SummaryRow::new("ingestion_rate", summary.overall_rate, "records/s"),
        SummaryRow::new(
            "throughput",
            to_megabytes(throughput_bytes(summary.overall_rate, DEFAULT_RECORD_SIZE)),
            "MB/s",
        ),
        SummaryRow::new("failed_batches", failed, "count"),
    ];
    if let Ok(stats) = compute_stats(&measured_latencies(samples)) {
        rows.extend(stats_rows("batch_latency", &stats));
    }
    for p in &summary.rolling.points {
        rows.push(SummaryRow::new(format!("rolling_rate_minute_{:04}", p.minute), p.rate, "records/s"));
    }
    rows
}

pub fn query_summary_rows(samples: &[LatencySample]) -> Vec<SummaryRow> {
    let failed = samples.iter().filter(|s| s.failed).count();
    let mut rows = vec![
        SummaryRow::new("repetitions", samples.len(), "count"),
        SummaryRow::new("failed_queries", failed, "count"),
    ];
    if let Ok(stats) = compute_stats(&measured_latencies(samples)) {
        rows.extend(stats_rows("query_latency", &stats));
    }
    rows
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn sample_record(s: &LatencySample) -> [String; 14] {
    let (operation, batch_size, query_type) = match s.kind {
        SampleKind::Insert { batch_size } => ("insert", batch_size.to_string(), String::new()),
        SampleKind::Query { query_type } => ("query", String::new(), query_type.as_str().to_string()),
    };
    [
        s.run.to_string(),
        s.client.to_string(),
        s.seq.to_string(),
        operation.into(),
        batch_size,
        query_type,
        s.start_offset.as_nanos().to_string(),
        s.elapsed.as_nanos().to_string(),
        s.wall_start_ms.to_string(),
        s.records.to_string(),
        s.rows.to_string(),
        s.failed.to_string(),
        s.warmup.to_string(),
        s.error.clone().unwrap_or_default(),
    ]
}

fn resource_record(r: &ResourceSnapshot) -> [String; 13] {
    [
        r.wall_ms.to_string(),
        opt(r.cpu_user),
        opt(r.cpu_system),
        opt(r.cpu_iowait),
        opt(r.ctx_switches_per_sec),
        opt(r.mem_used_percent),
        opt(r.mem_cached_bytes),
        opt(r.swap_used_bytes),
        opt(r.disk_read_bytes_per_sec),
        opt(r.disk_write_bytes_per_sec),
        opt(r.disk_ops_per_sec),
        opt(r.net_sent_bytes_per_sec),
        opt(r.net_recv_bytes_per_sec),
    ]
}

fn write_csv<const N: usize, T>(
    path: &Path,
    header: &[&str; N],
    rows: impl IntoIterator<Item = T>,
    to_record: impl Fn(T) -> [String; N],
) -> Result<(), ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(to_record(row)).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Everything persisted for one run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub ordinal: usize,
    pub description: String,
    pub samples: Vec<LatencySample>,
    pub summary: Vec<SummaryRow>,
    pub resources: Option<MonitorLog>,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RunEntry {
    pub ordinal: usize,
    pub description: String,
    pub samples: String,
    pub summary: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resources: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monitor_gaps: Option<u64>,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Aborted,
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum MonitorState {
    On,
    Off,
}

/// Relative directory of a run inside the output directory.
pub fn run_dir_name(ordinal: usize) -> String {
    format!("run-{ordinal:03}")
}

/// Writes the run's CSVs and returns its manifest entry (paths relative to `out_dir`).
pub fn write_run(out_dir: &Path, run: &RunRecord) -> Result<RunEntry, ReportError> {
    let name = run_dir_name(run.ordinal);
    let dir = out_dir.join(&name);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let mut samples: Vec<&LatencySample> = run.samples.iter().collect();
    samples.sort_by_key(|s| (s.client, s.seq));
    write_csv(&dir.join(SAMPLES_FILE), &SAMPLES_HEADER, samples, sample_record)?;
    write_csv(&dir.join(SUMMARY_FILE), &SUMMARY_HEADER, &run.summary, |r| {
        [r.metric.clone(), r.value.clone(), r.unit.to_string()]
    })?;
    let resources = match &run.resources {
        Some(log) => {
            write_csv(&dir.join(RESOURCES_FILE), &RESOURCES_HEADER, &log.snapshots, resource_record)?;
            Some(format!("{name}/{RESOURCES_FILE}"))
        }
        None => None,
    };
    Ok(RunEntry {
        ordinal: run.ordinal,
        description: run.description.clone(),
        samples: format!("{name}/{SAMPLES_FILE}"),
        summary: format!("{name}/{SUMMARY_FILE}"),
        resources,
        monitor_gaps: run.resources.as_ref().map(|l| l.gaps),
        status: if run.aborted.is_some() {
            RunStatus::Aborted
        } else {
            RunStatus::Complete
        },
        abort_reason: run.aborted.clone(),
    })
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Manifest {
    pub benchmark_version: String,
    pub csv_schema_version: u32,
    pub definition_file: String,
    pub definition_sha256: String,
    pub start_wall_time: String,
    pub target_database: String,
    pub server_version: String,
    pub seed: u64,
    pub monitor: MonitorState,
    pub status: RunStatus,
    pub runs: Vec<RunEntry>,
}

/// Writes the manifest atomically, so a reader never sees a partial one.
pub fn write_manifest(out_dir: &Path, manifest: &Manifest) -> Result<PathBuf, ReportError> {
    let path = out_dir.join(MANIFEST_FILE);
    let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
    let body = serde_json::to_vec_pretty(manifest)?;
    fs::write(&tmp, body).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &path).map_err(io_err(&path))?;
    Ok(path)
}

/// Formats statistics the way the console summary prints them.
pub fn stats_line(samples: &[LatencySample]) -> Option<String> {
    compute_stats(&measured_latencies(samples))
        .ok()
        .map(|s| s.table_row())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn run_names() {
        assert_eq!(run_dir_name(0), "run-000");
        assert_eq!(run_dir_name(42), "run-042");
    }
}
