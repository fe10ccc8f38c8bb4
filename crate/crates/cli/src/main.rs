//! `tsbench`: runs a workload definition against a time-series database.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, SystemTime};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use tsbench_core::adapter::{backend_for, Backend};
use tsbench_core::config::{expand_runs, parse_workload, PlannedWorkload, RunPlan, WorkloadDefinition};
use tsbench_core::engine::{between_runs_reset, populate, run_ingestion, run_query, ResetHook};
use tsbench_core::metrics::{compute_stats, throughput_bytes, to_megabytes, QueryStats, DEFAULT_RECORD_SIZE};
use tsbench_core::report::{
    ensure_writable, ingestion_summary_rows, measured_latencies, query_summary_rows, sha256_hex, write_manifest,
    write_run, Manifest, MonitorState, RunRecord, RunStatus, CSV_SCHEMA_VERSION,
};
use tsbench_core::sysmon::{parse_snapshot, start_monitor, HttpSource, MonitorHandle, SnapshotSource};

/// Records per insert when filling the table before a query run.
const POPULATE_BATCH: usize = 50_000;

#[derive(Parser)]
#[command(name = "tsbench", version, about = "Time-series database benchmark runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every run of a workload definition.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Workload definition file (XML).
    definition: PathBuf,
    /// Output directory for CSVs and the manifest.
    #[arg(long, default_value = "tsbench-results")]
    out: PathBuf,
    /// Glances-compatible endpoint on the database host, e.g. http://db:61208.
    #[arg(long)]
    monitor: Option<String>,
    /// Resource polling period, e.g. `1s` or `500ms`.
    #[arg(long, value_parser = humantime::parse_duration)]
    monitor_period: Option<Duration>,
    /// Shell command run between runs, e.g. to restart the server.
    #[arg(long)]
    reset_hook: Option<String>,
    /// Print the expanded runs and exit without touching the database or disk.
    #[arg(long)]
    dry_run: bool,
    /// Override the definition's seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// Process exit status with the error that caused it.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_CONNECT: u8 = 2;
const EXIT_ABORTED: u8 = 3;

trait ExitWith<T> {
    fn exit_with(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitWith<T> for Result<T, E> {
    fn exit_with(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code,
            error: e.into(),
        })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}

fn load_definition(args: &RunArgs) -> anyhow::Result<(WorkloadDefinition, String)> {
    let text = fs::read_to_string(&args.definition)
        .with_context(|| format!("cannot read {}", args.definition.display()))?;
    let mut def = parse_workload(&text).with_context(|| format!("{}", args.definition.display()))?;
    if let Some(seed) = args.seed {
        def.seed = seed;
    }
    if let Some(url) = &args.monitor {
        def.monitor_endpoint = Some(url.clone());
    }
    if let Some(period) = args.monitor_period {
        def.monitor_period = period;
    }
    if let Some(hook) = &args.reset_hook {
        def.reset_hook = Some(hook.clone());
    }
    def.validate()?;
    Ok((def, sha256_hex(text.as_bytes())))
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let (def, digest) = load_definition(&args).exit_with(EXIT_CONFIG)?;
    let plans = expand_runs(&def);
    if args.dry_run {
        for plan in &plans {
            println!("{plan}");
        }
        return Ok(());
    }

    // Everything that can fail without a partial result is checked before
    // the output directory is touched.
    let backend = backend_for(&def);
    let server_version = backend
        .connect()
        .and_then(|mut c| c.server_version())
        .exit_with(EXIT_CONNECT)?;
    info!("connected to {} {server_version}", def.target_database);
    if let Some(url) = &def.monitor_endpoint {
        let mut probe = HttpSource::new(url, Duration::from_secs(5)).exit_with(EXIT_CONNECT)?;
        probe
            .fetch()
            .and_then(|body| parse_snapshot(&body, 0))
            .map_err(|e| anyhow!("monitor endpoint {}: {e}", probe.url()))
            .exit_with(EXIT_CONNECT)?;
    }
    let created = !args.out.exists();
    ensure_writable(&args.out).exit_with(EXIT_ABORTED)?;
    if args.out.join(tsbench_core::report::MANIFEST_FILE).exists() {
        return Err(Failure {
            code: EXIT_ABORTED,
            error: anyhow!("{} already holds results; choose another --out", args.out.display()),
        });
    }

    let mut manifest = Manifest {
        benchmark_version: env!("CARGO_PKG_VERSION").to_string(),
        csv_schema_version: CSV_SCHEMA_VERSION,
        definition_file: args.definition.display().to_string(),
        definition_sha256: digest,
        start_wall_time: humantime::format_rfc3339_millis(SystemTime::now()).to_string(),
        target_database: def.target_database.to_string(),
        server_version,
        seed: def.seed,
        monitor: if def.monitor_endpoint.is_some() {
            MonitorState::On
        } else {
            MonitorState::Off
        },
        status: RunStatus::Complete,
        runs: Vec::new(),
    };

    let outcome = execute(&plans, backend.as_ref(), &args.out, &mut manifest);
    if outcome.is_err() {
        manifest.status = RunStatus::Aborted;
    }
    if manifest.runs.is_empty() && outcome.is_err() && created {
        // Nothing was written; leave no files behind.
        let _ = fs::remove_dir_all(&args.out);
        return outcome;
    }
    write_manifest(&args.out, &manifest).exit_with(EXIT_ABORTED)?;
    println!("results written to {}", args.out.display());
    outcome
}

fn execute(plans: &[RunPlan], backend: &dyn Backend, out: &Path, manifest: &mut Manifest) -> Result<(), Failure> {
    for plan in plans {
        let def = &plan.definition;
        println!("{plan}");
        if plan.ordinal > 0 {
            let hook = def.reset_hook.as_deref().map(ResetHook::new);
            if let Some(report) = between_runs_reset(hook.as_ref(), backend).exit_with(EXIT_CONNECT)? {
                info!("backend healthy {:?} after reset hook", report.health_wait);
            }
        }
        prepare(plan, backend).exit_with(EXIT_CONNECT)?;

        let monitor = start_run_monitor(def).exit_with(EXIT_CONNECT)?;
        let result = match plan.workload {
            PlannedWorkload::Ingestion { .. } => {
                let stop = def.stop_condition.expect("validated ingestion definition");
                run_ingestion(backend, plan, stop).map(|o| {
                    print_ingestion(&o.summary, &o.samples);
                    let summary = ingestion_summary_rows(&o.summary, &o.samples);
                    (o.samples, summary, o.aborted)
                })
            }
            PlannedWorkload::Query { .. } => run_query(backend, plan).map(|o| {
                print_query(&o.samples);
                let summary = query_summary_rows(&o.samples);
                (o.samples, summary, None)
            }),
        };
        let resources = monitor.map(MonitorHandle::stop);
        let (samples, summary, aborted) = match result {
            Ok(r) => r,
            Err(e) => {
                return Err(Failure {
                    code: EXIT_CONNECT,
                    error: anyhow!(e).context(format!("run {:03}", plan.ordinal)),
                })
            }
        };
        if let Some(log) = &resources {
            if log.gaps > 0 {
                warn!("{} resource polls failed during run {:03}", log.gaps, plan.ordinal);
            }
        }
        let record = RunRecord {
            ordinal: plan.ordinal,
            description: plan.to_string(),
            samples,
            summary,
            resources,
            aborted: aborted.clone(),
        };
        manifest.runs.push(write_run(out, &record).exit_with(EXIT_ABORTED)?);
        if let Some(reason) = aborted {
            return Err(Failure {
                code: EXIT_ABORTED,
                error: anyhow!("run {:03} aborted: {reason}", plan.ordinal),
            });
        }
    }
    Ok(())
}

/// Resets the table before an ingestion run, or fills it before a query run.
fn prepare(plan: &RunPlan, backend: &dyn Backend) -> anyhow::Result<()> {
    let def = &plan.definition;
    match plan.workload {
        PlannedWorkload::Ingestion { .. } => {
            if plan.ordinal == 0 || def.reset_between_runs {
                backend.connect()?.init_schema(def.sensor_number)?;
            }
        }
        PlannedWorkload::Query { .. } => {
            if let Some(n) = def.prepopulate_records {
                backend.connect()?.init_schema(def.sensor_number)?;
                let written = populate(backend, def, n, POPULATE_BATCH)?;
                info!("prepopulated {written} records");
            }
        }
    }
    Ok(())
}

fn start_run_monitor(def: &WorkloadDefinition) -> anyhow::Result<Option<MonitorHandle>> {
    def.monitor_endpoint
        .as_deref()
        .map(|url| start_monitor(url, def.monitor_period))
        .transpose()
        .map_err(Into::into)
}

fn print_stats(label: &str, stats: &QueryStats) {
    println!("  {label}\n  {}\n  {}", QueryStats::table_header(), stats.table_row());
}

fn print_ingestion(summary: &tsbench_core::engine::IngestionSummary, samples: &[tsbench_core::engine::LatencySample]) {
    println!(
        "  {} records in {:.3} s: {:.1} records/s ({:.2} MB/s)",
        summary.total_records,
        summary.wall_time.as_secs_f64(),
        summary.overall_rate,
        to_megabytes(throughput_bytes(summary.overall_rate, DEFAULT_RECORD_SIZE))
    );
    if let Ok(stats) = compute_stats(&measured_latencies(samples)) {
        print_stats("batch latency", &stats);
    }
}

fn print_query(samples: &[tsbench_core::engine::LatencySample]) {
    let failed = samples.iter().filter(|s| s.failed).count();
    if failed > 0 {
        println!("  {failed} of {} repetitions failed", samples.len());
    }
    if let Ok(stats) = compute_stats(&measured_latencies(samples)) {
        print_stats("query latency", &stats);
    }
}
