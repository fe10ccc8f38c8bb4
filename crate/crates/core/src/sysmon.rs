//! Resource monitoring through a Glances-compatible REST endpoint.
//!
//! A background thread polls the endpoint at a fixed period and keeps every
//! parsed [`ResourceSnapshot`]. Failed polls are counted as gaps and do not
//! stop sampling.

use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde_json::{Map, Value};
use thiserror::Error;

/// Path of the all-plugins document in Glances' v3 API.
pub const DEFAULT_API_PATH: &str = "/api/3/all";

#[derive(Debug, Error)]
pub enum SysmonError {
    #[error("monitor endpoint {url}: {message}")]
    Http { url: String, message: String },
    #[error("invalid monitor document: {0}")]
    Parse(String),
    #[error("{field} out of range: {value}")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("monitor period must be positive")]
    ZeroPeriod,
}

/// One poll of the database host.
///
/// Fields missing from the document are `None`, never zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResourceSnapshot {
    pub wall_ms: i64,
    pub cpu_user: Option<f64>,
    pub cpu_system: Option<f64>,
    pub cpu_iowait: Option<f64>,
    pub ctx_switches_per_sec: Option<f64>,
    pub mem_used_percent: Option<f64>,
    pub mem_cached_bytes: Option<u64>,
    pub swap_used_bytes: Option<u64>,
    pub disk_read_bytes_per_sec: Option<f64>,
    pub disk_write_bytes_per_sec: Option<f64>,
    pub disk_ops_per_sec: Option<f64>,
    pub net_sent_bytes_per_sec: Option<f64>,
    pub net_recv_bytes_per_sec: Option<f64>,
}

fn number(obj: &Map<String, Value>, key: &str) -> Result<Option<f64>, SysmonError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Number(n)) => Ok(n.as_f64()),
        Some(other) => Err(SysmonError::Parse(format!("`{key}` is not a number: {other}"))),
    }
}

fn percent(obj: &Map<String, Value>, key: &str, field: &'static str) -> Result<Option<f64>, SysmonError> {
    match number(obj, key)? {
        Some(v) if !(0.0..=100.0).contains(&v) => Err(SysmonError::OutOfRange { field, value: v }),
        v => Ok(v),
    }
}

fn bytes(obj: &Map<String, Value>, key: &str, field: &'static str) -> Result<Option<u64>, SysmonError> {
    match number(obj, key)? {
        Some(v) if v < 0.0 => Err(SysmonError::OutOfRange { field, value: v }),
        v => Ok(v.map(|v| v as u64)),
    }
}

/// `<key>_rate_per_sec` when present, else the per-interval delta divided by
/// `time_since_update`.
fn rate(obj: &Map<String, Value>, rate_key: &str, delta_key: &str) -> Result<Option<f64>, SysmonError> {
    if let Some(r) = number(obj, rate_key)? {
        return Ok(Some(r));
    }
    let (Some(delta), Some(interval)) = (number(obj, delta_key)?, number(obj, "time_since_update")?) else {
        return Ok(None);
    };
    Ok((interval > 0.0).then(|| delta / interval))
}

fn non_negative(v: Option<f64>, field: &'static str) -> Result<Option<f64>, SysmonError> {
    match v {
        Some(v) if v < 0.0 || !v.is_finite() => Err(SysmonError::OutOfRange { field, value: v }),
        v => Ok(v),
    }
}

fn section<'a>(root: &'a Map<String, Value>, key: &str) -> Result<Option<&'a Map<String, Value>>, SysmonError> {
    match root.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Object(m)) => Ok(Some(m)),
        Some(_) => Err(SysmonError::Parse(format!("`{key}` is not an object"))),
    }
}

fn devices<'a>(root: &'a Map<String, Value>, key: &str) -> Result<Option<Vec<&'a Map<String, Value>>>, SysmonError> {
    match root.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(items)) if items.is_empty() => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_object()
                    .ok_or_else(|| SysmonError::Parse(format!("`{key}` entry is not an object")))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some),
        Some(_) => Err(SysmonError::Parse(format!("`{key}` is not a list"))),
    }
}

/// Sums a per-device rate; `None` if no device reports it.
fn sum_rates(
    items: &[&Map<String, Value>],
    rate_key: &str,
    delta_key: &str,
) -> Result<Option<f64>, SysmonError> {
    let mut total: Option<f64> = None;
    for item in items {
        if let Some(r) = rate(item, rate_key, delta_key)? {
            *total.get_or_insert(0.0) += r;
        }
    }
    Ok(total)
}

/// Drops partitions listed next to their parent disk (`sda1` beside `sda`,
/// `nvme0n1p2` beside `nvme0n1`) and virtual loop/ram devices, so traffic
/// is not counted twice.
fn whole_disks(disks: Vec<&Map<String, Value>>) -> Vec<&Map<String, Value>> {
    let name = |d: &Map<String, Value>| d.get("disk_name").and_then(Value::as_str).unwrap_or("").to_string();
    let names: Vec<String> = disks.iter().map(|d| name(d)).collect();
    let is_partition = |n: &str| {
        names.iter().any(|parent| {
            !parent.is_empty()
                && n.len() > parent.len()
                && n.starts_with(parent.as_str())
                && {
                    let rest = &n[parent.len()..];
                    let digits = rest.strip_prefix('p').unwrap_or(rest);
                    !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
                }
        })
    };
    disks
        .into_iter()
        .filter(|d| {
            let n = name(d);
            !n.starts_with("loop") && !n.starts_with("ram") && !is_partition(&n)
        })
        .collect()
}

/// Extracts a snapshot from the endpoint's all-plugins document.
pub fn parse_snapshot(body: &str, wall_ms: i64) -> Result<ResourceSnapshot, SysmonError> {
    let doc: Value = serde_json::from_str(body).map_err(|e| SysmonError::Parse(e.to_string()))?;
    let root = doc
        .as_object()
        .ok_or_else(|| SysmonError::Parse("document is not an object".into()))?;
    let mut snap = ResourceSnapshot {
        wall_ms,
        ..Default::default()
    };

    if let Some(cpu) = section(root, "cpu")? {
        snap.cpu_user = percent(cpu, "user", "cpu_user")?;
        snap.cpu_system = percent(cpu, "system", "cpu_system")?;
        snap.cpu_iowait = percent(cpu, "iowait", "cpu_iowait")?;
        snap.ctx_switches_per_sec =
            non_negative(rate(cpu, "ctx_switches_rate_per_sec", "ctx_switches")?, "ctx_switches")?;
    }
    if let Some(mem) = section(root, "mem")? {
        snap.mem_used_percent = percent(mem, "percent", "mem_used")?;
        snap.mem_cached_bytes = bytes(mem, "cached", "mem_cached")?;
    }
    if let Some(swap) = section(root, "memswap")? {
        snap.swap_used_bytes = bytes(swap, "used", "swap_used")?;
    }
    if let Some(disks) = devices(root, "diskio")? {
        let disks = whole_disks(disks);
        snap.disk_read_bytes_per_sec =
            non_negative(sum_rates(&disks, "read_bytes_rate_per_sec", "read_bytes")?, "disk_read")?;
        snap.disk_write_bytes_per_sec =
            non_negative(sum_rates(&disks, "write_bytes_rate_per_sec", "write_bytes")?, "disk_write")?;
        let reads = sum_rates(&disks, "read_count_rate_per_sec", "read_count")?;
        let writes = sum_rates(&disks, "write_count_rate_per_sec", "write_count")?;
        snap.disk_ops_per_sec = non_negative(
            match (reads, writes) {
                (None, None) => None,
                (r, w) => Some(r.unwrap_or(0.0) + w.unwrap_or(0.0)),
            },
            "disk_ops",
        )?;
    }
    if let Some(nics) = devices(root, "network")? {
        // Loopback traffic is the benchmark client talking to itself, not the server.
        let nics: Vec<_> = nics
            .into_iter()
            .filter(|n| n.get("interface_name").and_then(Value::as_str) != Some("lo"))
            .collect();
        snap.net_sent_bytes_per_sec =
            non_negative(sum_rates(&nics, "bytes_sent_rate_per_sec", "tx")?, "net_sent")?;
        snap.net_recv_bytes_per_sec =
            non_negative(sum_rates(&nics, "bytes_recv_rate_per_sec", "rx")?, "net_recv")?;
    }
    Ok(snap)
}

/// Where the monitor gets its documents from.
pub trait SnapshotSource: Send {
    fn fetch(&mut self) -> Result<String, SysmonError>;
}

pub struct HttpSource {
    client: reqwest::blocking::Client,
    url: String,
}

impl HttpSource {
    /// `endpoint` may be a bare host URL, in which case the v3 path is appended.
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self, SysmonError> {
        let trimmed = endpoint.trim_end_matches('/');
        let url = if trimmed.contains("/api/") {
            trimmed.to_string()
        } else {
            format!("{trimmed}{DEFAULT_API_PATH}")
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| SysmonError::Http {
                url: url.clone(),
                message: e.to_string(),
            })?;
        Ok(HttpSource { client, url })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl SnapshotSource for HttpSource {
    fn fetch(&mut self) -> Result<String, SysmonError> {
        let err = |e: reqwest::Error| SysmonError::Http {
            url: self.url.clone(),
            message: e.to_string(),
        };
        self.client
            .get(&self.url)
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.text())
            .map_err(err)
    }
}

fn wall_now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or_default()
}

/// Everything a monitor collected.
#[derive(Debug, Clone, Default)]
pub struct MonitorLog {
    pub snapshots: Vec<ResourceSnapshot>,
    /// Polls that failed or returned an unusable document.
    pub gaps: u64,
    pub stopped_at_ms: i64,
}

/// Cloneable stop signal, usable from any thread.
#[derive(Clone)]
pub struct StopSignal(mpsc::Sender<()>);

impl StopSignal {
    pub fn stop(&self) {
        let _ = self.0.send(());
    }
}

pub struct MonitorHandle {
    signal: StopSignal,
    thread: JoinHandle<MonitorLog>,
}

impl MonitorHandle {
    pub fn signal(&self) -> StopSignal {
        self.signal.clone()
    }

    /// Stops sampling and returns the log. Nothing is sampled after this call.
    pub fn stop(self) -> MonitorLog {
        self.signal.stop();
        self.thread.join().expect("monitor thread panicked")
    }
}

/// Samples `source` every `period`, starting one period from now.
///
/// Ticks are scheduled at fixed offsets from the start, so a slow poll does
/// not push later samples back.
pub fn spawn_monitor(mut source: Box<dyn SnapshotSource>, period: Duration) -> Result<MonitorHandle, SysmonError> {
    if period.is_zero() {
        return Err(SysmonError::ZeroPeriod);
    }
    let (tx, rx) = mpsc::channel::<()>();
    let thread = thread::Builder::new()
        .name("sysmon".into())
        .spawn(move || {
            let start = Instant::now();
            let mut log = MonitorLog::default();
            let mut tick = 1u32;
            loop {
                let due = start + period * tick;
                let wait = due.saturating_duration_since(Instant::now());
                match rx.recv_timeout(wait) {
                    Err(RecvTimeoutError::Timeout) => {}
                    Ok(()) | Err(RecvTimeoutError::Disconnected) => break,
                }
                // Skip ticks already missed instead of bursting to catch up.
                let elapsed = start.elapsed();
                tick = (elapsed.as_nanos() / period.as_nanos()) as u32 + 1;
                let wall = wall_now_ms();
                match source.fetch().and_then(|body| parse_snapshot(&body, wall)) {
                    Ok(snap) => log.snapshots.push(snap),
                    Err(e) => {
                        log.gaps += 1;
                        log::warn!("resource poll skipped: {e}");
                    }
                }
            }
            log.stopped_at_ms = wall_now_ms();
            log
        })
        .expect("spawn monitor thread");
    Ok(MonitorHandle {
        signal: StopSignal(tx),
        thread,
    })
}

/// Probes `endpoint` once, then starts background sampling.
pub fn start_monitor(endpoint: &str, period: Duration) -> Result<MonitorHandle, SysmonError> {
    let timeout = period.clamp(Duration::from_millis(500), Duration::from_secs(5));
    let mut source = HttpSource::new(endpoint, timeout)?;
    parse_snapshot(&source.fetch()?, wall_now_ms())?;
    spawn_monitor(Box::new(source), period)
}
