use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use tsbench_core::sysmon::{parse_snapshot, start_monitor, SysmonError};

fn fixture(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/glances")
        .join(name);
    std::fs::read_to_string(path).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

#[test]
fn every_fixture_parses() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/glances");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let body = std::fs::read_to_string(&path).unwrap();
        let snap = parse_snapshot(&body, 1).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(snap.cpu_user.is_some(), "{}", path.display());
        count += 1;
    }
    assert!(count >= 5);
}

#[test]
fn iowait_fixture() {
    let s = parse_snapshot(&fixture("postgres-scaling-iowait.json"), 42).unwrap();
    assert_eq!(s.wall_ms, 42);
    assert_eq!(s.cpu_iowait, Some(14.79));
    assert_eq!(s.cpu_user, Some(12.4));
    assert_eq!(s.cpu_system, Some(3.9));
    assert_eq!(s.mem_used_percent, Some(16.3));
    assert_eq!(s.mem_cached_bytes, Some(26_548_617_216));
    assert_eq!(s.swap_used_bytes, Some(134_217_728));
    // Interval deltas over time_since_update, summed over both disks.
    let t = 1.0021;
    assert!(close(s.ctx_switches_per_sec.unwrap(), 92450.0 / t));
    assert!(close(s.disk_read_bytes_per_sec.unwrap(), 49152.0 / t));
    assert!(close(s.disk_write_bytes_per_sec.unwrap(), (187_695_104.0 + 175_112_192.0) / t));
    assert!(close(s.disk_ops_per_sec.unwrap(), (12.0 + 845.0 + 790.0) / t));
    // Loopback excluded.
    assert!(close(s.net_recv_bytes_per_sec.unwrap(), 118_234_112.0 / t));
    assert!(close(s.net_sent_bytes_per_sec.unwrap(), 1_843_200.0 / t));
}

#[test]
fn zero_swap_is_zero_not_absent() {
    let s = parse_snapshot(&fixture("idle-no-swap.json"), 0).unwrap();
    assert_eq!(s.swap_used_bytes, Some(0));
}

#[test]
fn missing_network_is_absent() {
    let s = parse_snapshot(&fixture("no-network-section.json"), 0).unwrap();
    assert_eq!(s.net_sent_bytes_per_sec, None);
    assert_eq!(s.net_recv_bytes_per_sec, None);
    assert!(s.disk_write_bytes_per_sec.is_some());
}

#[test]
fn explicit_rates_preferred() {
    let s = parse_snapshot(&fixture("glances4-rates.json"), 0).unwrap();
    assert_eq!(s.ctx_switches_per_sec, Some(150_600.0));
    assert_eq!(s.disk_write_bytes_per_sec, Some(262_144_000.0));
    assert_eq!(s.disk_ops_per_sec, Some(1205.0));
    assert_eq!(s.net_recv_bytes_per_sec, Some(125_000_000.0));
}

#[test]
fn partitions_not_double_counted() {
    let s = parse_snapshot(&fixture("postgres-heavy-write.json"), 0).unwrap();
    assert!(close(s.disk_read_bytes_per_sec.unwrap(), 10_158_080.0 / 1.0103));
}

/// Minimal HTTP server answering every request with `body`.
fn stub_server(body: String) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = Arc::clone(&hits);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            while reader.read_line(&mut line).unwrap_or(0) > 0 && line != "\r\n" {
                line.clear();
            }
            counter.fetch_add(1, Ordering::SeqCst);
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            );
        }
    });
    (format!("http://{addr}"), hits)
}

#[test]
fn monitor_polls_stub_endpoint() {
    let (url, hits) = stub_server(fixture("postgres-scaling-iowait.json"));
    let handle = start_monitor(&url, Duration::from_millis(50)).unwrap();
    thread::sleep(Duration::from_millis(530));
    let log = handle.stop();
    // Ten ticks in 530 ms, give or take one for scheduling.
    assert!((9..=11).contains(&log.snapshots.len()), "{}", log.snapshots.len());
    assert_eq!(log.gaps, 0);
    assert!(log.snapshots.iter().all(|s| s.cpu_iowait == Some(14.79)));
    assert!(log.snapshots.iter().all(|s| s.wall_ms <= log.stopped_at_ms));
    let after_stop = hits.load(Ordering::SeqCst);
    thread::sleep(Duration::from_millis(150));
    assert_eq!(hits.load(Ordering::SeqCst), after_stop, "polled after stop");
}

#[test]
fn unreachable_endpoint_fails_at_start() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = start_monitor(&format!("http://127.0.0.1:{port}"), Duration::from_secs(1)).err();
    assert!(matches!(err, Some(SysmonError::Http { .. })));
}

#[test]
fn malformed_endpoint_body_fails_at_start() {
    let (url, _) = stub_server("<html>maintenance</html>".into());
    let err = start_monitor(&url, Duration::from_secs(1)).err();
    assert!(matches!(err, Some(SysmonError::Parse(_))));
}
