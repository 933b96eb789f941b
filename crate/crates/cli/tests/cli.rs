use std::net::UdpSocket;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::thread::sleep;
use std::time::Duration;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_quicmqtt"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn dir(d: &Path) -> &str {
    d.to_str().unwrap()
}

#[test]
fn pub_count_three_reaches_subscriber() {
    let o = run(&["pub", "--topic", "t", "--count", "3", "--message", "hi"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "t hi\nt hi\nt hi\n");
}

#[test]
fn resume_with_prior_session_sends_full_chlo_first() {
    let d = tempfile::tempdir().unwrap();
    let first = run(&[
        "pub",
        "--topic",
        "t",
        "--resume",
        "--state-dir",
        dir(d.path()),
    ]);
    assert!(first.status.success());
    assert!(
        stderr(&first).contains("first datagram chlo-inchoate"),
        "{}",
        stderr(&first)
    );
    let trace = d.path().join("trace.csv");
    let second = run(&[
        "pub",
        "--topic",
        "t",
        "--resume",
        "--state-dir",
        dir(d.path()),
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert!(second.status.success());
    assert!(stderr(&second).contains("handshake ZeroRtt"));
    assert!(stderr(&second).contains("first datagram chlo-full"));
    let csv = std::fs::read_to_string(trace).unwrap();
    assert!(csv.starts_with("time_us,event,flow,size,annotation\n"));
    assert!(csv.contains("chlo-full"));
}

#[test]
fn persistent_subscription_survives_restart() {
    let d = tempfile::tempdir().unwrap();
    let base = [
        "sub",
        "--topic",
        "a/b",
        "--count",
        "2",
        "--persist",
        "--state-dir",
        dir(d.path()),
    ];
    let o = run(&base);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 2);
    let mut again = base.to_vec();
    again.push("--skip-subscribe");
    let o = run(&again);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("session present"));
    assert_eq!(stdout(&o), "a/b message 0\na/b message 1\n");
}

#[test]
fn without_stored_session_nothing_arrives() {
    let o = run(&[
        "sub",
        "--topic",
        "a/b",
        "--count",
        "1",
        "--persist",
        "--skip-subscribe",
        "--duration-s",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).is_empty());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(
        run(&["pub", "--topic", "t", "--bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(&["pub", "--topic", "t", "--profile", "lunar"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(&["broker"]).status.code(), Some(2));
    assert_eq!(
        run(&["bench", "hol", "--streams", "1"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(&["bench", "conn-overhead", "--modes", "udp"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn bench_json_is_reproducible() {
    let args = [
        "bench",
        "conn-overhead",
        "--experiments",
        "2",
        "--iterations",
        "2",
        "--seed",
        "5",
        "--json",
        "-",
    ];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["scenario"], "conn_overhead");
    assert_eq!(v["seed"], 5);
    assert!(stderr(&a).contains("PASS conn_overhead/"));
}

#[test]
fn failed_check_exits_1() {
    // Too short a horizon for the idle timeout to reclaim anything.
    let o = run(&[
        "bench",
        "half-open",
        "--publishers",
        "2",
        "--conns",
        "2",
        "--horizon-s",
        "10",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("FAIL half_open/quic_reclaimed_within_60s"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn csv_series_written() {
    let d = tempfile::tempdir().unwrap();
    let csv = d.path().join("s.csv");
    let o = run(&[
        "bench",
        "half-open",
        "--publishers",
        "2",
        "--conns",
        "2",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(csv).unwrap().lines().count() > 10);
}

#[test]
fn real_udp_broker_pub_sub() {
    let d = tempfile::tempdir().unwrap();
    let port = UdpSocket::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let addr = format!("127.0.0.1:{port}");
    let state = dir(d.path());
    let mut broker = bin()
        .args([
            "broker",
            "--listen",
            &addr,
            "--state-dir",
            state,
            "--duration-s",
            "8",
        ])
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    for _ in 0..50 {
        if d.path().join("broker.pub").exists() {
            break;
        }
        sleep(Duration::from_millis(50));
    }
    let sub = bin()
        .args([
            "sub",
            "--udp",
            &addr,
            "--state-dir",
            state,
            "--topic",
            "t",
            "--count",
            "3",
            "--duration-s",
            "6",
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    sleep(Duration::from_millis(500));
    let trace = d.path().join("pub.txt");
    let p = run(&[
        "pub",
        "--udp",
        &addr,
        "--state-dir",
        state,
        "--topic",
        "t",
        "--count",
        "3",
        "--interval-ms",
        "20",
        "--resume",
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert!(p.status.success(), "{}", stderr(&p));
    let first = std::fs::read_to_string(&trace).unwrap();
    assert!(first.starts_with("chlo-inchoate;"));
    let sub = sub.wait_with_output().unwrap();
    assert!(sub.status.success());
    assert_eq!(stdout(&sub), "t hello\nt hello\nt hello\n");
    let p = run(&[
        "pub",
        "--udp",
        &addr,
        "--state-dir",
        state,
        "--topic",
        "t",
        "--resume",
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert!(p.status.success());
    assert!(std::fs::read_to_string(&trace)
        .unwrap()
        .starts_with("chlo-full;"));
    broker.kill().ok();
    broker.wait().ok();
}
