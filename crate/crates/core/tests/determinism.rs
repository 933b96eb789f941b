use quicmqtt::bench::conn_overhead::{bench_conn_overhead, quic_run, OverheadConfig};
use quicmqtt::bench::half_open::{bench_half_open, HalfOpenConfig};
use quicmqtt::bench::hol::{bench_hol, HolConfig};
use quicmqtt::bench::migrate::{bench_migrate, MigrateConfig};
use quicmqtt::bench::runner::{run_batch, run_batch_sequential};
use quicmqtt::bench::{BenchResult, Mode};
use quicmqtt::netsim::Profile;
use std::time::Duration;

fn twice(f: impl Fn() -> BenchResult) {
    let a = f().to_json();
    assert_eq!(a, f().to_json());
}

#[test]
fn conn_overhead_json_is_stable() {
    for p in Profile::ALL {
        let cfg = OverheadConfig {
            experiments: 3,
            iterations: 2,
            ..OverheadConfig::new(p, 11)
        };
        twice(|| bench_conn_overhead(&cfg, &Mode::ALL));
    }
}

#[test]
fn hol_json_is_stable() {
    let cfg = HolConfig {
        messages: 60,
        ..HolConfig::new(Profile::WIRED, 4)
    };
    twice(|| bench_hol(&Profile::ALL, &cfg));
}

#[test]
fn half_open_json_is_stable() {
    let cfg = HalfOpenConfig {
        publishers: 3,
        conns_per_publisher: 2,
        ..HalfOpenConfig::new(Profile::WIRELESS, 4)
    };
    twice(|| bench_half_open(&cfg));
}

#[test]
fn migrate_json_is_stable() {
    let cfg = MigrateConfig {
        changes: 2,
        interval: Duration::from_secs(20),
        duration: Duration::from_secs(60),
        ..MigrateConfig::new(Profile::WIRELESS, 4)
    };
    twice(|| bench_migrate(&cfg));
}

#[test]
fn seed_changes_lossy_runs() {
    let run = |seed| {
        let cfg = OverheadConfig {
            experiments: 4,
            iterations: 4,
            ..OverheadConfig::new(Profile::WIRELESS, seed)
        };
        bench_conn_overhead(&cfg, &[Mode::Tcp]).to_json()
    };
    assert_ne!(run(1), run(2));
}

#[test]
fn parallel_and_sequential_batches_agree() {
    let seeds: Vec<u64> = (0..12).collect();
    let f = |s| quic_run(Profile::WIRELESS, Mode::Quic0Rtt, s);
    assert_eq!(run_batch(seeds.clone(), f), run_batch_sequential(seeds, f));
}
