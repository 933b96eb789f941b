//! One PASS/FAIL line per acceptance criterion; exits nonzero if any fails.
//! Detail lines under each criterion are indented.

use quicmqtt::bench::conn_overhead::{bench_conn_overhead, OverheadConfig};
use quicmqtt::bench::half_open::{bench_half_open, HalfOpenConfig};
use quicmqtt::bench::hol::{bench_hol, isolation_pair, HolConfig, DROP_RATES};
use quicmqtt::bench::migrate::{bench_migrate, MigrateConfig};
use quicmqtt::bench::{BenchResult, Mode};
use quicmqtt::netsim::Profile;
use std::process::ExitCode;
use std::time::{Duration, Instant};

const SEED: u64 = 1;
/// Percentage points either side of the target reduction.
const RATIO_TOLERANCE: f64 = 5.0;
const MAX_SIM_TIME_S: f64 = 5.0;
const MAX_WALL: Duration = Duration::from_secs(1);

/// (role, 1-RTT target, 0-RTT target), in percent.
const TARGETS: [(&str, f64, f64); 3] = [
    ("broker", 35.29, 47.05),
    ("subscriber", 36.84, 47.36),
    ("publisher", 33.33, 46.66),
];

/// Label, first JSON output and a closure that reruns the benchmark.
type Rerun = (String, String, Box<dyn Fn() -> BenchResult>);

struct Report {
    failed: usize,
    reruns: Vec<Rerun>,
}

impl Report {
    fn criterion(&mut self, name: &str, details: Vec<String>, ok: bool) {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        for d in details {
            println!("    {d}");
        }
        if !ok {
            self.failed += 1;
        }
    }

    fn run(&mut self, label: String, f: impl Fn() -> BenchResult + 'static) -> BenchResult {
        let r = f();
        self.reruns.push((label, r.to_json(), Box::new(f)));
        r
    }
}

fn check_all(r: &BenchResult, details: &mut Vec<String>) -> bool {
    let mut ok = true;
    for (k, v) in &r.checks {
        if !v {
            details.push(format!("check {}/{k} failed", r.scenario));
            ok = false;
        }
    }
    ok
}

fn conn_ratios(rep: &mut Report) {
    let cfg = OverheadConfig::new(Profile::WIRED, SEED);
    let t = Instant::now();
    let r = rep.run("conn_overhead/wired".into(), move || {
        bench_conn_overhead(&cfg, &Mode::ALL)
    });
    let wall = t.elapsed();
    let mut d = Vec::new();
    let mut ok = check_all(&r, &mut d);
    for (role, one, zero) in TARGETS {
        for (mode, want) in [("quic1rtt", one), ("quic0rtt", zero)] {
            let got = r.metrics[&format!("wired/{mode}/{role}/reduction_pct")];
            let within = (got - want).abs() <= RATIO_TOLERANCE;
            ok &= within;
            d.push(format!(
                "{role} {mode}: {got:.2}% (target {want:.2} ± {RATIO_TOLERANCE}){}",
                if within { "" } else { " OUT OF RANGE" }
            ));
        }
    }
    let sim = Mode::ALL
        .iter()
        .map(|m| r.metrics[&format!("wired/{}/max_sim_time_s", m.as_str())])
        .fold(0.0, f64::max);
    d.push(format!(
        "longest run {sim:.4} s simulated (< {MAX_SIM_TIME_S}), batch {:.3} s wall (< {:?})",
        wall.as_secs_f64(),
        MAX_WALL
    ));
    ok &= sim < MAX_SIM_TIME_S && wall < MAX_WALL;
    rep.criterion("connection-overhead ratios", d, ok);
}

fn max_claim(rep: &mut Report) {
    let mut d = Vec::new();
    let mut ok = true;
    let mut best = Vec::new();
    for p in Profile::ALL {
        let cfg = OverheadConfig::new(p, SEED);
        let r = rep.run(format!("conn_overhead/{}", p.name), move || {
            bench_conn_overhead(&cfg, &Mode::ALL)
        });
        ok &= check_all(&r, &mut d);
        let broker = r.metrics[&format!("{}/quic0rtt/broker/reduction_pct", p.name)];
        d.push(format!("{} 0-RTT broker reduction {broker:.2}%", p.name));
        best.push(broker);
    }
    let top = best.iter().copied().fold(f64::MIN, f64::max);
    let (wired, wireless, long) = (best[0], best[1], best[2]);
    let ordered = wireless > long && long > wired;
    d.push(format!(
        "best {top:.2}% (need ≥ 50), ordering wireless > long_distance > wired: {ordered}"
    ));
    ok &= top >= 50.0 && ordered;
    rep.criterion("maximum 0-RTT reduction", d, ok);
}

fn hol(rep: &mut Report) {
    let base = HolConfig::new(Profile::WIRED, SEED);
    let r = rep.run("hol".into(), move || bench_hol(&Profile::ALL, &base));
    let mut d = Vec::new();
    let ok = check_all(&r, &mut d);
    for p in Profile::ALL {
        let series: Vec<String> = DROP_RATES
            .iter()
            .map(|(pct, _)| {
                format!(
                    "{pct}%: {:.2}",
                    r.metrics[&format!("{}/drop{pct}/improvement_pct", p.name)]
                )
            })
            .collect();
        d.push(format!("{} improvement {}", p.name, series.join(", ")));
    }
    rep.criterion("head-of-line blocking", d, ok);
}

fn isolation(rep: &mut Report) {
    let mut d = Vec::new();
    let mut ok = true;
    for p in Profile::ALL {
        let cfg = HolConfig {
            streams: 2,
            ..HolConfig::new(p, SEED)
        };
        for (pct, every_n) in DROP_RATES {
            let (with, without) = isolation_pair(&cfg, 0, every_n);
            let same = with == without && with.iter().all(Option::is_some);
            if !same {
                let diff = with.iter().zip(&without).filter(|(a, b)| a != b).count();
                d.push(format!(
                    "{} drop{pct}: {diff} of {} messages differ",
                    p.name,
                    with.len()
                ));
            }
            ok &= same;
        }
    }
    d.push(format!(
        "{} profiles × {} drop rates compared",
        Profile::ALL.len(),
        DROP_RATES.len()
    ));
    rep.criterion("stream isolation", d, ok);
}

fn half_open(rep: &mut Report) {
    let cfg = HalfOpenConfig::new(Profile::WIRED, SEED);
    let r = rep.run("half_open".into(), move || bench_half_open(&cfg));
    let mut d = Vec::new();
    let ok = check_all(&r, &mut d);
    for k in [
        "established",
        "quic_reclaimed_after_s",
        "tcp_final_count",
        "broker_sessions_left",
    ] {
        if let Some(v) = r.metrics.get(k) {
            d.push(format!("{k} = {v}"));
        }
    }
    rep.criterion("half-open reclamation", d, ok);
}

fn migration(rep: &mut Report) {
    let mut d = Vec::new();
    let mut ok = true;
    for p in Profile::ALL {
        let cfg = MigrateConfig::new(p.lossless(), SEED);
        let r = rep.run(format!("migrate/{}", p.name), move || bench_migrate(&cfg));
        ok &= check_all(&r, &mut d);
        let gaps: Vec<String> = (1..=cfg.changes)
            .filter_map(|i| r.metrics.get(&format!("change{i}/quic_excess_gap_s")))
            .map(|g| format!("{g:.4}"))
            .collect();
        d.push(format!(
            "{} (lossless): excess gap per change [{}] s, rtt {:.4} s",
            p.name,
            gaps.join(", "),
            r.metrics.get("rtt_s").copied().unwrap_or(f64::NAN)
        ));
    }
    rep.criterion("migration", d, ok);
}

fn suite(rep: &mut Report, name: &str, results: Vec<(String, Result<(), String>)>) {
    let mut d = Vec::new();
    let mut ok = true;
    for (k, r) in results {
        match r {
            Ok(()) => d.push(format!("{k}: ok")),
            Err(e) => {
                d.push(format!("{k}: {e}"));
                ok = false;
            }
        }
    }
    rep.criterion(name, d, ok);
}

fn determinism(rep: &mut Report) {
    let mut d = Vec::new();
    let mut ok = true;
    for (label, first, f) in &rep.reruns {
        let same = f().to_json() == *first;
        if !same {
            d.push(format!("{label}: JSON differs on rerun"));
        }
        ok &= same;
    }
    d.push(format!("{} benchmark runs repeated", rep.reruns.len()));
    rep.criterion("determinism", d, ok);
}

fn main() -> ExitCode {
    let mut rep = Report {
        failed: 0,
        reruns: Vec::new(),
    };
    conn_ratios(&mut rep);
    max_claim(&mut rep);
    hol(&mut rep);
    isolation(&mut rep);
    half_open(&mut rep);
    migration(&mut rep);
    let crypto = quicmqtt_verify::crypto_suite()
        .into_iter()
        .map(|(k, r)| (k.to_string(), r))
        .collect();
    suite(&mut rep, "crypto property suite", crypto);
    suite(
        &mut rep,
        "0-RTT semantics",
        quicmqtt_verify::zero_rtt_suite(),
    );
    determinism(&mut rep);
    println!("{} of 9 criteria failed", rep.failed);
    if rep.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
