//! Address changes under steady load: the subscriber's address changes
//! periodically while a publisher streams messages to it.

use super::world::{has_received, host_addr, QuicWorld, BROKER_ADDR};
use super::BenchResult;
use crate::agents::ServerAgent;
use crate::mqtt::Kind;
use crate::netsim::tcp::{Ladder, LadderNode, RtoConfig};
use crate::netsim::{Network, Profile, SimConfig, TraceKind};
use crate::transport::TransportConfig;
use crate::{Role, Timestamp};
use serde::Serialize;
use std::collections::BTreeMap;
use std::time::Duration;

pub const TOPIC: &str = "bench/migrate";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MigrateConfig {
    pub profile: Profile,
    pub changes: usize,
    pub interval: Duration,
    pub duration: Duration,
    /// Publisher rate, messages per second.
    pub rate: u32,
    pub seed: u64,
}

impl MigrateConfig {
    pub fn new(profile: Profile, seed: u64) -> Self {
        MigrateConfig {
            profile,
            changes: 3,
            interval: Duration::from_secs(300),
            duration: Duration::from_secs(960),
            rate: 10,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MigrateRun {
    pub cid_constant: bool,
    pub handshake_packets_after_setup: usize,
    pub server_migrations: u64,
    /// Per change: longest delivery gap within a few seconds of it, less
    /// the publish interval, in seconds.
    pub excess_gap_s: Vec<f64>,
    pub rtt_s: f64,
    pub delivered: usize,
    pub published: usize,
    pub quic_throughput: Vec<(f64, usize)>,
    pub tcp_throughput: Vec<(f64, usize)>,
    /// Per change: seconds without delivery in the TCP model.
    pub tcp_gap_s: Vec<f64>,
    pub tcp_ladders: usize,
}

fn change_times(cfg: &MigrateConfig, start: Timestamp) -> Vec<Timestamp> {
    (1..=cfg.changes)
        .map(|i| start + cfg.interval * i as u32)
        .collect()
}

fn is_handshake(label: &str) -> bool {
    ["chlo", "rej", "shlo"].iter().any(|k| label.starts_with(k))
}

fn buckets(times: impl Iterator<Item = f64>, horizon: f64) -> Vec<(f64, usize)> {
    let mut counts: BTreeMap<u64, usize> = (0..horizon.ceil() as u64).map(|s| (s, 0)).collect();
    for t in times {
        if t >= 0.0 && t < horizon {
            *counts.entry(t as u64).or_default() += 1;
        }
    }
    counts.into_iter().map(|(s, c)| (s as f64, c)).collect()
}

/// Setup time of a TCP + TLS reconnection and resubscription from a new
/// address, by simulating the ladder once per change.
fn tcp_reconnects(cfg: &MigrateConfig) -> (Vec<f64>, usize) {
    let mut net = Network::new(SimConfig::from_profile(cfg.profile, cfg.seed ^ 0x7c9));
    let rto = RtoConfig::default();
    let mut gaps = Vec::new();
    let mut done = 0;
    for i in 0..cfg.changes {
        let client = host_addr(20 + i as u8, 8000);
        let server = std::net::SocketAddr::new(BROKER_ADDR.ip(), 9000 + i as u16);
        let c = net
            .add_node(
                client,
                Box::new(LadderNode::new(
                    Role::Client,
                    server,
                    Ladder::Resubscribe,
                    rto,
                )),
            )
            .unwrap();
        let s = net
            .add_node(
                server,
                Box::new(LadderNode::new(
                    Role::Server,
                    client,
                    Ladder::Resubscribe,
                    rto,
                )),
            )
            .unwrap();
        let start = net.now();
        net.node_mut::<LadderNode>(c).start();
        let limit = start + Duration::from_secs(120);
        if net.run_while(limit, |n| {
            n.node::<LadderNode>(c).received_at("suback").is_some()
        }) {
            done += 1;
        }
        net.run_while(limit, |n| n.node::<LadderNode>(s).is_done());
        // The old connection is noticed broken one round trip after the
        // move (the first segment from the new address is reset).
        let at = net
            .node::<LadderNode>(c)
            .received_at("suback")
            .unwrap_or(limit);
        gaps.push((at - start).as_secs_f64() + (cfg.profile.delay * 2).as_secs_f64());
        net.run_until(net.now() + Duration::from_secs(1));
    }
    (gaps, done)
}

pub fn run(cfg: &MigrateConfig) -> MigrateRun {
    let sim = SimConfig::from_profile(cfg.profile, cfg.seed);
    let mut w = QuicWorld::new(sim, TransportConfig::default(), cfg.seed);
    let sc = w.client_config("mig-sub");
    let s = w.add_fresh_client(host_addr(2, 6100), sc);
    w.client_mut(s).subscribe(TOPIC, 0).expect("valid filter");
    let pc = w.client_config("mig-pub");
    let p = w.add_fresh_client(host_addr(1, 6100), pc);
    w.run_for(Duration::from_secs(60), |w| {
        has_received(w.client(s), Kind::Suback) && has_received(w.client(p), Kind::Connack)
    });
    let cid = w.client(s).cid();
    let start = w.now() + Duration::from_millis(100);
    let setup_end = w.net.trace().len();
    let changes = change_times(cfg, start);
    for (i, &t) in changes.iter().enumerate() {
        w.net
            .schedule_address_change(t, s, host_addr(2, 6101 + i as u16));
    }
    let log_start = w.client(s).log().len();
    let period = Duration::from_secs(1) / cfg.rate;
    let count = (cfg.duration.as_secs_f64() * cfg.rate as f64) as usize;
    for k in 0..count {
        w.net.run_until(start + period * k as u32);
        let body = (k as u32).to_be_bytes();
        w.client_mut(p)
            .publish(TOPIC, &body, 0, false)
            .expect("valid topic");
        w.net.flush();
    }
    w.net.run_until(w.now() + Duration::from_secs(5));
    let log = &w.client(s).log()[log_start..];
    let arrivals: Vec<Timestamp> = log
        .iter()
        .filter(|(_, m)| m.kind == Kind::Publish)
        .map(|(t, _)| *t)
        .collect();
    let window = Duration::from_secs(3);
    let excess_gap_s = changes
        .iter()
        .map(|&c| {
            let near: Vec<Timestamp> = arrivals
                .iter()
                .copied()
                .filter(|&t| t + window >= c && t <= c + window)
                .collect();
            let gap = near
                .windows(2)
                .map(|x| x[1] - x[0])
                .max()
                .unwrap_or(window * 2);
            gap.as_secs_f64() - period.as_secs_f64()
        })
        .collect();
    let trace = &w.net.trace().events()[setup_end..];
    let sub = s;
    let broker = w.broker;
    let handshake_packets_after_setup = trace
        .iter()
        .filter(|e| {
            e.kind == TraceKind::Send
                && (e.src_node == sub || e.src_node == broker)
                && is_handshake(&e.label)
        })
        .count();
    let cid_tag = format!("cid={cid}");
    let cid_constant = w.client(s).cid() == cid
        && trace
            .iter()
            .filter(|e| e.kind == TraceKind::Send && e.src_node == sub)
            .all(|e| e.label.contains(&cid_tag));
    let server_migrations = w
        .net
        .node_mut::<ServerAgent>(broker)
        .endpoint()
        .connection(cid)
        .map_or(0, |c| c.stats().migrations);
    let horizon = cfg.duration.as_secs_f64();
    let quic_throughput = buckets(
        arrivals
            .iter()
            .map(|&t| (t.saturating_sub(start)).as_secs_f64()),
        horizon,
    );
    let (tcp_gap_s, tcp_ladders) = tcp_reconnects(cfg);
    let one_way = cfg.profile.delay.as_secs_f64();
    let tcp_arrivals = (0..count).filter_map(|k| {
        let sent = (period * k as u32).as_secs_f64();
        let moved = changes.iter().zip(&tcp_gap_s).any(|(&c, &g)| {
            let c = c.saturating_sub(start).as_secs_f64();
            sent >= c && sent < c + g
        });
        (!moved).then_some(sent + 2.0 * one_way)
    });
    let tcp_throughput = buckets(tcp_arrivals, horizon);
    MigrateRun {
        cid_constant,
        handshake_packets_after_setup,
        server_migrations,
        excess_gap_s,
        rtt_s: 2.0 * one_way,
        delivered: arrivals.len(),
        published: count,
        quic_throughput,
        tcp_throughput,
        tcp_gap_s,
        tcp_ladders,
    }
}

pub fn bench_migrate(cfg: &MigrateConfig) -> BenchResult {
    let mut r = BenchResult::new("migrate", cfg.seed);
    r.set_config("profile", cfg.profile.name);
    r.set_config("loss", cfg.profile.loss);
    r.set_config("changes", cfg.changes);
    r.set_config("interval_s", cfg.interval.as_secs_f64());
    r.set_config("duration_s", cfg.duration.as_secs_f64());
    r.set_config("rate", cfg.rate);
    let run = run(cfg);
    r.metrics.insert(
        "handshake_packets_after_setup".into(),
        run.handshake_packets_after_setup as f64,
    );
    r.metrics
        .insert("server_migrations".into(), run.server_migrations as f64);
    r.metrics.insert("delivered".into(), run.delivered as f64);
    r.metrics.insert("published".into(), run.published as f64);
    r.metrics.insert("rtt_s".into(), run.rtt_s);
    r.metrics
        .insert("tcp_ladders".into(), run.tcp_ladders as f64);
    for (i, (g, t)) in run.excess_gap_s.iter().zip(&run.tcp_gap_s).enumerate() {
        r.metrics
            .insert(format!("change{}/quic_excess_gap_s", i + 1), *g);
        r.metrics.insert(format!("change{}/tcp_gap_s", i + 1), *t);
    }
    r.checks.insert(
        "quic_no_rehandshake".into(),
        run.handshake_packets_after_setup == 0,
    );
    r.checks
        .insert("quic_cid_constant".into(), run.cid_constant);
    r.checks.insert(
        "quic_migrations_seen".into(),
        run.server_migrations == cfg.changes as u64,
    );
    r.checks.insert(
        "quic_gap_within_rtt".into(),
        run.excess_gap_s.iter().all(|&g| g <= run.rtt_s),
    );
    r.checks.insert(
        "tcp_ladder_per_change".into(),
        run.tcp_ladders >= cfg.changes,
    );
    r.checks.insert(
        "tcp_gap_per_change".into(),
        run.tcp_gap_s.iter().all(|&g| g > 0.0),
    );
    r.throughput.insert("quic".into(), run.quic_throughput);
    r.throughput.insert("tcp".into(), run.tcp_throughput);
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_run_migrates_without_handshake() {
        let cfg = MigrateConfig {
            changes: 2,
            interval: Duration::from_secs(5),
            duration: Duration::from_secs(16),
            ..MigrateConfig::new(Profile::LONG_DISTANCE.lossless(), 9)
        };
        let r = bench_migrate(&cfg);
        assert!(r.passed(), "{:?} {:?}", r.checks, r.metrics);
        assert_eq!(r.metrics["delivered"], r.metrics["published"]);
    }
}
