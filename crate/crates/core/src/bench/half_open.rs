//! Half-open connections: publishers holding many connections vanish
//! without closing them; the broker's per-connection state is sampled.

use super::world::{has_received, QuicWorld};
use super::BenchResult;
use crate::mqtt::Kind;
use crate::netsim::tcp::half_open_count;
use crate::netsim::{Profile, SimConfig};
use crate::transport::TransportConfig;
use crate::Timestamp;
use serde::Serialize;
use std::net::SocketAddr;
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HalfOpenConfig {
    pub profile: Profile,
    pub publishers: usize,
    pub conns_per_publisher: usize,
    /// How long after setup the publishers are killed.
    pub restart_after: Duration,
    /// Sampling horizon after the kill.
    pub horizon: Duration,
    /// TCP keep-alive for the model; `None` mirrors the experiment setup.
    pub tcp_keep_alive: Option<Duration>,
    pub seed: u64,
}

impl HalfOpenConfig {
    pub fn new(profile: Profile, seed: u64) -> Self {
        HalfOpenConfig {
            profile,
            publishers: 10,
            conns_per_publisher: 10,
            restart_after: Duration::from_secs(5),
            horizon: Duration::from_secs(120),
            tcp_keep_alive: None,
            seed,
        }
    }

    pub fn connections(&self) -> usize {
        self.publishers * self.conns_per_publisher
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HalfOpenRun {
    /// (seconds since kill, broker connections)
    pub quic: Vec<(f64, usize)>,
    pub tcp: Vec<(f64, usize)>,
    pub established: usize,
    /// Seconds from the kill until the broker held no connection state.
    pub reclaimed_after: Option<f64>,
    pub broker_sessions_left: usize,
}

fn publisher_addr(p: usize, c: usize) -> SocketAddr {
    SocketAddr::from(([10, 0, 2, p as u8 + 1], 7000 + c as u16))
}

pub fn run(cfg: &HalfOpenConfig) -> HalfOpenRun {
    let sim = SimConfig::from_profile(cfg.profile, cfg.seed);
    let mut w = QuicWorld::new(sim, TransportConfig::default(), cfg.seed);
    let mut nodes = Vec::new();
    for p in 0..cfg.publishers {
        for c in 0..cfg.conns_per_publisher {
            let cc = w.client_config(&format!("pub{p}-{c}"));
            nodes.push(w.add_fresh_client(publisher_addr(p, c), cc));
        }
    }
    w.run_for(Duration::from_secs(60), |w| {
        nodes
            .iter()
            .all(|&n| has_received(w.client(n), Kind::Connack))
    });
    let established = nodes
        .iter()
        .filter(|&&n| has_received(w.client(n), Kind::Connack))
        .count();
    w.net.run_until(w.now() + cfg.restart_after);
    let killed_at = w.now();
    for &n in &nodes {
        w.net.kill(n);
    }
    let mut quic = Vec::new();
    let mut tcp = Vec::new();
    let mut reclaimed_after = None;
    let conns = cfg.connections();
    let mut sample = |w: &QuicWorld, t: Timestamp| {
        let secs = (t - killed_at).as_secs_f64();
        let q = w.server().connection_count();
        quic.push((secs, q));
        tcp.push((
            secs,
            half_open_count(conns, killed_at, cfg.tcp_keep_alive, t),
        ));
        q
    };
    let mut t = killed_at;
    sample(&w, t);
    while t < killed_at + cfg.horizon {
        // Step event by event so the moment the count reaches zero is exact.
        let next = t + Duration::from_secs(1);
        while w.net.step(next) {
            if reclaimed_after.is_none() && w.server().connection_count() == 0 {
                reclaimed_after = Some((w.now() - killed_at).as_secs_f64());
            }
        }
        w.net.run_until(next);
        t = next;
        sample(&w, t);
    }
    HalfOpenRun {
        quic,
        tcp,
        established,
        reclaimed_after,
        broker_sessions_left: w.server().broker().connection_count(),
    }
}

pub fn bench_half_open(cfg: &HalfOpenConfig) -> BenchResult {
    let mut r = BenchResult::new("half_open", cfg.seed);
    r.set_config("profile", cfg.profile.name);
    r.set_config("publishers", cfg.publishers);
    r.set_config("conns_per_publisher", cfg.conns_per_publisher);
    r.set_config("restart_after_s", cfg.restart_after.as_secs_f64());
    r.set_config("horizon_s", cfg.horizon.as_secs_f64());
    r.set_config(
        "tcp_keep_alive_s",
        cfg.tcp_keep_alive.map(|k| k.as_secs_f64()),
    );
    let run = run(cfg);
    let conns = cfg.connections();
    r.metrics
        .insert("established".into(), run.established as f64);
    r.metrics.insert(
        "quic_reclaimed_after_s".into(),
        run.reclaimed_after.unwrap_or(f64::INFINITY).min(1e9),
    );
    r.metrics.insert(
        "tcp_final_count".into(),
        run.tcp.last().map_or(0, |x| x.1) as f64,
    );
    r.metrics.insert(
        "broker_sessions_left".into(),
        run.broker_sessions_left as f64,
    );
    r.checks
        .insert("all_established".into(), run.established == conns);
    r.checks.insert(
        "quic_reclaimed_within_60s".into(),
        run.reclaimed_after.is_some_and(|s| s <= 60.0),
    );
    r.checks.insert(
        "broker_sessions_freed".into(),
        run.broker_sessions_left == 0,
    );
    if cfg.tcp_keep_alive.is_none() {
        r.checks.insert(
            "tcp_stays_half_open".into(),
            run.tcp.iter().all(|x| x.1 == conns),
        );
    } else {
        r.checks.insert(
            "tcp_drains_with_keep_alive".into(),
            run.tcp.last().is_some_and(|x| x.1 == 0),
        );
    }
    r.state_count.insert("quic".into(), run.quic);
    r.state_count.insert("tcp".into(), run.tcp);
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_fleet_is_reclaimed() {
        let cfg = HalfOpenConfig {
            publishers: 2,
            conns_per_publisher: 3,
            horizon: Duration::from_secs(45),
            ..HalfOpenConfig::new(Profile::WIRED, 4)
        };
        let r = bench_half_open(&cfg);
        assert!(r.passed(), "{:?}", r.checks);
        // Idle timeout counts from the last packet, before the kill.
        let t = r.metrics["quic_reclaimed_after_s"] + cfg.restart_after.as_secs_f64();
        assert!(t > 30.0 && t < 32.0, "{t}");
    }
}
