//! Datagrams each role sends or receives to connect, exchange one PUBLISH
//! and disconnect.

use super::world::{has_received, host_addr, QuicWorld, BROKER_ADDR};
use super::{mean, median, reduction_pct, run_batch, BenchResult, Mode};
use crate::agents::{ClientAgent, HandshakeMode, MemoryResumeStore, MqttState};
use crate::mqtt::Kind;
use crate::netsim::tcp::{Ladder, LadderNode, RtoConfig};
use crate::netsim::{Network, Profile, SimConfig};
use crate::transport::TransportConfig;
use crate::Role;
use serde::Serialize;
use std::time::Duration;

pub const TOPIC: &str = "bench/overhead";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverheadConfig {
    pub profile: Profile,
    pub experiments: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl OverheadConfig {
    pub fn new(profile: Profile, seed: u64) -> Self {
        OverheadConfig {
            profile,
            experiments: 10,
            iterations: 10,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RoleCounts {
    pub publisher: f64,
    pub subscriber: f64,
    pub broker: f64,
}

impl RoleCounts {
    pub fn get(&self, role: &str) -> f64 {
        match role {
            "publisher" => self.publisher,
            "subscriber" => self.subscriber,
            _ => self.broker,
        }
    }
}

pub const ROLES: [&str; 3] = ["publisher", "subscriber", "broker"];

/// Outcome of one simulated run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunCounts {
    pub counts: RoleCounts,
    /// Every client finished its exchange.
    pub completed: bool,
    /// Label of the publisher's first datagram.
    pub zero_rtt_first_flight: bool,
    /// Simulated duration of the counted round, including draining.
    pub sim_time_s: f64,
}

impl RunCounts {
    const FAILED: RunCounts = RunCounts {
        counts: RoleCounts {
            publisher: 0.0,
            subscriber: 0.0,
            broker: 0.0,
        },
        completed: false,
        zero_rtt_first_flight: false,
        sim_time_s: 0.0,
    };
}

const RUN_BUDGET: Duration = Duration::from_secs(120);

/// TCP + TLS 1.2: one scripted ladder per client, the broker side being the
/// two server halves together.
pub fn tcp_run(profile: Profile, seed: u64) -> RunCounts {
    let mut net = Network::new(SimConfig::from_profile(profile, seed));
    let cfg = RtoConfig::default();
    let pub_addr = host_addr(1, 5000);
    let sub_addr = host_addr(2, 5000);
    let broker_pub = BROKER_ADDR;
    let broker_sub = std::net::SocketAddr::new(BROKER_ADDR.ip(), BROKER_ADDR.port() + 1);
    let p = net
        .add_node(
            pub_addr,
            Box::new(LadderNode::new(
                Role::Client,
                broker_pub,
                Ladder::Publisher,
                cfg,
            )),
        )
        .unwrap();
    let bp = net
        .add_node(
            broker_pub,
            Box::new(LadderNode::new(
                Role::Server,
                pub_addr,
                Ladder::Publisher,
                cfg,
            )),
        )
        .unwrap();
    let s = net
        .add_node(
            sub_addr,
            Box::new(LadderNode::new(
                Role::Client,
                broker_sub,
                Ladder::Subscriber,
                cfg,
            )),
        )
        .unwrap();
    let bs = net
        .add_node(
            broker_sub,
            Box::new(LadderNode::new(
                Role::Server,
                sub_addr,
                Ladder::Subscriber,
                cfg,
            )),
        )
        .unwrap();
    net.node_mut::<LadderNode>(s).start();
    net.node_mut::<LadderNode>(p).start();
    let limit = net.now() + RUN_BUDGET;
    let completed = net.run_while(limit, |n| {
        [p, bp, s, bs]
            .iter()
            .all(|&i| n.node::<LadderNode>(i).is_done())
    });
    let t = net.trace();
    RunCounts {
        counts: RoleCounts {
            publisher: t.packets_at(p, 0) as f64,
            subscriber: t.packets_at(s, 0) as f64,
            broker: (t.packets_at(bp, 0) + t.packets_at(bs, 0)) as f64,
        },
        completed,
        zero_rtt_first_flight: false,
        sim_time_s: net.now().as_micros() as f64 / 1e6,
    }
}

/// Subscriber connects and subscribes; a publisher then connects, publishes
/// once and disconnects; the subscriber disconnects after the delivery.
/// For 0-RTT, a warm-up round from the same hosts fills the session
/// stores first and only the second round is counted.
pub fn quic_run(profile: Profile, mode: Mode, seed: u64) -> RunCounts {
    let mut w = QuicWorld::new(
        SimConfig::from_profile(profile, seed),
        TransportConfig::default(),
        seed,
    );
    let pub_store = MemoryResumeStore::default();
    let sub_store = MemoryResumeStore::default();
    let mut port = 5000;
    if mode == Mode::Quic0Rtt {
        let ok = round(&mut w, port, &pub_store, &sub_store).is_some();
        if !ok {
            return RunCounts::FAILED;
        }
        // Let the broker finish draining the warm-up connections.
        w.run_for(RUN_BUDGET, |w| w.server().connection_count() == 0);
        port += 1;
    }
    let since = w.net.trace().len();
    let start = w.now();
    let Some((p, s)) = round(&mut w, port, &pub_store, &sub_store) else {
        return RunCounts::FAILED;
    };
    let t = w.net.trace();
    let zero = w.client(p).mode() == HandshakeMode::ZeroRtt
        && t.first_sent_label(p, since)
            .is_some_and(|l| l.starts_with("chlo-full"));
    RunCounts {
        counts: RoleCounts {
            publisher: t.packets_at(p, since) as f64,
            subscriber: t.packets_at(s, since) as f64,
            broker: t.packets_at(w.broker, since) as f64,
        },
        completed: true,
        zero_rtt_first_flight: zero,
        sim_time_s: (w.now() - start).as_secs_f64(),
    }
}

fn round(
    w: &mut QuicWorld,
    port: u16,
    pub_store: &MemoryResumeStore,
    sub_store: &MemoryResumeStore,
) -> Option<(usize, usize)> {
    let mut sc = w.client_config("sub");
    sc.disconnect_after = Some(1);
    let s = w.add_client(host_addr(2, port), sc, Box::new(sub_store.clone()));
    w.client_mut(s).subscribe(TOPIC, 0).ok()?;
    if !w.run_for(RUN_BUDGET, |w| has_received(w.client(s), Kind::Suback)) {
        return None;
    }
    let pc = w.client_config("pub");
    let p = w.add_client(host_addr(1, port), pc, Box::new(pub_store.clone()));
    w.client_mut(p).publish(TOPIC, b"x", 0, false).ok()?;
    w.client_mut(p).disconnect();
    let done = |c: &ClientAgent| c.state() == MqttState::Closed;
    let ok = w.run_for(RUN_BUDGET, |w| done(w.client(p)) && done(w.client(s)));
    ok.then_some((p, s))
}

/// Per-experiment value is the mean over its iterations; the reported
/// figure is the median over experiments.
pub fn measure(cfg: &OverheadConfig, mode: Mode) -> (RoleCounts, Vec<RunCounts>) {
    let jobs: Vec<(usize, usize)> = (0..cfg.experiments)
        .flat_map(|e| (0..cfg.iterations).map(move |i| (e, i)))
        .collect();
    let profile = cfg.profile;
    let base = cfg.seed;
    let runs = run_batch(jobs, |(e, i)| {
        let seed = base
            .wrapping_mul(1_000_003)
            .wrapping_add((e * 1000 + i) as u64);
        match mode {
            Mode::Tcp => tcp_run(profile, seed),
            _ => quic_run(profile, mode, seed),
        }
    });
    let mut med = RoleCounts::default();
    for role in ROLES {
        let per_exp: Vec<f64> = runs
            .chunks(cfg.iterations.max(1))
            .map(|c| mean(&c.iter().map(|r| r.counts.get(role)).collect::<Vec<_>>()))
            .collect();
        let m = median(&per_exp);
        match role {
            "publisher" => med.publisher = m,
            "subscriber" => med.subscriber = m,
            _ => med.broker = m,
        }
    }
    (med, runs)
}

/// All three modes on one profile.
pub fn bench_conn_overhead(cfg: &OverheadConfig, modes: &[Mode]) -> BenchResult {
    let mut r = BenchResult::new("conn_overhead", cfg.seed);
    r.set_config("profile", cfg.profile.name);
    r.set_config("delay_us", cfg.profile.delay.as_micros() as u64);
    r.set_config("loss", cfg.profile.loss);
    r.set_config("experiments", cfg.experiments);
    r.set_config("iterations", cfg.iterations);
    r.set_config(
        "modes",
        modes.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
    );
    let mut medians = std::collections::BTreeMap::new();
    for &mode in modes {
        let (med, runs) = measure(cfg, mode);
        for role in ROLES {
            r.packet_counts.insert(
                format!("{}/{}/{}", cfg.profile.name, mode.as_str(), role),
                med.get(role),
            );
        }
        r.checks.insert(
            format!("{}/completed", mode.as_str()),
            runs.iter().all(|x| x.completed),
        );
        if mode == Mode::Quic0Rtt {
            r.checks.insert(
                "quic0rtt/first_flight_full_chlo".into(),
                runs.iter().all(|x| x.zero_rtt_first_flight),
            );
        }
        let longest = runs.iter().map(|x| x.sim_time_s).fold(0.0, f64::max);
        r.metrics.insert(
            format!("{}/{}/max_sim_time_s", cfg.profile.name, mode.as_str()),
            longest,
        );
        medians.insert(mode, med);
    }
    if let Some(tcp) = medians.get(&Mode::Tcp) {
        for (mode, med) in &medians {
            if *mode == Mode::Tcp {
                continue;
            }
            for role in ROLES {
                let red = reduction_pct(tcp.get(role), med.get(role));
                r.metrics.insert(
                    format!(
                        "{}/{}/{}/reduction_pct",
                        cfg.profile.name,
                        mode.as_str(),
                        role
                    ),
                    red,
                );
            }
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lossless_golden_counts() {
        let tcp = tcp_run(Profile::WIRED, 1);
        assert_eq!(
            (
                tcp.counts.publisher,
                tcp.counts.subscriber,
                tcp.counts.broker
            ),
            (15.0, 19.0, 34.0)
        );
        let one = quic_run(Profile::WIRED, Mode::Quic1Rtt, 1);
        assert!(one.completed);
        assert_eq!(
            (
                one.counts.publisher,
                one.counts.subscriber,
                one.counts.broker
            ),
            (10.0, 12.0, 22.0)
        );
        let zero = quic_run(Profile::WIRED, Mode::Quic0Rtt, 1);
        assert!(zero.completed && zero.zero_rtt_first_flight);
        assert_eq!(
            (
                zero.counts.publisher,
                zero.counts.subscriber,
                zero.counts.broker
            ),
            (8.0, 10.0, 18.0)
        );
    }
}
