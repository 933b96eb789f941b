//! Head-of-line blocking: per-message latency from publisher to subscriber
//! when every n-th datagram of the publisher's flow is dropped.

use super::world::{has_received, host_addr, QuicWorld, BROKER_ADDR};
use super::{mean, reduction_pct, run_batch, BenchResult, Percentiles};
use crate::mqtt::Kind;
use crate::netsim::tcp::{RtoConfig, StreamReceiver, StreamSender};
use crate::netsim::{DropRule, Network, Profile, SimConfig};
use crate::transport::TransportConfig;
use crate::Timestamp;
use serde::Serialize;
use std::time::Duration;

/// Drop rates as percentages and the matching every-n-th rule.
pub const DROP_RATES: [(u32, u64); 3] = [(10, 10), (20, 5), (50, 2)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HolConfig {
    pub profile: Profile,
    pub streams: usize,
    pub messages: usize,
    pub interval: Duration,
    pub payload: usize,
    pub seed: u64,
}

impl HolConfig {
    pub fn new(profile: Profile, seed: u64) -> Self {
        HolConfig {
            profile,
            streams: 4,
            messages: 200,
            interval: Duration::from_millis(10),
            payload: 64,
            seed,
        }
    }
}

/// Which publisher datagrams are dropped once the session is set up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Drops {
    None,
    EveryN(u64),
    /// Every n-th datagram carrying data of topic index `topic`.
    StreamOnly {
        topic: usize,
        every_n: u64,
    },
}

pub fn topic(i: usize) -> String {
    format!("hol/{i}")
}

const SETUP_BUDGET: Duration = Duration::from_secs(60);

/// Per-message latencies in microseconds, indexed by message number.
/// `None` marks a message that never arrived.
pub fn quic_latencies(cfg: &HolConfig, drops: &Drops) -> Vec<Option<u64>> {
    let sim = SimConfig::from_profile(cfg.profile.lossless(), cfg.seed);
    let mut w = QuicWorld::new(sim, TransportConfig::default(), cfg.seed);
    let sc = w.client_config("hol-sub");
    let s = w.add_fresh_client(host_addr(2, 6000), sc);
    w.client_mut(s).subscribe("hol/#", 0).expect("valid filter");
    let pc = w.client_config("hol-pub");
    let p = w.add_fresh_client(host_addr(1, 6000), pc);
    let ready = w.run_for(SETUP_BUDGET, |w| {
        has_received(w.client(s), Kind::Suback) && has_received(w.client(p), Kind::Connack)
    });
    assert!(ready, "hol setup did not complete");
    // Open every topic stream before arming the drops.
    let payload = vec![0u8; cfg.payload];
    for i in 0..cfg.streams {
        w.client_mut(p)
            .publish(&topic(i), &payload, 0, false)
            .expect("valid topic");
    }
    let warm = cfg.streams;
    w.run_for(SETUP_BUDGET, |w| {
        w.client(s)
            .log()
            .iter()
            .filter(|(_, m)| m.kind == Kind::Publish)
            .count()
            >= warm
    });
    let t0 = w.now() + Duration::from_millis(100);
    let rule = match drops {
        Drops::None => None,
        Drops::EveryN(n) => Some(DropRule {
            from: Some(p),
            to: Some(w.broker),
            every_n: *n,
            ..DropRule::default()
        }),
        Drops::StreamOnly { topic: t, every_n } => {
            let id = w
                .client(p)
                .stream_of(&topic(*t))
                .expect("stream opened during warm-up");
            Some(DropRule {
                from: Some(p),
                to: Some(w.broker),
                label_contains: Some(format!(";stream={id}")),
                every_n: *every_n,
            })
        }
    };
    if let Some(r) = rule {
        w.net.add_drop_rule(r);
    }
    let log_start = w.client(s).log().len();
    let sent_at: Vec<Timestamp> = (0..cfg.messages)
        .map(|k| t0 + cfg.interval * k as u32)
        .collect();
    for (k, &t) in sent_at.iter().enumerate() {
        w.net.run_until(t);
        let mut body = (k as u32).to_be_bytes().to_vec();
        body.resize(cfg.payload.max(4), 0);
        w.client_mut(p)
            .publish(&topic(k % cfg.streams), &body, 0, false)
            .expect("valid topic");
        w.net.flush();
    }
    let n = cfg.messages;
    w.run_for(Duration::from_secs(120), |w| {
        w.client(s).log().len() - log_start >= n
    });
    let mut out = vec![None; n];
    for (at, m) in &w.client(s).log()[log_start..] {
        if m.kind != Kind::Publish || m.payload.len() < 4 {
            continue;
        }
        let k = u32::from_be_bytes(m.payload[..4].try_into().unwrap()) as usize;
        if k < n && out[k].is_none() {
            out[k] = Some((*at - sent_at[k]).as_micros() as u64);
        }
    }
    out
}

/// One ordered TCP connection from publisher to broker carrying every
/// topic; the broker to subscriber leg adds one lossless one-way delay.
pub fn tcp_latencies(cfg: &HolConfig, drop_every_n: u64) -> Vec<Option<u64>> {
    let mut net = Network::new(SimConfig::from_profile(cfg.profile.lossless(), cfg.seed));
    let sent_at: Vec<Timestamp> = (0..cfg.messages)
        .map(|k| Timestamp::from_millis(100) + cfg.interval * k as u32)
        .collect();
    let size = cfg.payload + 2 + topic(0).len() + 2;
    let schedule = sent_at.iter().map(|&t| (t, size)).collect();
    let snd = net
        .add_node(
            host_addr(1, 6000),
            Box::new(StreamSender::new(
                BROKER_ADDR,
                schedule,
                32,
                RtoConfig::default(),
            )),
        )
        .expect("fresh network");
    let rcv = net
        .add_node(BROKER_ADDR, Box::<StreamReceiver>::default())
        .expect("fresh network");
    if drop_every_n > 0 {
        net.add_drop_rule(DropRule {
            from: Some(snd),
            every_n: drop_every_n,
            ..DropRule::default()
        });
    }
    let n = cfg.messages;
    let limit = Timestamp::from_secs(600);
    net.run_while(limit, |net| {
        net.node::<StreamReceiver>(rcv).delivered.len() >= n
    });
    let second_leg = cfg.profile.delay;
    let d = &net.node::<StreamReceiver>(rcv).delivered;
    (0..n)
        .map(|k| {
            d.get(k)
                .map(|&t| (t + second_leg - sent_at[k]).as_micros() as u64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HolPoint {
    pub drop_pct: u32,
    pub quic: Percentiles,
    pub tcp: Percentiles,
    pub quic_lost: usize,
    pub tcp_lost: usize,
    pub improvement_pct: f64,
}

fn summarize(v: &[Option<u64>]) -> (Percentiles, usize) {
    let got: Vec<f64> = v.iter().flatten().map(|&x| x as f64).collect();
    (Percentiles::of(&got), v.len() - got.len())
}

pub fn hol_point(cfg: &HolConfig, drop_pct: u32, every_n: u64) -> HolPoint {
    let (quic, quic_lost) = summarize(&quic_latencies(cfg, &Drops::EveryN(every_n)));
    let (tcp, tcp_lost) = summarize(&tcp_latencies(cfg, every_n));
    HolPoint {
        drop_pct,
        improvement_pct: reduction_pct(tcp.mean, quic.mean),
        quic,
        tcp,
        quic_lost,
        tcp_lost,
    }
}

/// Every drop rate on each given profile; one simulation per (profile,
/// rate) pair, run as a batch.
pub fn bench_hol(profiles: &[Profile], base: &HolConfig) -> BenchResult {
    let mut r = BenchResult::new("hol", base.seed);
    r.set_config(
        "profiles",
        profiles.iter().map(|p| p.name).collect::<Vec<_>>(),
    );
    r.set_config("streams", base.streams);
    r.set_config("messages", base.messages);
    r.set_config("interval_us", base.interval.as_micros() as u64);
    r.set_config("payload", base.payload);
    r.set_config(
        "drop_rates_pct",
        DROP_RATES.iter().map(|d| d.0).collect::<Vec<_>>(),
    );
    let jobs: Vec<(Profile, u32, u64)> = profiles
        .iter()
        .flat_map(|&p| DROP_RATES.iter().map(move |&(pct, n)| (p, pct, n)))
        .collect();
    let points = run_batch(jobs.clone(), |(p, pct, n)| {
        hol_point(
            &HolConfig {
                profile: p,
                ..*base
            },
            pct,
            n,
        )
    });
    for ((p, _, _), pt) in jobs.iter().zip(&points) {
        let key = format!("{}/drop{}", p.name, pt.drop_pct);
        r.latency_us.insert(format!("{key}/quic"), pt.quic);
        r.latency_us.insert(format!("{key}/tcp"), pt.tcp);
        r.metrics
            .insert(format!("{key}/improvement_pct"), pt.improvement_pct);
        r.checks
            .insert(format!("{key}/quic_faster"), pt.quic.mean < pt.tcp.mean);
        r.checks.insert(
            format!("{key}/all_delivered"),
            pt.quic_lost == 0 && pt.tcp_lost == 0,
        );
    }
    for p in profiles {
        let imps: Vec<f64> = jobs
            .iter()
            .zip(&points)
            .filter(|((q, _, _), _)| q.name == p.name)
            .map(|(_, pt)| pt.improvement_pct)
            .collect();
        r.checks.insert(
            format!("{}/improvement_decreasing", p.name),
            imps.windows(2).all(|w| w[0] > w[1]),
        );
        r.metrics
            .insert(format!("{}/mean_improvement_pct", p.name), mean(&imps));
    }
    r
}

/// Closed-form ordered delivery: message `k` leaves the receiver no
/// earlier than one-way delay after it was sent, nor before any earlier
/// dropped message's retransmission, sent one RTT after the original.
/// `dropped[k]` says whether message `k`'s first copy was lost.
pub fn ordered_delivery_bound(
    sent_at: &[Timestamp],
    dropped: &[bool],
    one_way: Duration,
) -> Vec<Timestamp> {
    let mut blocked_until = Timestamp::ZERO;
    sent_at
        .iter()
        .zip(dropped)
        .map(|(&t, &d)| {
            let own = if d { t + one_way * 3 } else { t + one_way };
            blocked_until = blocked_until.max(own);
            blocked_until
        })
        .collect()
}

/// Latencies of the undropped topic when only `lossy_topic`'s packets are
/// subject to drops, next to the same topic's latencies with no drops.
pub fn isolation_pair(
    cfg: &HolConfig,
    lossy_topic: usize,
    every_n: u64,
) -> (Vec<Option<u64>>, Vec<Option<u64>>) {
    let pick = |v: Vec<Option<u64>>| -> Vec<Option<u64>> {
        v.into_iter()
            .enumerate()
            .filter(|(k, _)| k % cfg.streams != lossy_topic)
            .map(|(_, x)| x)
            .collect()
    };
    let with = pick(quic_latencies(
        cfg,
        &Drops::StreamOnly {
            topic: lossy_topic,
            every_n,
        },
    ));
    let without = pick(quic_latencies(cfg, &Drops::None));
    (with, without)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lossless_quic_latency_is_two_one_way_delays() {
        let cfg = HolConfig {
            messages: 20,
            ..HolConfig::new(Profile::WIRED, 3)
        };
        let v = quic_latencies(&cfg, &Drops::None);
        assert!(v.iter().all(|x| *x == Some(400)), "{v:?}");
        let t = tcp_latencies(&cfg, 0);
        assert!(t.iter().all(|x| *x == Some(400)), "{t:?}");
    }

    #[test]
    fn drops_on_one_stream_leave_the_other_untouched() {
        let cfg = HolConfig {
            streams: 2,
            messages: 60,
            ..HolConfig::new(Profile::LONG_DISTANCE, 5)
        };
        let (with, without) = isolation_pair(&cfg, 0, 2);
        assert_eq!(with, without);
        assert!(with.iter().all(Option::is_some));
    }

    #[test]
    fn simulated_tcp_is_no_faster_than_ordered_bound() {
        let cfg = HolConfig {
            messages: 50,
            ..HolConfig::new(Profile::LONG_DISTANCE, 2)
        };
        let sim = tcp_latencies(&cfg, 10);
        let sent: Vec<Timestamp> = (0..50)
            .map(|k| cfg.interval * k as u32)
            .map(|d| Timestamp::ZERO + d)
            .collect();
        let dropped: Vec<bool> = (0..50).map(|k| (k + 1) % 10 == 0).collect();
        let bound = ordered_delivery_bound(&sent, &dropped, cfg.profile.delay);
        for k in 0..50 {
            let b = (bound[k] - sent[k]).as_micros() as u64 + cfg.profile.delay.as_micros() as u64;
            assert!(sim[k].unwrap() >= b, "message {k}: {:?} < {b}", sim[k]);
        }
    }
}
