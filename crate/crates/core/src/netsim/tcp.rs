//! TCP + TLS 1.2 baselines. These are models, not a TCP stack: scripted
//! segment ladders with per-segment retransmission for connection setup,
//! an ordered byte stream with cumulative ACKs for head-of-line latency,
//! and a timer model for half-open connections.

use super::network::Node;
use crate::transport::recovery::RttEstimator;
use crate::transport::Transmit;
use crate::{Role, Timestamp};
use std::any::Any;
use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddr;
use std::time::Duration;

/// Same probe timeout rule as the QUIC side, so recovery speed is compared
/// on equal terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RtoConfig {
    pub initial_rtt: Duration,
    pub min_rto: Duration,
}

impl Default for RtoConfig {
    fn default() -> Self {
        RtoConfig {
            initial_rtt: Duration::from_millis(100),
            min_rto: Duration::from_millis(200),
        }
    }
}

fn rto(rtt: &RttEstimator, cfg: &RtoConfig, backoff: u32) -> Duration {
    (rtt.srtt * 2).max(cfg.min_rto) * 2u32.saturating_pow(backoff.min(16))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub from: Role,
    /// Occupies sequence space and must be acknowledged.
    pub data: bool,
    pub label: &'static str,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Ladder {
    /// CONNECT, CONNACK, PUBLISH, DISCONNECT.
    Publisher,
    /// CONNECT, CONNACK, SUBSCRIBE, SUBACK, PUBLISH, DISCONNECT.
    Subscriber,
    /// Setup of a subscriber that reconnects: up to the SUBACK.
    Resubscribe,
}

const fn c(data: bool, label: &'static str, size: usize) -> Step {
    Step {
        from: Role::Client,
        data,
        label,
        size,
    }
}

const fn s(data: bool, label: &'static str, size: usize) -> Step {
    Step {
        from: Role::Server,
        data,
        label,
        size,
    }
}

const ACK: usize = 52;

/// TCP three-way handshake followed by a full TLS 1.2 handshake. The final
/// server flight is acknowledged by the first application segment.
const SETUP: [Step; 7] = [
    c(true, "syn", 60),
    s(true, "syn-ack", 60),
    c(false, "ack", ACK),
    c(true, "tls-client-hello", 300),
    s(true, "tls-server-hello-certificate-done", 1400),
    c(true, "tls-client-key-exchange-ccs-finished", 200),
    s(true, "tls-ccs-finished", 110),
];

/// One MQTT message followed by its pure ACK from the other side.
fn exchange(out: &mut Vec<Step>, from: Role, label: &'static str, size: usize) {
    out.push(Step {
        from,
        data: true,
        label,
        size,
    });
    out.push(Step {
        from: from.peer(),
        data: false,
        label: "ack",
        size: ACK,
    });
}

impl Ladder {
    pub fn steps(self) -> Vec<Step> {
        let mut v = SETUP.to_vec();
        exchange(&mut v, Role::Client, "connect", 90);
        exchange(&mut v, Role::Server, "connack", 60);
        match self {
            Ladder::Publisher => {
                exchange(&mut v, Role::Client, "publish", 90);
                exchange(&mut v, Role::Client, "disconnect", 60);
            }
            Ladder::Subscriber => {
                exchange(&mut v, Role::Client, "subscribe", 80);
                exchange(&mut v, Role::Server, "suback", 60);
                exchange(&mut v, Role::Server, "publish", 90);
                exchange(&mut v, Role::Client, "disconnect", 60);
            }
            Ladder::Resubscribe => {
                exchange(&mut v, Role::Client, "subscribe", 80);
                exchange(&mut v, Role::Server, "suback", 60);
            }
        }
        v
    }

    /// Datagrams each side sends or receives when nothing is lost.
    pub fn lossless_count(self) -> usize {
        self.steps().len()
    }
}

/// One side of a scripted TCP connection.
#[derive(Debug)]
pub struct LadderNode {
    role: Role,
    peer: SocketAddr,
    steps: Vec<Step>,
    received: Vec<bool>,
    sent: Vec<bool>,
    next: usize,
    /// Our unacknowledged data step: (index, first send time, retransmitted).
    unacked: Option<(usize, Timestamp, bool)>,
    deadline: Option<Timestamp>,
    backoff: u32,
    rtt: RttEstimator,
    cfg: RtoConfig,
    out: VecDeque<usize>,
    completed_at: BTreeMap<usize, Timestamp>,
    started: bool,
}

impl LadderNode {
    pub fn new(role: Role, peer: SocketAddr, ladder: Ladder, cfg: RtoConfig) -> Self {
        let steps = ladder.steps();
        let n = steps.len();
        LadderNode {
            role,
            peer,
            steps,
            received: vec![false; n],
            sent: vec![false; n],
            next: 0,
            unacked: None,
            deadline: None,
            backoff: 0,
            rtt: RttEstimator::new(cfg.initial_rtt),
            cfg,
            out: VecDeque::new(),
            completed_at: BTreeMap::new(),
            started: role == Role::Server,
        }
    }

    /// Client side: begin the ladder at the next poll.
    pub fn start(&mut self) {
        self.started = true;
    }

    pub fn set_peer(&mut self, peer: SocketAddr) {
        self.peer = peer;
    }

    /// Every step was sent or received and nothing awaits an ACK.
    pub fn is_done(&self) -> bool {
        self.next >= self.steps.len() && self.unacked.is_none()
    }

    /// When a step with `label` was first received by this side.
    pub fn received_at(&self, label: &str) -> Option<Timestamp> {
        self.steps
            .iter()
            .enumerate()
            .find(|(_, s)| s.label == label && s.from != self.role)
            .and_then(|(i, _)| self.completed_at.get(&i).copied())
    }

    fn peer_data_done(&self, upto: usize) -> bool {
        (0..upto)
            .all(|i| self.steps[i].from == self.role || !self.steps[i].data || self.received[i])
    }

    fn advance(&mut self, now: Timestamp) {
        while self.started
            && self.next < self.steps.len()
            && self.steps[self.next].from == self.role
            && self.peer_data_done(self.next)
        {
            // One outstanding data segment at a time: the ladder is a
            // request/response exchange.
            if self.steps[self.next].data && self.unacked.is_some() {
                break;
            }
            let i = self.next;
            self.out.push_back(i);
            self.sent[i] = true;
            if self.steps[i].data {
                self.unacked = Some((i, now, false));
                self.backoff = 0;
                self.deadline = Some(now + rto(&self.rtt, &self.cfg, 0));
            }
            self.next += 1;
        }
    }
}

impl Node for LadderNode {
    fn handle_datagram(&mut self, now: Timestamp, _src: SocketAddr, payload: &[u8]) {
        let Some(&[a, b]) = payload.get(..2).map(|s| <&[u8; 2]>::try_from(s).unwrap()) else {
            return;
        };
        let j = u16::from_be_bytes([a, b]) as usize;
        if j >= self.steps.len() || self.steps[j].from == self.role {
            return;
        }
        if self.received[j] {
            // Duplicate: repeat the segment that answered it.
            if let Some(k) =
                (j + 1..self.steps.len()).find(|&k| self.steps[k].from == self.role && self.sent[k])
            {
                self.out.push_back(k);
            }
            return;
        }
        self.received[j] = true;
        self.completed_at.insert(j, now);
        if let Some((i, t, retx)) = self.unacked {
            if i < j {
                if !retx {
                    self.rtt.update(now - t);
                }
                self.unacked = None;
                self.deadline = None;
                self.backoff = 0;
            }
        }
        if self.next <= j {
            self.next = j + 1;
        }
        self.advance(now);
    }

    fn poll_transmit(&mut self, now: Timestamp) -> Option<Transmit> {
        self.advance(now);
        let i = self.out.pop_front()?;
        let st = self.steps[i];
        let mut payload = vec![0u8; st.size.max(2)];
        payload[..2].copy_from_slice(&(i as u16).to_be_bytes());
        Some(Transmit {
            dst: self.peer,
            payload,
            label: format!("tcp;{}", st.label),
        })
    }

    fn poll_timeout(&self) -> Option<Timestamp> {
        self.deadline
    }

    fn handle_timeout(&mut self, now: Timestamp) {
        if let Some((i, t, _)) = self.unacked {
            self.backoff += 1;
            self.unacked = Some((i, t, true));
            self.out.push_back(i);
            self.deadline = Some(now + rto(&self.rtt, &self.cfg, self.backoff));
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// Sending half of an ordered byte stream carrying one message per
/// segment: cumulative ACKs, fast retransmit on three duplicate ACKs and a
/// retransmission timer. Window is fixed.
#[derive(Debug)]
pub struct StreamSender {
    peer: SocketAddr,
    window: usize,
    schedule: VecDeque<(Timestamp, usize)>,
    next_seq: u64,
    /// seq → (size, send time, retransmitted)
    in_flight: BTreeMap<u64, (usize, Timestamp, bool)>,
    queued: VecDeque<u64>,
    sizes: Vec<usize>,
    last_ack: u64,
    dupacks: u32,
    recovery_point: Option<u64>,
    deadline: Option<Timestamp>,
    backoff: u32,
    rtt: RttEstimator,
    cfg: RtoConfig,
    pub retransmissions: u64,
}

impl StreamSender {
    /// `schedule` lists (time, size) of each message, in time order.
    pub fn new(
        peer: SocketAddr,
        schedule: Vec<(Timestamp, usize)>,
        window: usize,
        cfg: RtoConfig,
    ) -> Self {
        StreamSender {
            peer,
            window,
            sizes: schedule.iter().map(|s| s.1).collect(),
            schedule: schedule.into(),
            next_seq: 0,
            in_flight: BTreeMap::new(),
            queued: VecDeque::new(),
            last_ack: 0,
            dupacks: 0,
            recovery_point: None,
            deadline: None,
            backoff: 0,
            rtt: RttEstimator::new(cfg.initial_rtt),
            cfg,
            retransmissions: 0,
        }
    }

    pub fn all_acked(&self) -> bool {
        self.schedule.is_empty()
            && self.in_flight.is_empty()
            && self.last_ack as usize == self.sizes.len()
    }

    fn arm(&mut self, now: Timestamp) {
        self.deadline = if self.in_flight.is_empty() {
            None
        } else {
            Some(now + rto(&self.rtt, &self.cfg, self.backoff))
        };
    }

    fn retransmit_first(&mut self) {
        if let Some((&seq, e)) = self.in_flight.iter_mut().next() {
            e.2 = true;
            self.retransmissions += 1;
            // Ahead of new data the window may be holding back.
            self.queued.push_front(seq);
        }
    }
}

impl Node for StreamSender {
    fn handle_datagram(&mut self, now: Timestamp, _src: SocketAddr, payload: &[u8]) {
        let Ok(b) = <[u8; 8]>::try_from(&payload[..8.min(payload.len())]) else {
            return;
        };
        let ack = u64::from_be_bytes(b);
        if ack > self.last_ack {
            // Karn: no sample when anything newly covered was resent, and
            // only from the segment that triggered this ACK.
            let clean = self.in_flight.range(..ack).all(|(_, e)| !e.2);
            if let Some((_, t, false)) = self.in_flight.get(&(ack - 1)).copied() {
                if clean && self.recovery_point.is_none() {
                    self.rtt.update(now - t);
                }
            }
            self.in_flight.retain(|&s, _| s >= ack);
            self.last_ack = ack;
            self.dupacks = 0;
            self.backoff = 0;
            match self.recovery_point {
                Some(r) if ack > r => self.recovery_point = None,
                // Partial ACK: the next hole is lost too.
                Some(_) => self.retransmit_first(),
                None => {}
            }
            self.arm(now);
        } else if ack == self.last_ack && !self.in_flight.is_empty() {
            self.dupacks += 1;
            if self.dupacks == 3 && self.recovery_point.is_none() {
                self.recovery_point = self.in_flight.keys().next_back().copied();
                self.retransmit_first();
            }
        }
    }

    fn poll_transmit(&mut self, now: Timestamp) -> Option<Transmit> {
        while self.schedule.front().is_some_and(|m| m.0 <= now) {
            self.schedule.pop_front();
            self.queued.push_back(self.next_seq);
            self.next_seq += 1;
        }
        loop {
            let seq = *self.queued.front()?;
            let is_new = !self.in_flight.contains_key(&seq);
            if is_new && seq < self.last_ack {
                self.queued.pop_front();
                continue;
            }
            if is_new && self.in_flight.len() >= self.window {
                return None;
            }
            self.queued.pop_front();
            let size = self.sizes[seq as usize];
            if is_new {
                self.in_flight.insert(seq, (size, now, false));
            }
            if self.deadline.is_none() {
                self.arm(now);
            }
            let mut payload = vec![0u8; size.max(8)];
            payload[..8].copy_from_slice(&seq.to_be_bytes());
            return Some(Transmit {
                dst: self.peer,
                payload,
                label: format!("tcp;seg={seq}"),
            });
        }
    }

    fn poll_timeout(&self) -> Option<Timestamp> {
        let next_msg = self.schedule.front().map(|m| m.0);
        [self.deadline, next_msg].into_iter().flatten().min()
    }

    fn handle_timeout(&mut self, now: Timestamp) {
        if self.deadline.is_some_and(|d| d <= now) {
            self.backoff += 1;
            self.recovery_point = self.in_flight.keys().next_back().copied();
            self.retransmit_first();
            self.arm(now);
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// Receiving half: buffers out-of-order segments, delivers in order, ACKs
/// every segment with the next expected sequence number.
#[derive(Debug, Default)]
pub struct StreamReceiver {
    expected: u64,
    buffered: BTreeMap<u64, ()>,
    acks: VecDeque<SocketAddr>,
    /// In-order delivery time of each message.
    pub delivered: Vec<Timestamp>,
}

impl Node for StreamReceiver {
    fn handle_datagram(&mut self, now: Timestamp, src: SocketAddr, payload: &[u8]) {
        let Ok(b) = <[u8; 8]>::try_from(&payload[..8.min(payload.len())]) else {
            return;
        };
        let seq = u64::from_be_bytes(b);
        if seq >= self.expected {
            self.buffered.insert(seq, ());
        }
        while self.buffered.remove(&self.expected).is_some() {
            self.delivered.push(now);
            self.expected += 1;
        }
        self.acks.push_back(src);
    }

    fn poll_transmit(&mut self, _now: Timestamp) -> Option<Transmit> {
        let dst = self.acks.pop_front()?;
        let mut payload = vec![0u8; ACK];
        payload[..8].copy_from_slice(&self.expected.to_be_bytes());
        Some(Transmit {
            dst,
            payload,
            label: format!("tcp;ack={}", self.expected),
        })
    }

    fn poll_timeout(&self) -> Option<Timestamp> {
        None
    }

    fn handle_timeout(&mut self, _now: Timestamp) {}

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// Established-connection count at a TCP broker after every client
/// vanished at `killed_at` without a FIN. Without keep-alive nothing ever
/// probes the dead peers; with it, the broker drops a client after 1.5
/// keep-alive periods of silence.
pub fn half_open_count(
    conns: usize,
    killed_at: Timestamp,
    keep_alive: Option<Duration>,
    now: Timestamp,
) -> usize {
    match keep_alive {
        Some(k) if now >= killed_at + k.mul_f64(1.5) => 0,
        _ => conns,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{DropRule, Network, SimConfig};

    fn addr(i: u8) -> SocketAddr {
        SocketAddr::from(([10, 0, 0, i], 1883))
    }

    #[test]
    fn ladder_lengths() {
        assert_eq!(Ladder::Publisher.lossless_count(), 15);
        assert_eq!(Ladder::Subscriber.lossless_count(), 19);
        assert_eq!(Ladder::Resubscribe.lossless_count(), 15);
    }

    fn run_ladder(ladder: Ladder, rule: Option<DropRule>) -> (Network, usize, usize) {
        let mut n = Network::new(SimConfig::default());
        let cfg = RtoConfig::default();
        let cl = n
            .add_node(
                addr(1),
                Box::new(LadderNode::new(Role::Client, addr(2), ladder, cfg)),
            )
            .unwrap();
        let sv = n
            .add_node(
                addr(2),
                Box::new(LadderNode::new(Role::Server, addr(1), ladder, cfg)),
            )
            .unwrap();
        if let Some(r) = rule {
            n.add_drop_rule(r);
        }
        n.node_mut::<LadderNode>(cl).start();
        n.run_until(Timestamp::from_secs(30));
        assert!(n.node::<LadderNode>(cl).is_done() && n.node::<LadderNode>(sv).is_done());
        (n, cl, sv)
    }

    #[test]
    fn lossless_ladder_counts_from_trace() {
        let (n, cl, sv) = run_ladder(Ladder::Publisher, None);
        assert_eq!(n.trace().packets_at(cl, 0), 15);
        assert_eq!(n.trace().packets_at(sv, 0), 15);
        let (n, cl, _) = run_ladder(Ladder::Subscriber, None);
        assert_eq!(n.trace().packets_at(cl, 0), 19);
    }

    #[test]
    fn lost_segments_are_retransmitted() {
        let rule = DropRule {
            from: Some(1),
            every_n: 3,
            ..Default::default()
        };
        let (n, cl, _) = run_ladder(Ladder::Publisher, Some(rule));
        assert!(n.trace().packets_at(cl, 0) > 15);
    }

    #[test]
    fn ordered_stream_blocks_behind_a_loss() {
        let mut n = Network::new(SimConfig::default());
        let sched: Vec<(Timestamp, usize)> = (0..10)
            .map(|i| (Timestamp::from_millis(10 * i), 100))
            .collect();
        let snd = n
            .add_node(
                addr(1),
                Box::new(StreamSender::new(addr(2), sched, 32, RtoConfig::default())),
            )
            .unwrap();
        let rcv = n
            .add_node(addr(2), Box::<StreamReceiver>::default())
            .unwrap();
        n.add_drop_rule(DropRule {
            from: Some(snd),
            label_contains: Some("seg=4".into()),
            every_n: 1,
            ..Default::default()
        });
        n.run_until(Timestamp::from_secs(1));
        let _ = &n;
        let d = &n.node::<StreamReceiver>(rcv).delivered;
        assert_eq!(d.len(), 4);
        assert_eq!(d[3], Timestamp::from_micros(30_200));
        // With every copy of segment 4 dropped, nothing after it is delivered.
        let mut n2 = Network::new(SimConfig::default());
        let sched: Vec<(Timestamp, usize)> = (0..10)
            .map(|i| (Timestamp::from_millis(10 * i), 100))
            .collect();
        let snd = n2
            .add_node(
                addr(1),
                Box::new(StreamSender::new(addr(2), sched, 32, RtoConfig::default())),
            )
            .unwrap();
        let rcv = n2
            .add_node(addr(2), Box::<StreamReceiver>::default())
            .unwrap();
        n2.add_drop_rule(DropRule {
            from: Some(snd),
            every_n: 5,
            ..Default::default()
        });
        n2.run_until(Timestamp::from_secs(5));
        let d = &n2.node::<StreamReceiver>(rcv).delivered;
        assert_eq!(d.len(), 10);
        // Message 5 (the 5th datagram) waits for fast retransmit; later
        // messages wait behind it.
        assert!(d[4] > Timestamp::from_millis(40) + Duration::from_micros(200));
        assert!(d[5] >= d[4]);
        assert!(n2.node::<StreamSender>(snd).all_acked());
    }

    #[test]
    fn half_open_model() {
        let k = Some(Duration::from_secs(60));
        let t0 = Timestamp::from_secs(10);
        assert_eq!(
            half_open_count(100, t0, None, Timestamp::from_secs(10_000)),
            100
        );
        assert_eq!(half_open_count(100, t0, k, Timestamp::from_secs(99)), 100);
        assert_eq!(half_open_count(100, t0, k, Timestamp::from_secs(100)), 0);
    }
}
