//! Discrete-event datagram network with a mock clock.

use super::trace::{Trace, TraceEvent, TraceKind};
use crate::transport::Transmit;
use crate::Timestamp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::any::Any;
use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::time::Duration;
use thiserror::Error;

pub type NodeId = usize;

/// An endpoint driven by the simulator. Implementations are sans-IO state
/// machines; the network owns addressing and time.
pub trait Node: Any {
    fn handle_datagram(&mut self, now: Timestamp, src: SocketAddr, payload: &[u8]);
    fn poll_transmit(&mut self, now: Timestamp) -> Option<Transmit>;
    fn poll_timeout(&self) -> Option<Timestamp>;
    fn handle_timeout(&mut self, now: Timestamp);
    fn on_address_change(&mut self, _now: Timestamp, _new: SocketAddr) {}
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("no endpoint registered at {0}")]
    Unregistered(SocketAddr),
    #[error("address {0} already in use")]
    AddressInUse(SocketAddr),
}

/// Link presets. Delays are one-way.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Profile {
    pub name: &'static str,
    pub delay: Duration,
    /// Independent per-datagram loss probability.
    pub loss: f64,
}

impl Profile {
    pub const WIRED: Profile = Profile {
        name: "wired",
        delay: Duration::from_micros(200),
        loss: 0.0,
    };
    pub const WIRELESS: Profile = Profile {
        name: "wireless",
        delay: Duration::from_millis(2),
        loss: 0.05,
    };
    pub const LONG_DISTANCE: Profile = Profile {
        name: "long_distance",
        delay: Duration::from_millis(35),
        loss: 0.01,
    };
    pub const ALL: [Profile; 3] = [Profile::WIRED, Profile::WIRELESS, Profile::LONG_DISTANCE];

    pub fn by_name(name: &str) -> Option<Profile> {
        Profile::ALL.into_iter().find(|p| p.name == name)
    }

    pub fn lossless(self) -> Profile {
        Profile { loss: 0.0, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SimConfig {
    pub delay: Duration,
    /// Drop every n-th datagram of each flow; 0 disables.
    pub drop_every_n: u64,
    pub loss: f64,
    pub loss_seed: u64,
}

impl SimConfig {
    pub fn from_profile(p: Profile, seed: u64) -> Self {
        SimConfig {
            delay: p.delay,
            drop_every_n: 0,
            loss: p.loss,
            loss_seed: seed,
        }
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig::from_profile(Profile::WIRED, 0)
    }
}

/// Deterministic drop rule applied on top of the global configuration.
/// Only datagrams matching every set field are counted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DropRule {
    pub from: Option<NodeId>,
    pub to: Option<NodeId>,
    pub label_contains: Option<String>,
    pub every_n: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct NetStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

#[derive(Debug)]
struct InFlight {
    src: SocketAddr,
    dst: SocketAddr,
    src_node: NodeId,
    payload: Vec<u8>,
    label: String,
}

pub struct Network {
    now: Timestamp,
    config: SimConfig,
    rng: ChaCha20Rng,
    nodes: Vec<Box<dyn Node>>,
    alive: Vec<bool>,
    node_addr: Vec<SocketAddr>,
    addrs: BTreeMap<SocketAddr, NodeId>,
    queue: BTreeMap<(Timestamp, u64), InFlight>,
    next_seq: u64,
    flow_counts: BTreeMap<SocketAddr, u64>,
    rules: Vec<(DropRule, BTreeMap<SocketAddr, u64>)>,
    link_delay: BTreeMap<(NodeId, NodeId), Duration>,
    moves: BTreeMap<(Timestamp, u64), (NodeId, SocketAddr)>,
    trace: Trace,
    stats: NetStats,
}

impl Network {
    pub fn new(config: SimConfig) -> Self {
        Network {
            now: Timestamp::ZERO,
            config,
            rng: ChaCha20Rng::seed_from_u64(config.loss_seed),
            nodes: Vec::new(),
            alive: Vec::new(),
            node_addr: Vec::new(),
            addrs: BTreeMap::new(),
            queue: BTreeMap::new(),
            next_seq: 0,
            flow_counts: BTreeMap::new(),
            rules: Vec::new(),
            link_delay: BTreeMap::new(),
            moves: BTreeMap::new(),
            trace: Trace::default(),
            stats: NetStats::default(),
        }
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn stats(&self) -> &NetStats {
        &self.stats
    }

    pub fn add_node(&mut self, addr: SocketAddr, node: Box<dyn Node>) -> Result<NodeId, SimError> {
        if self.addrs.contains_key(&addr) {
            return Err(SimError::AddressInUse(addr));
        }
        let id = self.nodes.len();
        self.nodes.push(node);
        self.alive.push(true);
        self.node_addr.push(addr);
        self.addrs.insert(addr, id);
        Ok(id)
    }

    pub fn addr(&self, id: NodeId) -> SocketAddr {
        self.node_addr[id]
    }

    pub fn node<T: Node>(&self, id: NodeId) -> &T {
        self.nodes[id].as_any().downcast_ref().expect("node type")
    }

    pub fn node_mut<T: Node>(&mut self, id: NodeId) -> &mut T {
        self.nodes[id]
            .as_any_mut()
            .downcast_mut()
            .expect("node type")
    }

    pub fn add_drop_rule(&mut self, rule: DropRule) {
        self.rules.push((rule, BTreeMap::new()));
    }

    pub fn clear_drop_rules(&mut self) {
        self.rules.clear();
    }

    /// Overrides the one-way delay from `a` to `b`.
    pub fn set_link_delay(&mut self, a: NodeId, b: NodeId, d: Duration) {
        self.link_delay.insert((a, b), d);
    }

    /// Silences a node: it is no longer polled and datagrams addressed to it
    /// vanish, as if the host crashed.
    pub fn kill(&mut self, id: NodeId) {
        self.alive[id] = false;
    }

    pub fn is_alive(&self, id: NodeId) -> bool {
        self.alive[id]
    }

    /// Moves a node to a new address now. Datagrams already in flight keep
    /// their old source.
    pub fn change_address(&mut self, id: NodeId, new: SocketAddr) -> Result<(), SimError> {
        if self.addrs.contains_key(&new) {
            return Err(SimError::AddressInUse(new));
        }
        let old = self.node_addr[id];
        self.addrs.remove(&old);
        self.addrs.insert(new, id);
        self.node_addr[id] = new;
        if self.alive[id] {
            self.nodes[id].on_address_change(self.now, new);
        }
        Ok(())
    }

    pub fn schedule_address_change(&mut self, at: Timestamp, id: NodeId, new: SocketAddr) {
        let seq = self.bump();
        self.moves.insert((at, seq), (id, new));
    }

    fn bump(&mut self) -> u64 {
        self.next_seq += 1;
        self.next_seq
    }

    fn delay(&self, from: NodeId, to: Option<NodeId>) -> Duration {
        to.and_then(|t| self.link_delay.get(&(from, t)).copied())
            .unwrap_or(self.config.delay)
    }

    /// Injects a datagram from a registered address.
    pub fn send_from(
        &mut self,
        src: SocketAddr,
        dst: SocketAddr,
        payload: Vec<u8>,
        label: &str,
    ) -> Result<(), SimError> {
        let id = *self.addrs.get(&src).ok_or(SimError::Unregistered(src))?;
        self.send(
            id,
            Transmit {
                dst,
                payload,
                label: label.to_string(),
            },
        );
        Ok(())
    }

    fn should_drop(
        &mut self,
        src: SocketAddr,
        src_node: NodeId,
        dst_node: Option<NodeId>,
        label: &str,
    ) -> bool {
        let mut drop = false;
        if self.config.drop_every_n > 0 {
            let c = self.flow_counts.entry(src).or_insert(0);
            *c += 1;
            drop |= c.is_multiple_of(self.config.drop_every_n);
        }
        for (rule, counts) in &mut self.rules {
            let matches = rule.every_n > 0
                && rule.from.is_none_or(|f| f == src_node)
                && rule.to.is_none_or(|t| Some(t) == dst_node)
                && rule
                    .label_contains
                    .as_deref()
                    .is_none_or(|l| label.contains(l));
            if matches {
                let c = counts.entry(src).or_insert(0);
                *c += 1;
                drop |= *c % rule.every_n == 0;
            }
        }
        if self.config.loss > 0.0 {
            drop |= self.rng.gen_bool(self.config.loss);
        }
        drop
    }

    fn send(&mut self, from: NodeId, t: Transmit) {
        let src = self.node_addr[from];
        let dst_node = self.addrs.get(&t.dst).copied();
        self.stats.sent += 1;
        let ev = TraceEvent {
            time: self.now,
            kind: TraceKind::Send,
            flow: src,
            dst: t.dst,
            src_node: from,
            dst_node,
            size: t.payload.len(),
            label: t.label.clone(),
        };
        self.trace.push(ev.clone());
        if self.should_drop(src, from, dst_node, &t.label) {
            self.stats.dropped += 1;
            self.trace.push(TraceEvent {
                kind: TraceKind::Drop,
                ..ev
            });
            return;
        }
        let at = self.now + self.delay(from, dst_node);
        let seq = self.bump();
        self.queue.insert(
            (at, seq),
            InFlight {
                src,
                dst: t.dst,
                src_node: from,
                payload: t.payload,
                label: t.label,
            },
        );
    }

    /// Lets every live node emit whatever it has queued at the current
    /// instant.
    pub fn flush(&mut self) {
        for id in 0..self.nodes.len() {
            if !self.alive[id] {
                continue;
            }
            while let Some(t) = self.nodes[id].poll_transmit(self.now) {
                self.send(id, t);
            }
        }
    }

    fn next_event_time(&self) -> Option<Timestamp> {
        let q = self.queue.keys().next().map(|k| k.0);
        let m = self.moves.keys().next().map(|k| k.0);
        let t = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| self.alive[*i])
            .filter_map(|(_, n)| n.poll_timeout())
            .min();
        [q, m, t]
            .into_iter()
            .flatten()
            .min()
            .map(|x| x.max(self.now))
    }

    /// Processes the next instant with pending work. Returns false when
    /// nothing is scheduled at or before `limit`.
    pub fn step(&mut self, limit: Timestamp) -> bool {
        self.flush();
        let Some(t) = self.next_event_time() else {
            return false;
        };
        if t > limit {
            return false;
        }
        self.now = t;
        while let Some(entry) = self.moves.first_entry() {
            if entry.key().0 > t {
                break;
            }
            let (id, new) = entry.remove();
            if let Err(e) = self.change_address(id, new) {
                log::warn!("scheduled address change failed: {e}");
            }
        }
        // All datagrams due now are handed over before anyone transmits.
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > t {
                break;
            }
            let d = entry.remove();
            let dst_node = self.addrs.get(&d.dst).copied().filter(|&n| self.alive[n]);
            let ev = TraceEvent {
                time: t,
                kind: TraceKind::Deliver,
                flow: d.src,
                dst: d.dst,
                src_node: d.src_node,
                dst_node,
                size: d.payload.len(),
                label: d.label,
            };
            match dst_node {
                Some(n) => {
                    self.stats.delivered += 1;
                    self.trace.push(ev);
                    self.nodes[n].handle_datagram(t, d.src, &d.payload);
                }
                None => {
                    self.stats.dropped += 1;
                    self.trace.push(TraceEvent {
                        kind: TraceKind::Drop,
                        label: format!("unroutable;{}", ev.label),
                        ..ev
                    });
                }
            }
        }
        for id in 0..self.nodes.len() {
            if self.alive[id] && self.nodes[id].poll_timeout().is_some_and(|d| d <= t) {
                self.nodes[id].handle_timeout(t);
            }
        }
        self.flush();
        true
    }

    /// Runs every event up to and including `t`, then sets the clock to `t`.
    pub fn run_until(&mut self, t: Timestamp) {
        while self.step(t) {}
        self.now = self.now.max(t);
        self.flush();
    }

    /// Runs until `pred` holds or `limit` passes. Returns whether `pred`
    /// held.
    pub fn run_while(
        &mut self,
        limit: Timestamp,
        mut pred: impl FnMut(&mut Network) -> bool,
    ) -> bool {
        loop {
            if pred(self) {
                return true;
            }
            if !self.step(limit) {
                return pred(self);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    /// Sends queued datagrams and records what arrives.
    #[derive(Default)]
    struct Probe {
        out: VecDeque<Transmit>,
        got: Vec<(Timestamp, SocketAddr, Vec<u8>)>,
        moved: Vec<SocketAddr>,
    }

    impl Node for Probe {
        fn handle_datagram(&mut self, now: Timestamp, src: SocketAddr, payload: &[u8]) {
            self.got.push((now, src, payload.to_vec()));
        }
        fn poll_transmit(&mut self, _now: Timestamp) -> Option<Transmit> {
            self.out.pop_front()
        }
        fn poll_timeout(&self) -> Option<Timestamp> {
            None
        }
        fn handle_timeout(&mut self, _now: Timestamp) {}
        fn on_address_change(&mut self, _now: Timestamp, new: SocketAddr) {
            self.moved.push(new);
        }
        fn as_any(&self) -> &dyn Any {
            self
        }
        fn as_any_mut(&mut self) -> &mut dyn Any {
            self
        }
    }

    fn addr(i: u8) -> SocketAddr {
        SocketAddr::from(([10, 0, 0, i], 4000))
    }

    fn probe_net(cfg: SimConfig) -> (Network, NodeId, NodeId, NodeId) {
        let mut n = Network::new(cfg);
        let a = n.add_node(addr(1), Box::<Probe>::default()).unwrap();
        let b = n.add_node(addr(2), Box::<Probe>::default()).unwrap();
        let c = n.add_node(addr(3), Box::<Probe>::default()).unwrap();
        (n, a, b, c)
    }

    fn queue(n: &mut Network, from: NodeId, to: SocketAddr, k: u8) {
        n.node_mut::<Probe>(from).out.push_back(Transmit {
            dst: to,
            payload: vec![k],
            label: String::new(),
        });
    }

    #[test]
    fn every_nth_datagram_of_a_flow_is_dropped() {
        let cfg = SimConfig {
            drop_every_n: 10,
            ..SimConfig::default()
        };
        let (mut n, a, b, _) = probe_net(cfg);
        for k in 1..=30 {
            queue(&mut n, a, addr(2), k);
        }
        n.run_until(Timestamp::from_secs(1));
        let got: Vec<u8> = n.node::<Probe>(b).got.iter().map(|g| g.2[0]).collect();
        assert_eq!(got.len(), 27);
        assert!(!got.contains(&10) && !got.contains(&20) && !got.contains(&30));
    }

    #[test]
    fn interleaved_flows_count_independently() {
        let cfg = SimConfig {
            drop_every_n: 2,
            ..SimConfig::default()
        };
        let (mut n, a, b, c) = probe_net(cfg);
        for k in 1..=4 {
            queue(&mut n, a, addr(3), k);
            queue(&mut n, b, addr(3), 10 + k);
        }
        n.run_until(Timestamp::from_secs(1));
        let mut got: Vec<u8> = n.node::<Probe>(c).got.iter().map(|g| g.2[0]).collect();
        got.sort();
        assert_eq!(got, vec![1, 3, 11, 13]);
    }

    #[test]
    fn lossless_delivery_keeps_order_and_delay() {
        let (mut n, a, b, _) = probe_net(SimConfig::default());
        for k in 1..=5 {
            queue(&mut n, a, addr(2), k);
        }
        n.run_until(Timestamp::from_secs(1));
        let got = &n.node::<Probe>(b).got;
        assert_eq!(
            got.iter().map(|g| g.2[0]).collect::<Vec<_>>(),
            vec![1, 2, 3, 4, 5]
        );
        assert!(got.iter().all(|g| g.0 == Timestamp::from_micros(200)));
    }

    #[test]
    fn address_change_relabels_later_datagrams() {
        let (mut n, a, b, _) = probe_net(SimConfig::default());
        queue(&mut n, a, addr(2), 1);
        n.flush();
        n.change_address(a, addr(9)).unwrap();
        queue(&mut n, a, addr(2), 2);
        n.run_until(Timestamp::from_secs(1));
        let srcs: Vec<SocketAddr> = n.node::<Probe>(b).got.iter().map(|g| g.1).collect();
        assert_eq!(srcs, vec![addr(1), addr(9)]);
        assert_eq!(n.node::<Probe>(a).moved, vec![addr(9)]);
        assert_eq!(
            n.change_address(a, addr(2)),
            Err(SimError::AddressInUse(addr(2)))
        );
    }

    #[test]
    fn unregistered_source_is_an_error() {
        let (mut n, ..) = probe_net(SimConfig::default());
        assert_eq!(
            n.send_from(addr(7), addr(1), vec![], ""),
            Err(SimError::Unregistered(addr(7)))
        );
    }

    #[test]
    fn datagrams_to_unknown_addresses_are_dropped() {
        let (mut n, a, ..) = probe_net(SimConfig::default());
        queue(&mut n, a, addr(50), 1);
        n.run_until(Timestamp::from_secs(1));
        assert_eq!(n.stats().dropped, 1);
        assert_eq!(n.trace().events().last().unwrap().kind, TraceKind::Drop);
    }

    #[test]
    fn drop_rule_with_label_filter() {
        let (mut n, a, b, _) = probe_net(SimConfig::default());
        n.add_drop_rule(DropRule {
            from: Some(a),
            label_contains: Some("x".into()),
            every_n: 1,
            ..Default::default()
        });
        n.node_mut::<Probe>(a).out.push_back(Transmit {
            dst: addr(2),
            payload: vec![1],
            label: "x".into(),
        });
        n.node_mut::<Probe>(a).out.push_back(Transmit {
            dst: addr(2),
            payload: vec![2],
            label: "y".into(),
        });
        n.run_until(Timestamp::from_secs(1));
        assert_eq!(n.node::<Probe>(b).got.len(), 1);
        assert_eq!(n.node::<Probe>(b).got[0].2, vec![2]);
    }
}
