//! Checks behind the acceptance target: a direct client/endpoint harness,
//! the crypto property suite and the 0-RTT scenarios.

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use quicmqtt::agents::{HandshakeMode, MemoryResumeStore, ResumeStore};
use quicmqtt::bench::world::{has_received, host_addr, QuicWorld, BROKER_ADDR};
use quicmqtt::crypto::{
    aead_open, aead_seal, dh_keypair, dh_shared, extract_expand, kg, sign, ver, AeadKey, DhKeyPair,
    Group, Nonce,
};
use quicmqtt::mqtt::Kind;
use quicmqtt::netsim::{Profile, SimConfig, TraceKind};
use quicmqtt::transport::handshake::RejectReason;
use quicmqtt::transport::protect::{handshake_keys, open, pak, ProtectError};
use quicmqtt::transport::wire::Packet;
use quicmqtt::transport::{
    Connection, ConnectionId, EndpointEvent, Event, ResumeState, ServerEndpoint, Transmit,
    TransportConfig,
};
use quicmqtt::{Role, Timestamp};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::net::SocketAddr;
use std::time::Duration;

pub const SERVER: SocketAddr = SocketAddr::new(
    std::net::IpAddr::V4(std::net::Ipv4Addr::new(10, 0, 0, 1)),
    443,
);
pub const CLIENT: SocketAddr = SocketAddr::new(
    std::net::IpAddr::V4(std::net::Ipv4Addr::new(10, 0, 1, 1)),
    5000,
);

/// A server endpoint and a clock; clients are driven against it directly,
/// without the simulator.
pub struct Harness {
    pub ep: ServerEndpoint,
    pub pk: Vec<u8>,
    pub cfg: TransportConfig,
    pub now: Timestamp,
}

impl Harness {
    pub fn new(seed: u64, cfg: TransportConfig) -> Self {
        let kp = kg(128, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap();
        let pk = kp.pk.clone();
        Harness {
            ep: ServerEndpoint::new(kp, cfg, Timestamp::ZERO, seed),
            pk,
            cfg,
            now: Timestamp::ZERO,
        }
    }

    pub fn client(&self, seed: u64, resume: Option<&ResumeState>) -> Connection {
        let cid = ConnectionId(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1);
        Connection::client(
            self.cfg,
            cid,
            SERVER,
            self.pk.clone(),
            resume,
            self.now,
            seed,
        )
    }

    /// Exchanges datagrams, 1 ms per round, until `done` holds or `rounds`
    /// pass. Returns everything the client sent.
    pub fn drive(
        &mut self,
        c: &mut Connection,
        rounds: usize,
        mut done: impl FnMut(&mut Connection, &mut ServerEndpoint) -> bool,
    ) -> Vec<Transmit> {
        let mut sent = Vec::new();
        for _ in 0..rounds {
            while let Some(t) = c.poll_transmit(self.now) {
                self.ep.handle_datagram(self.now, CLIENT, &t.payload);
                sent.push(t);
            }
            while let Some(t) = self.ep.poll_transmit(self.now) {
                c.handle_datagram(self.now, SERVER, &t.payload);
            }
            if done(c, &mut self.ep) {
                break;
            }
            self.now += Duration::from_millis(1);
            if c.poll_timeout().is_some_and(|t| t <= self.now) {
                c.handle_timeout(self.now);
            }
            if self.ep.poll_timeout().is_some_and(|t| t <= self.now) {
                self.ep.handle_timeout(self.now);
            }
        }
        sent
    }

    /// Runs a handshake to completion on both sides.
    pub fn establish(&mut self, c: &mut Connection) -> Vec<Transmit> {
        let cid = c.cid();
        self.drive(c, 200, |c, ep| {
            c.handshake_completed() && ep.connection(cid).is_some_and(|s| s.final_keys().is_some())
        })
    }

    pub fn events(&mut self) -> Vec<EndpointEvent> {
        std::iter::from_fn(|| self.ep.poll_event()).collect()
    }
}

pub fn resumption(c: &mut Connection) -> Option<ResumeState> {
    let mut out = None;
    while let Some(e) = c.poll_event() {
        if let Event::Resumption(r) = e {
            out = Some(r);
        }
    }
    out
}

/// Checks that both ends of an established connection hold byte-identical
/// initial and final key sets.
pub fn keys_agree(h: &mut Harness, c: &Connection) -> Result<(), String> {
    let s = h.ep.connection(c.cid()).ok_or("server has no connection")?;
    let (ci, si) = (c.initial_keys(), s.initial_keys());
    let (cf, sf) = (c.final_keys(), s.final_keys());
    if ci.is_none() || cf.is_none() {
        return Err("client lacks keys".into());
    }
    if ci.map(|k| k.to_bytes()) != si.map(|k| k.to_bytes()) {
        return Err(format!("ik differs for cid {}", c.cid()));
    }
    if cf.map(|k| k.to_bytes()) != sf.map(|k| k.to_bytes()) {
        return Err(format!("k differs for cid {}", c.cid()));
    }
    if ci == cf {
        return Err("ik and k coincide".into());
    }
    Ok(())
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn check(
    name: &str,
    r: Result<(), proptest::test_runner::TestError<impl std::fmt::Debug>>,
) -> Result<(), String> {
    r.map_err(|e| format!("{name}: {e}"))
}

/// Seal/open roundtrip, then a flipped ciphertext bit, a changed AAD and a
/// different sqn must all fail to open.
pub fn aead_property(cases: u32) -> Result<(), String> {
    let strat = (
        any::<[u8; 16]>(),
        any::<[u8; 4]>(),
        any::<u64>(),
        proptest::collection::vec(any::<u8>(), 0..64),
        proptest::collection::vec(any::<u8>(), 0..512),
        any::<prop::sample::Index>(),
        0u8..8,
    );
    let r = runner(cases).run(&strat, |(k, prefix, sqn, aad, m, at, bit)| {
        let key = AeadKey(k);
        let n = Nonce::new(prefix, sqn);
        let c = aead_seal(&key, &n, &aad, &m);
        prop_assert_eq!(c.len(), m.len() + 16);
        prop_assert_eq!(aead_open(&key, &n, &aad, &c), Some(m.clone()));
        let mut bad = c.clone();
        bad[at.index(c.len())] ^= 1 << bit;
        prop_assert_eq!(aead_open(&key, &n, &aad, &bad), None);
        let mut aad2 = aad.clone();
        aad2.push(0);
        prop_assert_eq!(aead_open(&key, &n, &aad2, &c), None);
        let n2 = Nonce::new(prefix, sqn.wrapping_add(1));
        prop_assert_eq!(aead_open(&key, &n2, &aad, &c), None);
        Ok(())
    });
    check("aead", r)
}

pub fn signature_property(cases: u32) -> Result<(), String> {
    let strat = (any::<u64>(), proptest::collection::vec(any::<u8>(), 0..256));
    let r = runner(cases).run(&strat, |(seed, m)| {
        let kp = kg(128, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap();
        let s = sign(&kp.sk, &m).unwrap();
        prop_assert!(ver(&kp.pk, &m, &s));
        let mut m2 = m.clone();
        m2.push(1);
        prop_assert!(!ver(&kp.pk, &m2, &s));
        let other = kg(128, &mut ChaCha20Rng::seed_from_u64(seed ^ 1)).unwrap();
        prop_assert!(!ver(&other.pk, &m, &s));
        Ok(())
    });
    check("signature", r)
}

/// 2 has order 11 modulo 23, so TINY exponents range over 1..11.
pub fn dh_property(cases: u32) -> Result<(), String> {
    let r = runner(cases).run(&(any::<u64>(), 1u64..11, 1u64..11), |(seed, x, y)| {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let a = dh_keypair(Group::X25519, &mut rng);
        let b = dh_keypair(Group::X25519, &mut rng);
        prop_assert_eq!(
            dh_shared(&a.secret, &b.public).unwrap(),
            dh_shared(&b.secret, &a.public).unwrap()
        );
        let a = DhKeyPair::from_modp_secret(Group::TINY, x).unwrap();
        let b = DhKeyPair::from_modp_secret(Group::TINY, y).unwrap();
        prop_assert_eq!(
            dh_shared(&a.secret, &b.public).unwrap(),
            dh_shared(&b.secret, &a.public).unwrap()
        );
        Ok(())
    });
    check("dh", r)
}

/// Shorter outputs are prefixes of longer ones for identical inputs.
pub fn expand_prefix_property(cases: u32) -> Result<(), String> {
    let strat = (
        proptest::collection::vec(any::<u8>(), 0..48),
        proptest::collection::vec(any::<u8>(), 0..32),
        any::<u64>(),
        proptest::collection::vec(any::<u8>(), 0..64),
        0usize..200,
        0usize..200,
        any::<bool>(),
    );
    let r = runner(cases).run(&strat, |(ipm, nonc, cid, m, l1, l2, init)| {
        let (short, long) = (l1.min(l2), l1.max(l2));
        let a = extract_expand(&ipm, &nonc, cid, &m, b"scfg", short, init).unwrap();
        let b = extract_expand(&ipm, &nonc, cid, &m, b"scfg", long, init).unwrap();
        prop_assert_eq!(&b[..short], &a[..]);
        Ok(())
    });
    check("extract_expand prefix", r)
}

pub fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

/// Computed with Python's hmac/hashlib from the construction's definition.
pub fn expand_oracle_vectors() -> Result<(), String> {
    let seq = |n: u8| (0..n).collect::<Vec<u8>>();
    let cases = [
        (
            extract_expand(&[0; 32], &[0; 20], 0, b"", b"", 40, true),
            "658a83de06424757294593fcbcaf224c959e1907a2e06d1493a69b2226eba370a7c3f5e2b7cf0133",
        ),
        (
            extract_expand(&[0; 32], &[0; 20], 0, b"", b"", 40, false),
            "9ccdc7f6efc604bc010d2c40d1027edd0ea9913e7c3b47c65c8279be2808bed3da3eac038758ae6d",
        ),
        (
            extract_expand(&seq(32), &seq(24), 0x0102030405060708, b"chlo", b"scfg", 100, true),
            "f50754e8719db87eb6f15323e1480817663015c34d7c0b7e30efe28d8e4f99ff7f627b84ba26d9ae3cd2c8c5\
             91748769dfb266a778c823e36a79e593f7705adb852862b3f57b954cf68bde4f1249e9f07be12c74e9ba5092\
             4396f827643afa757305d2c5",
        ),
    ];
    for (i, (got, want)) in cases.into_iter().enumerate() {
        let got = hex(&got.map_err(|e| e.to_string())?);
        if got != want {
            return Err(format!("oracle vector {i}: {got}"));
        }
    }
    Ok(())
}

/// 1-RTT and 0-RTT handshakes over several seeds; every completed one must
/// agree on ik and k.
pub fn handshake_keys_agree(seeds: u64) -> Result<(), String> {
    for seed in 0..seeds {
        let mut h = Harness::new(1000 + seed, TransportConfig::default());
        let mut c = h.client(seed, None);
        h.establish(&mut c);
        if !c.handshake_completed() {
            return Err(format!("1-RTT handshake {seed} did not complete"));
        }
        keys_agree(&mut h, &c)?;
        let r = resumption(&mut c).ok_or("no resumption state")?;
        let mut z = h.client(seed + 10_000, Some(&r));
        h.establish(&mut z);
        if !z.handshake_completed() {
            return Err(format!("0-RTT handshake {seed} did not complete"));
        }
        keys_agree(&mut h, &z)?;
    }
    Ok(())
}

/// The full CHLO of an accepted handshake, re-sent under a fresh cid with
/// correctly recomputed handshake protection, must be refused as a replay.
pub fn strike_rejects_replay() -> Result<(), String> {
    let mut h = Harness::new(77, TransportConfig::default());
    let mut c = h.client(3, None);
    let sent = h.establish(&mut c);
    if !c.handshake_completed() {
        return Err("handshake did not complete".into());
    }
    let chlo = sent
        .iter()
        .find(|t| t.label.starts_with("chlo-full"))
        .ok_or("no full CHLO sent")?;
    let pkt = Packet::decode(&chlo.payload).map_err(|e| e.to_string())?;
    let pt =
        open(&handshake_keys(pkt.header.cid), &pkt, Role::Server).map_err(|e| e.to_string())?;
    let new_cid = ConnectionId(pkt.header.cid.0 ^ 0xdead_beef);
    let mut header = pkt.header;
    header.cid = new_cid;
    let forged = pak(
        &handshake_keys(new_cid),
        header,
        pt[0],
        &pt[1..],
        Role::Client,
    );
    h.events();
    h.ep.handle_datagram(h.now, CLIENT, &forged.encode());
    let ev = h.events();
    let want = EndpointEvent::Rejected {
        cid: new_cid,
        reason: Some(RejectReason::NoncReplayed),
    };
    if ev != [want] {
        return Err(format!("replay produced {ev:?}"));
    }
    if h.ep.connection(new_cid).is_some() {
        return Err("replayed CHLO created state".into());
    }
    Ok(())
}

/// Sealing twice under the same sqn and key yields ⊥ the second time.
pub fn iv_reuse_refused() -> Result<(), String> {
    let mut h = Harness::new(5, TransportConfig::default());
    let mut c = h.client(9, None);
    h.establish(&mut c);
    let sqn = 1_000_000;
    c.encrypt_message_at(sqn, b"once")
        .map_err(|e| e.to_string())?;
    match c.encrypt_message_at(sqn, b"twice") {
        Err(ProtectError::IvReuse(s)) if s == sqn => Ok(()),
        other => Err(format!("second seal gave {other:?}")),
    }
}

/// Every check of the crypto criterion, in order.
pub fn crypto_suite() -> Vec<(&'static str, Result<(), String>)> {
    vec![
        ("aead roundtrip and tamper, 1000 cases", aead_property(1000)),
        ("signature correctness, 100 cases", signature_property(100)),
        ("dh symmetry, 100 cases", dh_property(100)),
        ("extract_expand prefix", expand_prefix_property(100)),
        ("extract_expand oracle vectors", expand_oracle_vectors()),
        ("ik and k agree", handshake_keys_agree(8)),
        ("strike register replay", strike_rejects_replay()),
        ("iv reuse", iv_reuse_refused()),
    ]
}

const BUDGET: Duration = Duration::from_secs(10);

/// What a publisher's connection attempt looked like on the wire.
#[derive(Debug)]
pub struct FirstFlight {
    pub mode: HandshakeMode,
    /// Labels the client sent before it received anything.
    pub labels: Vec<String>,
    /// Simulated time from the first datagram to CONNACK.
    pub connack_after: Duration,
    pub one_way: Duration,
}

impl FirstFlight {
    pub fn first(&self) -> &str {
        self.labels.first().map(String::as_str).unwrap_or("")
    }

    /// CONNECT travels on stream 1 under the initial key.
    pub fn carries_connect(&self) -> bool {
        self.labels
            .iter()
            .any(|l| l.starts_with("data;") && l.contains(";epoch=i;stream=1"))
    }
}

/// Connects, disconnects and closes one publisher; returns its first flight.
pub fn connect_once(
    w: &mut QuicWorld,
    port: u16,
    store: &dyn Fn() -> Box<dyn ResumeStore>,
) -> Option<FirstFlight> {
    let since = w.net.trace().len();
    let start = w.now();
    let cfg = w.client_config("pub");
    let p = w.add_client(host_addr(1, port), cfg, store());
    if !w.run_for(BUDGET, |w| has_received(w.client(p), Kind::Connack)) {
        return None;
    }
    let connack = w
        .client(p)
        .log()
        .iter()
        .find(|(_, m)| m.kind == Kind::Connack)
        .map(|(t, _)| *t)?;
    let events = &w.net.trace().events()[since..];
    let labels = events
        .iter()
        .take_while(|e| e.dst_node != Some(p) || e.kind != TraceKind::Deliver)
        .filter(|e| e.src_node == p && e.kind == TraceKind::Send)
        .map(|e| e.label.clone())
        .collect();
    let mode = w.client(p).mode();
    w.client_mut(p).disconnect();
    w.run_for(BUDGET, |w| w.client(p).is_closed());
    Some(FirstFlight {
        mode,
        labels,
        connack_after: connack - start,
        one_way: w.net.config().delay,
    })
}

/// A warm session: the second connection resumes with CONNECT in its first
/// flight and gets CONNACK after one round trip.
pub fn zero_rtt_warm(profile: Profile, seed: u64) -> Result<(), String> {
    let mut w = QuicWorld::new(
        SimConfig::from_profile(profile, seed),
        TransportConfig::default(),
        seed,
    );
    let mem = MemoryResumeStore::default();
    let store = || -> Box<dyn ResumeStore> { Box::new(mem.clone()) };
    let cold = connect_once(&mut w, 5000, &store).ok_or("cold connect failed")?;
    if cold.mode != HandshakeMode::OneRtt || !cold.first().starts_with("chlo-inchoate") {
        return Err(format!("cold start: {cold:?}"));
    }
    let warm = connect_once(&mut w, 5001, &store).ok_or("warm connect failed")?;
    if warm.mode != HandshakeMode::ZeroRtt
        || !warm.first().starts_with("chlo-full")
        || !warm.carries_connect()
    {
        return Err(format!("warm start: {warm:?}"));
    }
    if warm.connack_after != warm.one_way * 2 {
        return Err(format!(
            "CONNACK after {:?}, one RTT is {:?}",
            warm.connack_after,
            warm.one_way * 2
        ));
    }
    Ok(())
}

/// The stored scfg has expired by the time of the second connection: the
/// client falls back to an inchoate CHLO and still connects.
pub fn zero_rtt_expired_scfg(seed: u64) -> Result<(), String> {
    let mut transport = TransportConfig::default();
    transport.handshake.scfg_rotation_secs = 60;
    let mut w = QuicWorld::new(
        SimConfig::from_profile(Profile::WIRED, seed),
        transport,
        seed,
    );
    let mem = MemoryResumeStore::default();
    let store = || -> Box<dyn ResumeStore> { Box::new(mem.clone()) };
    connect_once(&mut w, 5000, &store).ok_or("cold connect failed")?;
    if mem.load(BROKER_ADDR).is_none() {
        return Err("no session stored".into());
    }
    let later = w.now() + Duration::from_secs(180);
    w.net.run_until(later);
    let f = connect_once(&mut w, 5001, &store).ok_or("fallback connect failed")?;
    if f.mode != HandshakeMode::OneRtt || !f.first().starts_with("chlo-inchoate") {
        return Err(format!("expired scfg: {f:?}"));
    }
    Ok(())
}

pub fn zero_rtt_suite() -> Vec<(String, Result<(), String>)> {
    let mut v: Vec<(String, Result<(), String>)> = Profile::ALL
        .into_iter()
        .map(|p| (format!("{} warm session", p.name), zero_rtt_warm(p, 1)))
        .collect();
    v.push(("expired scfg falls back".into(), zero_rtt_expired_scfg(1)));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aead_roundtrip_and_tamper() {
        aead_property(1000).unwrap();
    }

    #[test]
    fn signature_correctness() {
        signature_property(100).unwrap();
    }

    #[test]
    fn dh_symmetry() {
        dh_property(100).unwrap();
    }

    #[test]
    fn expand_prefix() {
        expand_prefix_property(200).unwrap();
    }

    #[test]
    fn expand_matches_oracle() {
        expand_oracle_vectors().unwrap();
    }

    #[test]
    fn both_roles_derive_identical_keys() {
        handshake_keys_agree(4).unwrap();
    }

    #[test]
    fn replayed_chlo_is_struck() {
        strike_rejects_replay().unwrap();
    }

    #[test]
    fn second_seal_under_same_sqn_fails() {
        iv_reuse_refused().unwrap();
    }

    #[test]
    fn warm_session_sends_connect_in_first_flight() {
        for p in Profile::ALL {
            zero_rtt_warm(p, 1).unwrap();
            zero_rtt_warm(p, 42).unwrap();
        }
    }

    #[test]
    fn expired_scfg_completes_over_one_rtt() {
        zero_rtt_expired_scfg(1).unwrap();
        zero_rtt_expired_scfg(9).unwrap();
    }

    #[test]
    fn harness_drive_stops_when_established() {
        let mut h = Harness::new(2, TransportConfig::default());
        let mut c = h.client(2, None);
        let sent = h.establish(&mut c);
        assert!(c.handshake_completed());
        assert!(sent[0].label.starts_with("chlo-inchoate"));
        assert!(h.now < Timestamp::from_micros(100_000));
    }
}
