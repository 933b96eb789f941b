//! Server endpoint: answers CHLOs statelessly and demultiplexes packets to
//! connections by cid.

use super::config::TransportConfig;
use super::connection::{Connection, Transmit, CRYPTO_STREAM};
use super::frame::{decode_frames, encode_frames, Frame};
use super::handshake::{HandshakeMessage, RejectReason, ServerCrypto, TAG_CHLO};
use super::protect::{handshake_keys, open, pak, MARKER_KEX};
use super::wire::{Epoch, Header, Packet, HANDSHAKE_SIZE};
use super::ConnectionId;
use crate::crypto::{SignatureKeyPair, TAG_LEN};
use crate::{Role, Timestamp};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::{BTreeMap, VecDeque};
use std::net::{IpAddr, SocketAddr};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EndpointEvent {
    NewConnection(ConnectionId),
    Rejected {
        cid: ConnectionId,
        reason: Option<RejectReason>,
    },
    ConnectionClosed(ConnectionId),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct EndpointStats {
    pub rejects_sent: u64,
    pub connections_accepted: u64,
    pub unknown_cid: u64,
    pub malformed: u64,
}

pub struct ServerEndpoint {
    crypto: ServerCrypto,
    config: TransportConfig,
    rng: ChaCha20Rng,
    conns: BTreeMap<ConnectionId, Connection>,
    outgoing: VecDeque<Transmit>,
    events: VecDeque<EndpointEvent>,
    stats: EndpointStats,
}

impl ServerEndpoint {
    pub fn new(
        signing: SignatureKeyPair,
        config: TransportConfig,
        now: Timestamp,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let crypto = ServerCrypto::new(
            signing,
            config.handshake,
            config.wall.unix_secs(now),
            &mut rng,
        )
        .expect("supported handshake configuration");
        ServerEndpoint {
            crypto,
            config,
            rng,
            conns: BTreeMap::new(),
            outgoing: VecDeque::new(),
            events: VecDeque::new(),
            stats: EndpointStats::default(),
        }
    }

    pub fn public_key(&self) -> Vec<u8> {
        self.crypto.signing.pk.clone()
    }

    pub fn crypto(&mut self) -> &mut ServerCrypto {
        &mut self.crypto
    }

    pub fn stats(&self) -> &EndpointStats {
        &self.stats
    }

    pub fn connection(&mut self, cid: ConnectionId) -> Option<&mut Connection> {
        self.conns.get_mut(&cid)
    }

    pub fn connection_ids(&self) -> Vec<ConnectionId> {
        self.conns.keys().copied().collect()
    }

    /// Number of connections holding state (anything not yet fully closed).
    pub fn connection_count(&self) -> usize {
        self.conns.len()
    }

    pub fn poll_event(&mut self) -> Option<EndpointEvent> {
        self.events.pop_front()
    }

    pub fn handle_datagram(&mut self, now: Timestamp, src: SocketAddr, data: &[u8]) {
        let packet = match Packet::decode(data) {
            Ok(p) => p,
            Err(_) => {
                self.stats.malformed += 1;
                return;
            }
        };
        let cid = packet.header.cid;
        if let Some(c) = self.conns.get_mut(&cid) {
            c.handle_packet(now, src, packet);
            return;
        }
        if packet.header.epoch != Epoch::Handshake {
            self.stats.unknown_cid += 1;
            return;
        }
        let Some(chlo) = read_hello(&packet) else {
            self.stats.malformed += 1;
            return;
        };
        let IpAddr::V4(ip) = src.ip() else {
            self.stats.malformed += 1;
            return;
        };
        let now_unix = self.config.wall.unix_secs(now);
        if chlo.is_inchoate_chlo() {
            return self.reject(src, &packet.header, None, now_unix);
        }
        match self
            .crypto
            .accept_chlo(&chlo, ip, now_unix, cid, &mut self.rng)
        {
            Err(reason) => self.reject(src, &packet.header, Some(reason), now_unix),
            Ok(secrets) => {
                let Ok((shlo, k)) = self.crypto.s_hello(&secrets, cid, now_unix, &mut self.rng)
                else {
                    return self.reject(
                        src,
                        &packet.header,
                        Some(RejectReason::GroupMismatch),
                        now_unix,
                    );
                };
                let seed = self.rng.next_u64();
                let conn = Connection::server(
                    self.config,
                    cid,
                    src,
                    &secrets,
                    shlo,
                    k,
                    packet.header.sqn,
                    now,
                    seed,
                );
                self.conns.insert(cid, conn);
                self.stats.connections_accepted += 1;
                self.events.push_back(EndpointEvent::NewConnection(cid));
            }
        }
    }

    fn reject(
        &mut self,
        dst: SocketAddr,
        chlo: &Header,
        reason: Option<RejectReason>,
        now_unix: u64,
    ) {
        let rej = self.crypto.s_reject(
            match dst.ip() {
                IpAddr::V4(ip) => ip,
                IpAddr::V6(_) => unreachable!("checked by caller"),
            },
            now_unix,
            reason,
            &mut self.rng,
        );
        // The REJ echoes the CHLO sqn so the client can match it.
        let header = Header::new(Epoch::Handshake, chlo.cid, chlo.sqn);
        let mut frames = vec![Frame::Stream {
            id: CRYPTO_STREAM,
            offset: 0,
            fin: false,
            data: rej.encode(),
        }];
        let used = header.encoded_len() + 1 + TAG_LEN + frames[0].encoded_len();
        if HANDSHAKE_SIZE > used {
            frames.push(Frame::Padding(HANDSHAKE_SIZE - used));
        }
        let packet = pak(
            &handshake_keys(chlo.cid),
            header,
            MARKER_KEX,
            &encode_frames(&frames),
            Role::Server,
        );
        let label = format!("rej;cid={};sqn={};epoch=h", chlo.cid, chlo.sqn);
        self.outgoing.push_back(Transmit {
            dst,
            payload: packet.encode(),
            label,
        });
        self.stats.rejects_sent += 1;
        self.events.push_back(EndpointEvent::Rejected {
            cid: chlo.cid,
            reason,
        });
    }

    pub fn poll_transmit(&mut self, now: Timestamp) -> Option<Transmit> {
        if let Some(t) = self.outgoing.pop_front() {
            return Some(t);
        }
        self.conns.values_mut().find_map(|c| c.poll_transmit(now))
    }

    pub fn poll_timeout(&self) -> Option<Timestamp> {
        self.conns
            .values()
            .filter_map(Connection::poll_timeout)
            .min()
    }

    pub fn handle_timeout(&mut self, now: Timestamp) {
        for c in self.conns.values_mut() {
            if c.poll_timeout().is_some_and(|t| t <= now) {
                c.handle_timeout(now);
            }
        }
    }

    /// Removes fully closed connections. Their pending events must have been
    /// drained by the caller first.
    pub fn reap(&mut self) {
        let closed: Vec<ConnectionId> = self
            .conns
            .iter()
            .filter(|(_, c)| c.is_closed())
            .map(|(k, _)| *k)
            .collect();
        for cid in closed {
            self.conns.remove(&cid);
            self.events.push_back(EndpointEvent::ConnectionClosed(cid));
        }
    }
}

fn read_hello(packet: &Packet) -> Option<HandshakeMessage> {
    let keys = handshake_keys(packet.header.cid);
    let pt = open(&keys, packet, Role::Server).ok()?;
    if pt[0] != MARKER_KEX {
        return None;
    }
    decode_frames(&pt[1..])
        .ok()?
        .into_iter()
        .find_map(|f| match f {
            Frame::Stream {
                id: CRYPTO_STREAM,
                data,
                ..
            } => HandshakeMessage::decode(&data)
                .ok()
                .filter(|m| m.tag == TAG_CHLO),
            _ => None,
        })
}
