//! The connection state machine shared by client and server.
//!
//! A connection consumes datagrams and timer expiries and produces
//! datagrams, timer deadlines and [`Event`]s. It never touches a socket.

use super::config::TransportConfig;
use super::flow::{RecvWindow, SendCredit};
use super::frame::{decode_frames, encode_frames, AckFrame, Frame, SENT_NACK_RANGES};
use super::handshake::{
    c_hello, c_i_hello, derive_final_keys_client, derive_initial_keys_client, parse_rej,
    ClientSecrets, HandshakeError, HandshakeMessage, RejectReason, ScfgPub, ServerSecrets, TAG_REJ,
};
use super::protect::{handshake_keys, open, ProtectError, Sealer, MARKER_DATA, MARKER_KEX};
use super::ranges::RangeSet;
use super::recovery::{Recovery, SentFrame, SentPacket};
use super::stream::{StreamId, StreamMap};
use super::wire::{Epoch, Header, Packet, HANDSHAKE_SIZE, MAX_DATAGRAM, VERSION};
use super::{ConnectionId, TransportError};
use crate::crypto::{KeySet, TAG_LEN};
use crate::{Role, Timestamp};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::collections::VecDeque;
use std::net::SocketAddr;

/// Reserved stream carrying handshake messages inside key-exchange packets.
pub const CRYPTO_STREAM: StreamId = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    InitialSent,
    Rejected,
    KeyExchanged,
    Established,
    Draining,
    Closed,
}

/// Client progress label as reported to the agent layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientState {
    ClientInitial,
    ClientHandshakeFailed,
    ClientPostHandshake,
}

/// What a client keeps to attempt 0-RTT next time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResumeState {
    pub scfg: ScfgPub,
    pub stk: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CloseReason {
    Local,
    Peer { code: u32, reason: String },
    IdleTimeout,
    HandshakeFailed,
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    HandshakeComplete,
    HandshakeFailed(HandshakeError),
    ZeroRttRejected(Option<RejectReason>),
    Resumption(ResumeState),
    StreamOpened(StreamId),
    StreamReadable(StreamId),
    PeerMigrated {
        from: SocketAddr,
        to: SocketAddr,
    },
    Closing(CloseReason),
    /// All state released; the connection can be dropped.
    Drained,
}

/// A datagram ready to leave, with a human-readable label for traces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transmit {
    pub dst: SocketAddr,
    pub payload: Vec<u8>,
    pub label: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct ConnStats {
    pub packets_sent: u64,
    pub packets_received: u64,
    pub handshake_packets_sent: u64,
    pub retransmitted_chunks: u64,
    pub ptos: u64,
    pub migrations: u64,
    pub open_failures: u64,
    pub duplicate_packets: u64,
    pub duplicate_chlos: u64,
    pub undecryptable_dropped: u64,
}

#[derive(Debug)]
struct ClientHs {
    server_pk: Vec<u8>,
    secrets: Option<ClientSecrets>,
    pending_msg: Option<Vec<u8>>,
    current_msg: Vec<u8>,
    full_from_cache: bool,
    full_first_sqn: Option<u64>,
    server_accepted: bool,
    hs_deadline: Option<Timestamp>,
    hs_backoff: u32,
    crypto_offset: u64,
}

#[derive(Debug)]
struct ServerHs {
    shlo: Vec<u8>,
    shlo_sent: bool,
    k: KeySet,
    retransmit: Option<Vec<u8>>,
}

#[derive(Debug)]
pub struct Connection {
    role: Role,
    cid: ConnectionId,
    config: TransportConfig,
    phase: Phase,
    client_state: Option<ClientState>,
    peer: SocketAddr,
    client: Option<ClientHs>,
    server: Option<ServerHs>,
    hs: Sealer,
    ik: Option<Sealer>,
    k: Option<Sealer>,
    div_nonce: Option<[u8; 32]>,
    handshake_completed: bool,
    next_sqn: u64,
    initial_data_sent: usize,
    streams: StreamMap,
    conn_credit: SendCredit,
    conn_window: RecvWindow,
    conn_received: u64,
    control: VecDeque<Frame>,
    received: RangeSet,
    largest_recv: Option<(u64, Timestamp)>,
    ack_dirty: bool,
    ack_eliciting_pending: bool,
    recovery: Recovery,
    undecryptable: Vec<(SocketAddr, Packet)>,
    last_activity: Timestamp,
    drain_deadline: Option<Timestamp>,
    close_frame: Option<Frame>,
    close_pending: bool,
    events: VecDeque<Event>,
    stats: ConnStats,
    sent_log: Vec<(Epoch, u64)>,
    rr_cursor: StreamId,
    rng: ChaCha20Rng,
}

fn overhead(header: &Header) -> usize {
    header.encoded_len() + 1 + TAG_LEN
}

impl Connection {
    fn base(
        role: Role,
        cid: ConnectionId,
        peer: SocketAddr,
        config: TransportConfig,
        now: Timestamp,
        seed: u64,
    ) -> Self {
        Connection {
            role,
            cid,
            config,
            phase: Phase::Idle,
            client_state: None,
            peer,
            client: None,
            server: None,
            hs: Sealer::new(handshake_keys(cid), role),
            ik: None,
            k: None,
            div_nonce: None,
            handshake_completed: false,
            next_sqn: 1,
            initial_data_sent: 0,
            streams: StreamMap::new(role, config.stream_window, config.stream_window),
            conn_credit: SendCredit::new(config.conn_window),
            conn_window: RecvWindow::new(config.conn_window),
            conn_received: 0,
            control: VecDeque::new(),
            received: RangeSet::new(),
            largest_recv: None,
            ack_dirty: false,
            ack_eliciting_pending: false,
            recovery: Recovery::new(config.recovery),
            undecryptable: Vec::new(),
            last_activity: now,
            drain_deadline: None,
            close_frame: None,
            close_pending: false,
            events: VecDeque::new(),
            stats: ConnStats::default(),
            sent_log: Vec::new(),
            rr_cursor: 0,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Starts a client connection. With a usable `resume` state the first
    /// flight is a full CHLO followed by data under the initial key (0-RTT);
    /// otherwise an inchoate CHLO (1-RTT).
    pub fn client(
        config: TransportConfig,
        cid: ConnectionId,
        peer: SocketAddr,
        server_pk: Vec<u8>,
        resume: Option<&ResumeState>,
        now: Timestamp,
        seed: u64,
    ) -> Self {
        let mut c = Connection::base(Role::Client, cid, peer, config, now, seed);
        c.client_state = Some(ClientState::ClientInitial);
        let mut hs = ClientHs {
            server_pk,
            secrets: None,
            pending_msg: None,
            current_msg: Vec::new(),
            full_from_cache: false,
            full_first_sqn: None,
            server_accepted: false,
            hs_deadline: None,
            hs_backoff: 0,
            crypto_offset: 0,
        };
        let now_unix = config.wall.unix_secs(now);
        let resumed =
            resume.and_then(|r| c_hello(&r.scfg, &r.stk, &hs.server_pk, now_unix, &mut c.rng).ok());
        match resumed {
            Some((chlo, secrets)) => {
                let ik = derive_initial_keys_client(&secrets, cid).expect("verified config");
                c.ik = Some(Sealer::new(ik, Role::Client));
                hs.secrets = Some(secrets);
                hs.pending_msg = Some(chlo.encode());
                hs.full_from_cache = true;
                c.phase = Phase::KeyExchanged;
            }
            None => {
                hs.pending_msg = Some(c_i_hello().encode());
                c.phase = Phase::InitialSent;
            }
        }
        c.client = Some(hs);
        c
    }

    /// Builds the server side of a connection whose full CHLO (received with
    /// `chlo_sqn`) was accepted. `shlo` and `k` come from the endpoint.
    #[allow(clippy::too_many_arguments)]
    pub fn server(
        config: TransportConfig,
        cid: ConnectionId,
        peer: SocketAddr,
        secrets: &ServerSecrets,
        shlo: Vec<u8>,
        k: KeySet,
        chlo_sqn: u64,
        now: Timestamp,
        seed: u64,
    ) -> Self {
        let mut c = Connection::base(Role::Server, cid, peer, config, now, seed);
        c.ik = Some(Sealer::new(secrets.ik, Role::Server));
        c.div_nonce = Some(secrets.div_nonce);
        c.server = Some(ServerHs {
            shlo,
            shlo_sent: false,
            k,
            retransmit: None,
        });
        c.phase = Phase::KeyExchanged;
        c.next_sqn = 2;
        c.received.insert(chlo_sqn);
        c.largest_recv = Some((chlo_sqn, now));
        c.ack_dirty = true;
        c
    }

    pub fn cid(&self) -> ConnectionId {
        self.cid
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn client_state(&self) -> Option<ClientState> {
        self.client_state
    }

    pub fn handshake_completed(&self) -> bool {
        self.handshake_completed
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    pub fn stats(&self) -> &ConnStats {
        &self.stats
    }

    pub fn config(&self) -> &TransportConfig {
        &self.config
    }

    pub fn initial_keys(&self) -> Option<KeySet> {
        self.ik.as_ref().map(|s| s.keys)
    }

    pub fn final_keys(&self) -> Option<KeySet> {
        match (&self.k, &self.server) {
            (Some(s), _) => Some(s.keys),
            (None, Some(s)) if !matches!(self.phase, Phase::Closed) => Some(s.k),
            _ => None,
        }
    }

    /// Every `(epoch, sqn)` sealed so far, if recording is enabled.
    pub fn sent_log(&self) -> &[(Epoch, u64)] {
        &self.sent_log
    }

    pub fn srtt(&self) -> std::time::Duration {
        self.recovery.rtt.srtt
    }

    pub fn pto(&self) -> std::time::Duration {
        self.recovery.pto_base()
    }

    pub fn is_closed(&self) -> bool {
        self.phase == Phase::Closed
    }

    pub fn is_draining(&self) -> bool {
        matches!(self.phase, Phase::Draining | Phase::Closed)
    }

    pub fn poll_event(&mut self) -> Option<Event> {
        self.events.pop_front()
    }

    // ---- application interface -------------------------------------------------

    pub fn open_stream(&mut self) -> Result<StreamId, TransportError> {
        if self.is_draining() {
            return Err(TransportError::Closing);
        }
        Ok(self.streams.open())
    }

    pub fn stream_write(
        &mut self,
        id: StreamId,
        data: &[u8],
        fin: bool,
    ) -> Result<(), TransportError> {
        if self.is_draining() {
            return Err(TransportError::Closing);
        }
        self.streams.find(id)?.write(data, fin)
    }

    /// Drains readable bytes and queues any window advertisements.
    pub fn stream_read(&mut self, id: StreamId) -> Result<Vec<u8>, TransportError> {
        let s = self
            .streams
            .get_mut(id)
            .ok_or(TransportError::UnknownStream(id))?;
        let (data, update) = s.read();
        if let Some(offset) = update {
            self.control.push_back(Frame::WindowUpdate {
                stream_id: id,
                offset,
            });
        }
        if !data.is_empty() {
            if let Some(offset) = self.conn_window.consume(data.len() as u64) {
                self.control.push_back(Frame::WindowUpdate {
                    stream_id: 0,
                    offset,
                });
            }
        }
        Ok(data)
    }

    pub fn stream_is_fin(&self, id: StreamId) -> bool {
        self.streams.get(id).is_some_and(|s| s.is_fin_received())
    }

    pub fn reset_stream(&mut self, id: StreamId, error_code: u32) -> Result<(), TransportError> {
        let final_offset = self.streams.find(id)?.reset();
        self.control.push_back(Frame::RstStream {
            stream_id: id,
            final_offset,
            error_code,
        });
        Ok(())
    }

    /// Registry access for the stream generator in the agent layer.
    pub fn streams(&mut self) -> &mut StreamMap {
        &mut self.streams
    }

    /// True when every byte written on every stream has been acknowledged.
    pub fn all_acked(&self) -> bool {
        self.streams.iter().all(|s| s.all_acked())
    }

    pub fn close(&mut self, error_code: u32, reason: &str) {
        if self.is_draining() {
            return;
        }
        self.close_frame = Some(Frame::Close {
            error_code,
            reason: reason.to_string(),
        });
        self.close_pending = true;
    }

    /// Called when the local address changed; probes the new path.
    pub fn on_local_address_change(&mut self) {
        if !self.is_draining() && !self.control.contains(&Frame::Ping) {
            self.control.push_back(Frame::Ping);
        }
    }

    // ---- agent-level sealing ---------------------------------------------------

    /// Seals an application payload with the key selected by
    /// `handshake_completed`, consuming a fresh sqn.
    pub fn encrypt_message(&mut self, payload: &[u8]) -> Result<Packet, ProtectError> {
        let sqn = self.next_sqn;
        self.next_sqn += 1;
        self.encrypt_message_at(sqn, payload)
    }

    /// As [`encrypt_message`](Self::encrypt_message) but with a caller-chosen
    /// sqn; a sqn that was already used under the key yields an error.
    pub fn encrypt_message_at(&mut self, sqn: u64, payload: &[u8]) -> Result<Packet, ProtectError> {
        let (epoch, sealer) = if self.handshake_completed {
            (Epoch::Final, self.k.as_mut())
        } else {
            (Epoch::Initial, self.ik.as_mut())
        };
        let sealer = sealer.ok_or(ProtectError::Open)?;
        let mut header = Header::new(epoch, self.cid, sqn);
        if self.role == Role::Server && epoch == Epoch::Initial {
            header.div_nonce = self.div_nonce;
        }
        sealer.seal(header, MARKER_DATA, payload)
    }

    /// Opens an application payload with the key selected by
    /// `handshake_completed`.
    pub fn decrypt_message(&self, packet: &Packet) -> Result<Vec<u8>, ProtectError> {
        let keys = if self.handshake_completed {
            self.final_keys()
        } else {
            self.initial_keys()
        };
        let keys = keys.ok_or(ProtectError::Open)?;
        let pt = open(&keys, packet, self.role)?;
        if pt[0] != MARKER_DATA {
            return Err(ProtectError::Marker);
        }
        Ok(pt[1..].to_vec())
    }

    // ---- receive path ----------------------------------------------------------

    pub fn handle_datagram(&mut self, now: Timestamp, src: SocketAddr, data: &[u8]) {
        match Packet::decode(data) {
            Ok(p) if p.header.cid == self.cid => self.handle_packet(now, src, p),
            _ => self.stats.open_failures += 1,
        }
    }

    pub fn handle_packet(&mut self, now: Timestamp, src: SocketAddr, packet: Packet) {
        if self.phase == Phase::Closed {
            return;
        }
        if packet.header.version.is_some_and(|v| v != VERSION) {
            return;
        }
        if self.phase == Phase::Draining {
            // A closing endpoint answers stray packets with its CLOSE again.
            if self.close_frame.is_some() && packet.header.epoch != Epoch::Handshake {
                self.close_pending = true;
            }
            return;
        }
        let keys = match packet.header.epoch {
            Epoch::Handshake => return self.handle_handshake_packet(now, &packet),
            Epoch::Initial => self.ik.as_ref().map(|s| s.keys),
            Epoch::Final => self.k.as_ref().map(|s| s.keys),
        };
        let Some(keys) = keys else {
            if self.undecryptable.len() < self.config.max_undecryptable {
                self.undecryptable.push((src, packet));
            } else {
                self.stats.undecryptable_dropped += 1;
            }
            return;
        };
        let pt = match open(&keys, &packet, self.role) {
            Ok(pt) => pt,
            Err(_) => {
                self.stats.open_failures += 1;
                return;
            }
        };
        let sqn = packet.header.sqn;
        self.last_activity = now;
        if !self.received.insert(sqn) {
            self.stats.duplicate_packets += 1;
            self.ack_dirty = true;
            self.ack_eliciting_pending = true;
            return;
        }
        self.stats.packets_received += 1;
        self.ack_dirty = true;
        let newest = self.largest_recv.is_none_or(|(l, _)| sqn > l);
        if newest {
            self.largest_recv = Some((sqn, now));
            if src != self.peer {
                self.migrate(src);
            }
        }
        if let Some(c) = self.client.as_mut() {
            c.server_accepted = true;
            c.hs_deadline = None;
            c.pending_msg = None;
            if packet.header.div_nonce.is_some() {
                self.div_nonce = packet.header.div_nonce;
            }
        }
        let frames = match decode_frames(&pt[1..]) {
            Ok(f) => f,
            Err(_) => return self.fail_protocol("undecodable frames"),
        };
        if frames.iter().any(Frame::is_ack_eliciting) {
            self.ack_eliciting_pending = true;
        }
        if pt[0] == MARKER_KEX {
            self.handle_kex(packet.header.epoch, &frames);
        } else {
            for f in frames {
                if self.is_draining() {
                    break;
                }
                self.handle_frame(now, f);
            }
        }
    }

    fn migrate(&mut self, src: SocketAddr) {
        let from = self.peer;
        self.peer = src;
        self.stats.migrations += 1;
        self.events.push_back(Event::PeerMigrated { from, to: src });
        // Whatever was in flight went to the old path: resend it now.
        let lost = self.recovery.take_all_in_flight();
        self.on_lost(lost);
    }

    fn handle_kex(&mut self, epoch: Epoch, frames: &[Frame]) {
        if self.role != Role::Client || epoch != Epoch::Initial {
            return self.fail_protocol("unexpected key exchange payload");
        }
        if self.handshake_completed {
            return;
        }
        let Some(shlo) = frames.iter().find_map(|f| match f {
            Frame::Stream {
                id: CRYPTO_STREAM,
                data,
                ..
            } => Some(data.clone()),
            _ => None,
        }) else {
            return;
        };
        if let Err(e) = self.process_shlo(&shlo) {
            self.fail_handshake(e);
        }
    }

    fn process_shlo(&mut self, shlo: &[u8]) -> Result<(), HandshakeError> {
        let div = self
            .div_nonce
            .ok_or(HandshakeError::Malformed("missing diversification nonce"))?;
        let hs = self.client.as_ref().expect("client");
        let secrets = hs.secrets.as_ref().ok_or(HandshakeError::BadServerHello)?;
        let (k, stk) = derive_final_keys_client(secrets, shlo, &div, self.cid)?;
        let resume = ResumeState {
            scfg: secrets.scfg.clone(),
            stk: stk.unwrap_or_else(|| secrets.stk.clone()),
        };
        self.k = Some(Sealer::new(k, Role::Client));
        self.handshake_completed = true;
        self.phase = Phase::Established;
        self.client_state = Some(ClientState::ClientPostHandshake);
        self.events.push_back(Event::HandshakeComplete);
        self.events.push_back(Event::Resumption(resume));
        self.retry_undecryptable();
        Ok(())
    }

    fn retry_undecryptable(&mut self) {
        let buffered = std::mem::take(&mut self.undecryptable);
        let now = self.last_activity;
        for (src, p) in buffered {
            self.handle_packet(now, src, p);
        }
    }

    fn handle_handshake_packet(&mut self, now: Timestamp, packet: &Packet) {
        let Ok(pt) = open(&self.hs.keys, packet, self.role) else {
            self.stats.open_failures += 1;
            return;
        };
        let msg = decode_frames(&pt[1..]).ok().and_then(|fs| {
            fs.into_iter().find_map(|f| match f {
                Frame::Stream {
                    id: CRYPTO_STREAM,
                    data,
                    ..
                } => HandshakeMessage::decode(&data).ok(),
                _ => None,
            })
        });
        let Some(msg) = msg else { return };
        match self.role {
            Role::Server => self.stats.duplicate_chlos += 1,
            Role::Client if msg.tag == TAG_REJ => self.handle_rej(now, packet.header.sqn, &msg),
            Role::Client => {}
        }
    }

    fn handle_rej(&mut self, now: Timestamp, sqn: u64, rej: &HandshakeMessage) {
        let hs = self.client.as_ref().expect("client");
        if self.handshake_completed || hs.server_accepted {
            return;
        }
        let (scfg, stk, reason) = match parse_rej(rej) {
            Ok(v) => v,
            Err(e) => return self.fail_handshake(e),
        };
        match self.phase {
            Phase::InitialSent => {}
            Phase::Rejected | Phase::KeyExchanged => {
                let stale = reason.is_none() || hs.full_first_sqn.is_none_or(|f| sqn < f);
                if stale {
                    return;
                }
                if !hs.full_from_cache {
                    return self.fail_handshake(HandshakeError::Rejected(reason.unwrap()));
                }
                self.events.push_back(Event::ZeroRttRejected(reason));
                let lost = self.recovery.take_all_in_flight();
                self.on_lost(lost);
                self.initial_data_sent = 0;
            }
            _ => return,
        }
        let now_unix = self.config.wall.unix_secs(now);
        let pk = self.client.as_ref().unwrap().server_pk.clone();
        match c_hello(&scfg, &stk, &pk, now_unix, &mut self.rng) {
            Ok((chlo, secrets)) => {
                let ik = match derive_initial_keys_client(&secrets, self.cid) {
                    Ok(ik) => ik,
                    Err(e) => return self.fail_handshake(e),
                };
                self.ik = Some(Sealer::new(ik, Role::Client));
                let hs = self.client.as_mut().unwrap();
                hs.secrets = Some(secrets);
                hs.pending_msg = Some(chlo.encode());
                hs.full_from_cache = false;
                hs.full_first_sqn = None;
                hs.hs_backoff = 0;
                self.phase = Phase::Rejected;
                self.client_state = Some(ClientState::ClientInitial);
            }
            Err(e) => self.fail_handshake(e),
        }
    }

    fn fail_handshake(&mut self, e: HandshakeError) {
        self.client_state = Some(ClientState::ClientHandshakeFailed);
        self.events.push_back(Event::HandshakeFailed(e));
        self.events
            .push_back(Event::Closing(CloseReason::HandshakeFailed));
        self.release();
        self.phase = Phase::Closed;
        self.events.push_back(Event::Drained);
    }

    fn fail_protocol(&mut self, why: &str) {
        self.close_frame = Some(Frame::Close {
            error_code: 1,
            reason: why.to_string(),
        });
        self.close_pending = true;
        self.events
            .push_back(Event::Closing(CloseReason::Protocol(why.to_string())));
    }

    fn handle_frame(&mut self, now: Timestamp, f: Frame) {
        match f {
            Frame::Padding(_) | Frame::Ping => {}
            Frame::Stream {
                id,
                offset,
                fin,
                data,
            } => {
                let is_new = !self.streams.is_local(id) && self.streams.get(id).is_none();
                let res = match self.streams.for_incoming(id) {
                    Ok(Some(s)) => {
                        let prev_high = s.highest_received();
                        s.on_data(offset, &data, fin)
                            .map(|n| (n, s.highest_received() - prev_high))
                    }
                    Ok(None) => Ok((0, 0)),
                    Err(e) => Err(e),
                };
                match res {
                    Ok((n, grew)) => {
                        self.conn_received += grew;
                        if !self.conn_window.permits(self.conn_received) {
                            return self.fail_protocol("connection flow control");
                        }
                        if is_new && self.streams.get(id).is_some() {
                            self.events.push_back(Event::StreamOpened(id));
                        }
                        if n > 0 {
                            self.events.push_back(Event::StreamReadable(id));
                        }
                    }
                    Err(_) => self.fail_protocol("stream error"),
                }
            }
            Frame::Ack(ack) => {
                let out = self.recovery.on_ack(&ack, now);
                for p in &out.acked {
                    for f in &p.frames {
                        if let SentFrame::Stream { id, chunk } = f {
                            if let Some(s) = self.streams.get_mut(*id) {
                                s.on_chunk_acked(chunk);
                            }
                        }
                    }
                }
                self.on_lost(out.lost);
            }
            Frame::WindowUpdate {
                stream_id: 0,
                offset,
            } => {
                self.conn_credit.update(offset);
            }
            Frame::WindowUpdate { stream_id, offset } => {
                if let Some(s) = self.streams.get_mut(stream_id) {
                    s.credit.update(offset);
                }
            }
            Frame::RstStream {
                stream_id,
                final_offset,
                ..
            } => {
                if let Ok(Some(s)) = self.streams.for_incoming(stream_id) {
                    let prev_high = s.highest_received();
                    if s.on_reset(final_offset).is_err() {
                        return self.fail_protocol("final offset changed");
                    }
                    self.conn_received += final_offset.saturating_sub(prev_high);
                    self.events.push_back(Event::StreamReadable(stream_id));
                }
            }
            Frame::Close { error_code, reason } => {
                self.enter_draining(
                    now,
                    CloseReason::Peer {
                        code: error_code,
                        reason,
                    },
                );
            }
        }
    }

    fn on_lost(&mut self, lost: Vec<SentPacket>) {
        for p in lost {
            for f in p.frames {
                match f {
                    SentFrame::Stream { id, chunk } => {
                        if let Some(s) = self.streams.get_mut(id) {
                            self.stats.retransmitted_chunks += 1;
                            s.on_chunk_lost(chunk);
                        }
                    }
                    SentFrame::Crypto { data } => {
                        if let Some(s) = self.server.as_mut() {
                            s.retransmit = Some(data);
                        }
                    }
                    SentFrame::WindowUpdate { stream_id } => {
                        let offset = if stream_id == 0 {
                            Some(self.conn_window.advertised)
                        } else {
                            self.streams.get(stream_id).map(|s| s.window.advertised)
                        };
                        if let Some(offset) = offset {
                            self.control
                                .push_back(Frame::WindowUpdate { stream_id, offset });
                        }
                    }
                    SentFrame::RstStream {
                        stream_id,
                        final_offset,
                        error_code,
                    } => {
                        self.control.push_back(Frame::RstStream {
                            stream_id,
                            final_offset,
                            error_code,
                        });
                    }
                    SentFrame::Ping => {
                        if !self.control.contains(&Frame::Ping) {
                            self.control.push_back(Frame::Ping);
                        }
                    }
                }
            }
        }
    }

    // ---- timers ----------------------------------------------------------------

    pub fn poll_timeout(&self) -> Option<Timestamp> {
        match self.phase {
            Phase::Closed => return None,
            Phase::Draining => return self.drain_deadline,
            _ => {}
        }
        let mut t = self.last_activity + self.config.idle_timeout;
        for d in [
            self.recovery.loss_time(),
            self.recovery.pto_deadline(),
            self.client.as_ref().and_then(|c| c.hs_deadline),
        ]
        .into_iter()
        .flatten()
        {
            t = t.min(d);
        }
        Some(t)
    }

    pub fn handle_timeout(&mut self, now: Timestamp) {
        match self.phase {
            Phase::Closed => return,
            Phase::Draining => {
                if self.drain_deadline.is_some_and(|d| now >= d) {
                    self.release();
                    self.phase = Phase::Closed;
                    self.events.push_back(Event::Drained);
                }
                return;
            }
            _ => {}
        }
        if now >= self.last_activity + self.config.idle_timeout {
            self.enter_draining(now, CloseReason::IdleTimeout);
            return;
        }
        if self.recovery.loss_time().is_some_and(|t| now >= t) {
            let lost = self.recovery.detect_lost(now);
            self.on_lost(lost);
        }
        if self.recovery.pto_deadline().is_some_and(|t| now >= t) {
            self.stats.ptos += 1;
            let lost = self.recovery.on_pto();
            self.on_lost(lost);
        }
        if let Some(c) = self.client.as_mut() {
            if c.hs_deadline.is_some_and(|t| now >= t) {
                c.hs_deadline = None;
                c.hs_backoff += 1;
                c.pending_msg = Some(c.current_msg.clone());
            }
        }
    }

    fn enter_draining(&mut self, now: Timestamp, reason: CloseReason) {
        if self.is_draining() {
            return;
        }
        self.phase = Phase::Draining;
        self.drain_deadline = Some(now + self.recovery.pto_base() * self.config.drain_ptos);
        self.recovery.clear();
        self.events.push_back(Event::Closing(reason));
    }

    /// Drops stream buffers and key material.
    fn release(&mut self) {
        self.streams.clear();
        self.recovery.clear();
        self.control.clear();
        self.undecryptable.clear();
        self.ik = None;
        self.k = None;
        self.server = None;
        if let Some(c) = self.client.as_mut() {
            c.secrets = None;
            c.pending_msg = None;
            c.hs_deadline = None;
        }
    }

    // ---- send path -------------------------------------------------------------

    fn send_epoch(&self) -> Option<Epoch> {
        match self.role {
            Role::Client if self.k.is_some() => Some(Epoch::Final),
            Role::Client if self.ik.is_some() && self.phase != Phase::Rejected => {
                Some(Epoch::Initial)
            }
            Role::Client => None,
            Role::Server if self.k.is_some() => Some(Epoch::Final),
            Role::Server => Some(Epoch::Initial),
        }
    }

    fn header(&self, epoch: Epoch) -> Header {
        let mut h = Header::new(epoch, self.cid, self.next_sqn);
        if self.role == Role::Client && epoch == Epoch::Handshake {
            h.version = Some(VERSION);
        }
        if self.role == Role::Server && epoch == Epoch::Initial {
            h.div_nonce = self.div_nonce;
        }
        h
    }

    fn ack_frame(&self, now: Timestamp) -> Option<Frame> {
        let (largest, at) = self.largest_recv?;
        Some(Frame::Ack(AckFrame {
            largest,
            delay_us: (now - at).as_micros() as u64,
            nacks: self.received.gaps(SENT_NACK_RANGES),
        }))
    }

    #[allow(clippy::too_many_arguments)]
    fn emit(
        &mut self,
        now: Timestamp,
        epoch: Epoch,
        marker: u8,
        mut frames: Vec<Frame>,
        sent: Vec<SentFrame>,
        pad_to: Option<usize>,
        kind: &str,
    ) -> Transmit {
        let header = self.header(epoch);
        if let Some(target) = pad_to {
            let used = overhead(&header) + frames.iter().map(Frame::encoded_len).sum::<usize>();
            if target > used {
                frames.push(Frame::Padding(target - used));
            }
        }
        let ack_eliciting = frames.iter().any(Frame::is_ack_eliciting) && epoch != Epoch::Handshake;
        if frames.iter().any(|f| matches!(f, Frame::Ack(_))) {
            self.ack_dirty = false;
            self.ack_eliciting_pending = false;
        }
        let stream = frames.iter().find_map(|f| match f {
            Frame::Stream { id, .. } if marker == MARKER_DATA => Some(*id),
            _ => None,
        });
        let sqn = header.sqn;
        self.next_sqn += 1;
        let payload = encode_frames(&frames);
        let sealer = match epoch {
            Epoch::Handshake => &mut self.hs,
            Epoch::Initial => self.ik.as_mut().expect("initial key"),
            Epoch::Final => self.k.as_mut().expect("final key"),
        };
        let packet = sealer
            .seal(header, marker, &payload)
            .expect("sqn increases monotonically");
        if self.config.record_sent {
            self.sent_log.push((epoch, sqn));
        }
        self.stats.packets_sent += 1;
        if epoch == Epoch::Handshake {
            self.stats.handshake_packets_sent += 1;
        }
        self.recovery.on_packet_sent(SentPacket {
            sqn,
            epoch,
            time_sent: now,
            ack_eliciting,
            frames: sent,
        });
        let e = match epoch {
            Epoch::Handshake => 'h',
            Epoch::Initial => 'i',
            Epoch::Final => 'f',
        };
        let mut label = format!("{kind};cid={};sqn={sqn};epoch={e}", self.cid);
        if let Some(id) = stream {
            label.push_str(&format!(";stream={id}"));
        }
        Transmit {
            dst: self.peer,
            payload: packet.encode(),
            label,
        }
    }

    pub fn poll_transmit(&mut self, now: Timestamp) -> Option<Transmit> {
        match self.phase {
            Phase::Closed => return None,
            Phase::Draining => {
                if !self.close_pending {
                    return None;
                }
                self.close_pending = false;
                let epoch = self.send_epoch()?;
                let frames = vec![self.close_frame.clone()?];
                return Some(self.emit(now, epoch, MARKER_DATA, frames, vec![], None, "close"));
            }
            _ => {}
        }
        if let Some(t) = self.poll_client_handshake(now) {
            return Some(t);
        }
        if self.close_pending {
            self.close_pending = false;
            let Some(epoch) = self.send_epoch() else {
                self.enter_draining(now, CloseReason::Local);
                return None;
            };
            let mut frames: Vec<Frame> = self.ack_frame(now).into_iter().collect();
            frames.push(self.close_frame.clone().expect("close frame"));
            let t = self.emit(now, epoch, MARKER_DATA, frames, vec![], None, "close");
            self.enter_draining(now, CloseReason::Local);
            // The CLOSE already went out; only resend it if the peer talks.
            self.close_pending = false;
            return Some(t);
        }
        let epoch = self.send_epoch()?;
        if let Some(t) = self.poll_server_hello(now) {
            return Some(t);
        }
        self.poll_data(now, epoch)
    }

    fn poll_client_handshake(&mut self, now: Timestamp) -> Option<Transmit> {
        let msg = self.client.as_mut()?.pending_msg.take()?;
        let pto = self.recovery.pto_base();
        let sqn = self.next_sqn;
        let full = !HandshakeMessage::decode(&msg)
            .map(|m| m.is_inchoate_chlo())
            .unwrap_or(true);
        let hs = self.client.as_mut().unwrap();
        hs.hs_deadline = Some(now + pto * 2u32.saturating_pow(hs.hs_backoff.min(16)));
        if full && hs.full_first_sqn.is_none() {
            hs.full_first_sqn = Some(sqn);
        }
        let offset = hs.crypto_offset;
        if hs.current_msg != msg {
            hs.crypto_offset += msg.len() as u64;
        }
        hs.current_msg = msg.clone();
        if full && self.phase == Phase::Rejected {
            self.phase = Phase::KeyExchanged;
        }
        let frames = vec![Frame::Stream {
            id: CRYPTO_STREAM,
            offset,
            fin: false,
            data: msg,
        }];
        let kind = if full { "chlo-full" } else { "chlo-inchoate" };
        Some(self.emit(
            now,
            Epoch::Handshake,
            MARKER_KEX,
            frames,
            vec![],
            Some(HANDSHAKE_SIZE),
            kind,
        ))
    }

    fn poll_server_hello(&mut self, now: Timestamp) -> Option<Transmit> {
        let cap = self.config.initial_data_packets;
        let data_ready = self.has_new_stream_data();
        let initial_sent = self.initial_data_sent;
        let s = self.server.as_mut()?;
        let data = if let Some(d) = s.retransmit.take() {
            d
        } else if !s.shlo_sent && (initial_sent >= cap || !data_ready) {
            s.shlo_sent = true;
            s.shlo.clone()
        } else {
            return None;
        };
        let frames = vec![Frame::Stream {
            id: CRYPTO_STREAM,
            offset: 0,
            fin: false,
            data: data.clone(),
        }];
        let t = self.emit(
            now,
            Epoch::Initial,
            MARKER_KEX,
            frames,
            vec![SentFrame::Crypto { data }],
            None,
            "shlo",
        );
        if !self.handshake_completed {
            let k = self.server.as_ref().unwrap().k;
            self.k = Some(Sealer::new(k, Role::Server));
            self.handshake_completed = true;
            self.phase = Phase::Established;
            self.events.push_back(Event::HandshakeComplete);
        }
        Some(t)
    }

    fn has_new_stream_data(&self) -> bool {
        self.conn_credit.available() > 0
            && self
                .streams
                .iter()
                .any(|s| s.has_pending_send() && !s.is_blocked())
    }

    fn poll_data(&mut self, now: Timestamp, epoch: Epoch) -> Option<Transmit> {
        let mut frames: Vec<Frame> = Vec::new();
        let mut sent: Vec<SentFrame> = Vec::new();
        let header_len = overhead(&self.header(epoch));
        let ack = if self.ack_dirty {
            self.ack_frame(now)
        } else {
            None
        };
        let mut budget = MAX_DATAGRAM - header_len - ack.as_ref().map_or(0, Frame::encoded_len);
        while let Some(f) = self.control.front() {
            if f.encoded_len() > budget {
                break;
            }
            let f = self.control.pop_front().unwrap();
            budget -= f.encoded_len();
            sent.push(match &f {
                Frame::WindowUpdate { stream_id, .. } => SentFrame::WindowUpdate {
                    stream_id: *stream_id,
                },
                Frame::RstStream {
                    stream_id,
                    final_offset,
                    error_code,
                } => SentFrame::RstStream {
                    stream_id: *stream_id,
                    final_offset: *final_offset,
                    error_code: *error_code,
                },
                _ => SentFrame::Ping,
            });
            frames.push(f);
        }
        let cwnd_open = self.recovery.ack_eliciting_in_flight() < self.config.cwnd_packets;
        let allow_new =
            epoch != Epoch::Initial || self.initial_data_sent < self.config.initial_data_packets;
        let stream_overhead = 1 + 4 + 8 + 1 + 2;
        let mut new_data = false;
        if cwnd_open && budget > stream_overhead {
            if let Some((id, chunk, fresh)) = self.next_chunk(budget - stream_overhead, allow_new) {
                frames.push(Frame::Stream {
                    id,
                    offset: chunk.offset,
                    fin: chunk.fin,
                    data: chunk.data.clone(),
                });
                sent.push(SentFrame::Stream { id, chunk });
                new_data = fresh;
            }
        }
        let eliciting = frames.iter().any(Frame::is_ack_eliciting);
        if !eliciting && !self.ack_eliciting_pending {
            return None;
        }
        if new_data && epoch == Epoch::Initial {
            self.initial_data_sent += 1;
        }
        let kind = if frames.iter().any(|f| matches!(f, Frame::Stream { .. })) {
            "data"
        } else if frames
            .iter()
            .any(|f| matches!(f, Frame::WindowUpdate { .. }))
        {
            "window"
        } else if frames.contains(&Frame::Ping) {
            "ping"
        } else if eliciting {
            "control"
        } else {
            "ack"
        };
        if let Some(a) = ack {
            frames.insert(0, a);
        }
        Some(self.emit(now, epoch, MARKER_DATA, frames, sent, None, kind))
    }

    /// Round-robin over streams with something to send; one stream per
    /// packet.
    fn next_chunk(
        &mut self,
        max_len: usize,
        allow_new: bool,
    ) -> Option<(StreamId, super::stream::Chunk, bool)> {
        let ids = self.streams.ids();
        let start = ids.partition_point(|&id| id <= self.rr_cursor);
        let order = ids[start..]
            .iter()
            .chain(ids[..start].iter())
            .copied()
            .collect::<Vec<_>>();
        let conn_credit = if allow_new {
            self.conn_credit.available()
        } else {
            0
        };
        for id in order {
            let s = self.streams.get_mut(id).unwrap();
            if !s.has_pending_send() {
                continue;
            }
            if let Some((chunk, fresh)) = s.next_chunk(max_len, conn_credit) {
                self.conn_credit.used += fresh;
                self.rr_cursor = id;
                let is_new = fresh > 0 || (chunk.fin && chunk.data.is_empty());
                return Some((id, chunk, is_new));
            }
        }
        None
    }
}
