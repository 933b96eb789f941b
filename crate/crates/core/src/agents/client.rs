//! Client agent: an MQTT client session carried over one transport
//! connection.

use super::framing::Framer;
use super::session::{ResumeStore, SessionFile};
use super::{AgentError, AgentEvent, EventKind};
use crate::mqtt::{mqtt_parse_args, valid_mqtt_header, Kind, MqttMessage};
use crate::netsim::Node;
use crate::transport::{
    ClientState, CloseReason, Connection, ConnectionId, Event, StreamId, Transmit, TransportConfig,
};
use crate::{Direction, Timestamp};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::any::Any;
use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddr;
use std::time::Duration;

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub client_id: String,
    /// Ask the broker to keep subscriptions across reconnects.
    pub persist: bool,
    pub server: SocketAddr,
    pub server_pk: Vec<u8>,
    /// MQTT keep-alive in seconds; 0 disables it.
    pub keep_alive: u16,
    pub transport: TransportConfig,
    pub seed: u64,
    /// Give each topic its own stream; otherwise everything shares one.
    pub stream_per_topic: bool,
    /// Send DISCONNECT after this many PUBLISH messages have arrived.
    pub disconnect_after: Option<usize>,
    /// Keep a timestamped log of every received message.
    pub record: bool,
}

impl ClientConfig {
    pub fn new(client_id: &str, server: SocketAddr, server_pk: Vec<u8>) -> Self {
        ClientConfig {
            client_id: client_id.to_string(),
            persist: false,
            server,
            server_pk,
            keep_alive: 0,
            transport: TransportConfig::default(),
            seed: 0,
            stream_per_topic: true,
            disconnect_after: None,
            record: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MqttState {
    Connecting,
    Connected,
    Disconnecting,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HandshakeMode {
    OneRtt,
    ZeroRtt,
}

pub struct ClientAgent {
    config: ClientConfig,
    conn: Connection,
    mode: HandshakeMode,
    state: MqttState,
    store: Box<dyn ResumeStore>,
    events: VecDeque<AgentEvent>,
    tx_msg_queue: VecDeque<(Option<String>, Vec<u8>)>,
    rx_msg_queue: VecDeque<MqttMessage>,
    pending: VecDeque<MqttMessage>,
    disconnect_requested: bool,
    control: Option<StreamId>,
    topic_streams: BTreeMap<String, StreamId>,
    framer: Framer,
    next_msgid: u16,
    inflight: BTreeMap<u16, MqttMessage>,
    publishes_received: usize,
    log: Vec<(Timestamp, MqttMessage)>,
    last_sent: Timestamp,
    zero_rtt_rejected: bool,
    error: Option<AgentError>,
}

impl ClientAgent {
    /// Builds the CONNECT, checks it, picks 1-RTT or 0-RTT and queues the
    /// first flight.
    pub fn client_connect(
        config: ClientConfig,
        store: Box<dyn ResumeStore>,
        now: Timestamp,
    ) -> Result<Self, AgentError> {
        let connect = mqtt_message_initializer(&config);
        connect.sanity().map_err(AgentError::Sanity)?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let cid = ConnectionId::random(&mut rng);
        let (conn, mode) = protocol_connect(&config, store.as_ref(), cid, now, rng.next_u64());
        let mut agent = ClientAgent {
            conn,
            mode,
            state: MqttState::Connecting,
            store,
            events: VecDeque::new(),
            tx_msg_queue: VecDeque::new(),
            rx_msg_queue: VecDeque::new(),
            pending: VecDeque::new(),
            disconnect_requested: false,
            control: None,
            topic_streams: BTreeMap::new(),
            framer: Framer::default(),
            next_msgid: 0,
            inflight: BTreeMap::new(),
            publishes_received: 0,
            log: Vec::new(),
            last_sent: now,
            zero_rtt_rejected: false,
            error: None,
            config,
        };
        agent.start_connect(now, connect);
        Ok(agent)
    }

    fn start_connect(&mut self, now: Timestamp, connect: MqttMessage) {
        self.events.push_back(AgentEvent::send(connect.encode()));
        self.process_events(now);
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn connection(&self) -> &Connection {
        &self.conn
    }

    pub fn connection_mut(&mut self) -> &mut Connection {
        &mut self.conn
    }

    pub fn cid(&self) -> ConnectionId {
        self.conn.cid()
    }

    pub fn mode(&self) -> HandshakeMode {
        self.mode
    }

    pub fn state(&self) -> MqttState {
        self.state
    }

    pub fn client_state(&self) -> Option<ClientState> {
        self.conn.client_state()
    }

    pub fn handshake_completed(&self) -> bool {
        self.conn.handshake_completed()
    }

    pub fn zero_rtt_rejected(&self) -> bool {
        self.zero_rtt_rejected
    }

    pub fn error(&self) -> Option<&AgentError> {
        self.error.as_ref()
    }

    pub fn is_closed(&self) -> bool {
        self.state == MqttState::Closed
    }

    /// Messages received so far, oldest first, when recording is on.
    pub fn log(&self) -> &[(Timestamp, MqttMessage)] {
        &self.log
    }

    /// Stream carrying PUBLISH messages for `topic`, once opened.
    pub fn stream_of(&self, topic: &str) -> Option<StreamId> {
        self.topic_streams.get(topic).copied()
    }

    pub fn poll_message(&mut self) -> Option<MqttMessage> {
        self.rx_msg_queue.pop_front()
    }

    fn alloc_msgid(&mut self) -> u16 {
        self.next_msgid = self.next_msgid.wrapping_add(1).max(1);
        self.next_msgid
    }

    pub fn publish(
        &mut self,
        topic: &str,
        payload: &[u8],
        qos: u8,
        retained: bool,
    ) -> Result<u16, AgentError> {
        let msgid = if qos > 0 { self.alloc_msgid() } else { 0 };
        let m = MqttMessage::publish(topic, payload, qos, retained, msgid);
        m.sanity().map_err(AgentError::Sanity)?;
        self.request(m);
        Ok(msgid)
    }

    pub fn subscribe(&mut self, filter: &str, qos: u8) -> Result<u16, AgentError> {
        let msgid = self.alloc_msgid();
        let m = MqttMessage::subscribe(filter, qos, msgid);
        m.sanity().map_err(AgentError::Sanity)?;
        self.request(m);
        Ok(msgid)
    }

    pub fn unsubscribe(&mut self, filter: &str) -> u16 {
        let msgid = self.alloc_msgid();
        self.request(MqttMessage::unsubscribe(filter, msgid));
        msgid
    }

    /// DISCONNECT once everything sent so far is acknowledged.
    pub fn disconnect(&mut self) {
        self.disconnect_requested = true;
    }

    fn request(&mut self, m: MqttMessage) {
        if self.state == MqttState::Connected {
            self.send_mqtt(&m);
        } else {
            self.pending.push_back(m);
        }
    }

    fn send_mqtt(&mut self, m: &MqttMessage) {
        if m.kind == Kind::Publish && m.qos == 1 {
            self.inflight.insert(m.msgid, m.clone());
        }
        let topic =
            (m.kind == Kind::Publish && self.config.stream_per_topic).then(|| m.topic.clone());
        self.events.push_back(AgentEvent {
            topic,
            ..AgentEvent::send(m.encode())
        });
    }

    fn stream_for(&mut self, topic: Option<&str>) -> Option<StreamId> {
        if self.control.is_none() {
            self.control = self.conn.open_stream().ok();
        }
        match topic {
            None => self.control,
            Some(t) => {
                if let Some(&id) = self.topic_streams.get(t) {
                    return Some(id);
                }
                let id = self.conn.open_stream().ok()?;
                self.topic_streams.insert(t.to_string(), id);
                Some(id)
            }
        }
    }

    /// Drains the agent event queue.
    fn process_events(&mut self, now: Timestamp) {
        while let Some(ev) = self.events.pop_front() {
            match ev.kind {
                EventKind::ProcessPacket => {
                    if self.conn.handshake_completed() {
                        self.do_handshake_once(now, ev);
                    } else {
                        self.do_handshake(now, ev);
                    }
                }
                EventKind::ClientDisconnect | EventKind::SocketTimeout => {
                    self.state = if self.conn.is_closed() {
                        MqttState::Closed
                    } else {
                        MqttState::Disconnecting
                    };
                }
            }
        }
    }

    /// Handshake still in progress: the connection object already runs
    /// the key exchange, so this only routes the payload.
    fn do_handshake(&mut self, now: Timestamp, ev: AgentEvent) {
        self.do_handshake_once(now, ev);
    }

    fn do_handshake_once(&mut self, now: Timestamp, ev: AgentEvent) {
        match ev.direction {
            Direction::Send => {
                self.tx_msg_queue.push_back((ev.topic, ev.payload));
                self.flush_tx(now);
            }
            Direction::Receive => {
                if let Some(src) = ev.src {
                    self.process_rx_packets(now, src, &ev.payload);
                }
            }
        }
    }

    fn flush_tx(&mut self, now: Timestamp) {
        while let Some((topic, bytes)) = self.tx_msg_queue.pop_front() {
            let Some(id) = self.stream_for(topic.as_deref()) else {
                self.tx_msg_queue.clear();
                return;
            };
            if self.conn.stream_write(id, &bytes, false).is_err() {
                self.tx_msg_queue.clear();
                return;
            }
            self.last_sent = now;
        }
    }

    fn process_rx_packets(&mut self, now: Timestamp, src: SocketAddr, datagram: &[u8]) {
        self.conn.handle_datagram(now, src, datagram);
        self.drain_connection(now);
    }

    fn drain_connection(&mut self, now: Timestamp) {
        while let Some(e) = self.conn.poll_event() {
            match e {
                Event::StreamReadable(id) => {
                    let Ok(data) = self.conn.stream_read(id) else {
                        continue;
                    };
                    match self.framer.push(id, &data) {
                        Ok(msgs) => {
                            for m in msgs {
                                self.quic_input_message(now, id, &m);
                            }
                        }
                        Err(e) => log::debug!("dropping bytes on stream {id}: {e}"),
                    }
                }
                Event::Resumption(state) => {
                    let unix = self.config.transport.wall.unix_secs(now);
                    let file = SessionFile::new(self.config.server, &state, unix);
                    if let Err(e) = self.store.save(&file) {
                        log::warn!("cannot save session file: {e}");
                    }
                }
                Event::ZeroRttRejected(_) => self.zero_rtt_rejected = true,
                Event::HandshakeFailed(e) => self.error = Some(AgentError::Handshake(e)),
                Event::Closing(reason) => {
                    let kind = match reason {
                        CloseReason::IdleTimeout => EventKind::SocketTimeout,
                        _ => EventKind::ClientDisconnect,
                    };
                    self.events.push_back(AgentEvent {
                        kind,
                        ..AgentEvent::default()
                    });
                }
                Event::Drained => self.state = MqttState::Closed,
                Event::HandshakeComplete | Event::StreamOpened(_) | Event::PeerMigrated { .. } => {}
            }
        }
        self.process_events(now);
    }

    /// One complete MQTT message from the server.
    fn quic_input_message(&mut self, now: Timestamp, stream: StreamId, bytes: &[u8]) {
        if !valid_mqtt_header(bytes) {
            return;
        }
        match mqtt_parse_args(bytes) {
            Ok(m) => self.quic_dispatcher(now, stream, m),
            Err(e) => log::debug!("bad message from server: {e}"),
        }
    }

    fn quic_dispatcher(&mut self, now: Timestamp, stream: StreamId, m: MqttMessage) {
        match m.kind {
            Kind::Connack if self.state == MqttState::Connecting => {
                if m.return_code == 0 {
                    self.state = MqttState::Connected;
                    while let Some(p) = self.pending.pop_front() {
                        self.send_mqtt(&p);
                    }
                    self.process_events(now);
                } else {
                    self.error = Some(AgentError::Refused(m.return_code));
                    self.conn.close(0, "connection refused");
                }
            }
            Kind::Publish => {
                self.publishes_received += 1;
                if m.qos == 1 {
                    let ack = MqttMessage::puback(m.msgid).encode();
                    let _ = self.conn.stream_write(stream, &ack, false);
                }
                if self
                    .config
                    .disconnect_after
                    .is_some_and(|n| self.publishes_received >= n)
                {
                    self.disconnect_requested = true;
                }
            }
            Kind::Puback => {
                self.inflight.remove(&m.msgid);
            }
            _ => {}
        }
        if self.config.record {
            self.log.push((now, m.clone()));
        }
        self.rx_msg_queue.push_back(m);
    }

    fn maybe_disconnect(&mut self, now: Timestamp) {
        if self.disconnect_requested
            && self.state == MqttState::Connected
            && self.pending.is_empty()
            && self.tx_msg_queue.is_empty()
            && !self.events.iter().any(|e| e.direction == Direction::Send)
            && self.conn.all_acked()
        {
            self.disconnect_requested = false;
            self.state = MqttState::Disconnecting;
            if let Some(id) = self.stream_for(None) {
                let _ = self
                    .conn
                    .stream_write(id, &MqttMessage::disconnect().encode(), false);
                self.last_sent = now;
            }
        }
    }

    fn keep_alive_deadline(&self) -> Option<Timestamp> {
        (self.config.keep_alive > 0 && self.state == MqttState::Connected)
            .then(|| self.last_sent + Duration::from_secs(self.config.keep_alive as u64))
    }
}

/// CONNECT carrying the client's identity, persistence option and
/// keep-alive.
pub fn mqtt_message_initializer(config: &ClientConfig) -> MqttMessage {
    MqttMessage {
        keep_alive: config.keep_alive,
        ..MqttMessage::connect(&config.client_id, config.persist)
    }
}

/// 0-RTT when a fresh session file exists, 1-RTT otherwise.
pub fn protocol_connect(
    config: &ClientConfig,
    store: &dyn ResumeStore,
    cid: ConnectionId,
    now: Timestamp,
    seed: u64,
) -> (Connection, HandshakeMode) {
    let unix = config.transport.wall.unix_secs(now);
    let validity = config.transport.handshake.stk_validity_secs;
    let file = store
        .load(config.server)
        .filter(|f| f.is_fresh(unix, validity));
    let resume = file.map(|f| f.resume_state());
    let conn = Connection::client(
        config.transport,
        cid,
        config.server,
        config.server_pk.clone(),
        resume.as_ref(),
        now,
        seed,
    );
    let mode = if resume.is_some() && conn.initial_keys().is_some() {
        HandshakeMode::ZeroRtt
    } else {
        HandshakeMode::OneRtt
    };
    (conn, mode)
}

impl Node for ClientAgent {
    fn handle_datagram(&mut self, now: Timestamp, src: SocketAddr, payload: &[u8]) {
        self.events
            .push_back(AgentEvent::receive(src, payload.to_vec()));
        self.process_events(now);
    }

    fn poll_transmit(&mut self, now: Timestamp) -> Option<Transmit> {
        self.maybe_disconnect(now);
        let t = self.conn.poll_transmit(now);
        self.drain_connection(now);
        t
    }

    fn poll_timeout(&self) -> Option<Timestamp> {
        [self.conn.poll_timeout(), self.keep_alive_deadline()]
            .into_iter()
            .flatten()
            .min()
    }

    fn handle_timeout(&mut self, now: Timestamp) {
        if self.keep_alive_deadline().is_some_and(|d| d <= now) {
            if let Some(id) = self.stream_for(None) {
                let _ =
                    self.conn
                        .stream_write(id, &MqttMessage::new(Kind::Pingreq).encode(), false);
            }
            self.last_sent = now;
        }
        if self.conn.poll_timeout().is_some_and(|d| d <= now) {
            self.conn.handle_timeout(now);
        }
        self.drain_connection(now);
    }

    fn on_address_change(&mut self, _now: Timestamp, _new: SocketAddr) {
        self.conn.on_local_address_change();
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
