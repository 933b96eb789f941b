//! Server agent: the broker behind a transport endpoint.

use super::framing::Framer;
use super::{AgentEvent, EventKind};
use crate::crypto::SignatureKeyPair;
use crate::mqtt::{
    mqtt_parse_args, valid_mqtt_header, Broker, Delivery, Kind, MqttMessage, SessionStore,
};
use crate::netsim::Node;
use crate::transport::{
    CloseReason, ConnectionId, EndpointEvent, Event, ServerEndpoint, StreamId, Transmit,
    TransportConfig,
};
use crate::{Direction, Timestamp};
use std::any::Any;
use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddr;
use std::time::Duration;

/// Per-connection MQTT plumbing.
#[derive(Debug, Default)]
struct ConnCtx {
    framer: Framer,
    /// Stream on which the last request arrived; replies go there.
    reply_stream: Option<StreamId>,
    topic_streams: BTreeMap<String, StreamId>,
    keep_alive: Option<Duration>,
    last_heard: Option<Timestamp>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct ServerStats {
    pub messages_in: u64,
    pub messages_out: u64,
    pub invalid_headers: u64,
    pub disconnects: u64,
    pub timeouts: u64,
    pub keep_alive_expiries: u64,
}

pub struct ServerAgent {
    endpoint: ServerEndpoint,
    broker: Broker,
    ctx: BTreeMap<ConnectionId, ConnCtx>,
    events: VecDeque<AgentEvent>,
    stats: ServerStats,
}

impl ServerAgent {
    pub fn new(
        signing: SignatureKeyPair,
        transport: TransportConfig,
        store: Box<dyn SessionStore>,
        now: Timestamp,
        seed: u64,
    ) -> Self {
        ServerAgent {
            endpoint: ServerEndpoint::new(signing, transport, now, seed),
            broker: Broker::new(store),
            ctx: BTreeMap::new(),
            events: VecDeque::new(),
            stats: ServerStats::default(),
        }
    }

    pub fn public_key(&self) -> Vec<u8> {
        self.endpoint.public_key()
    }

    pub fn endpoint(&mut self) -> &mut ServerEndpoint {
        &mut self.endpoint
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }

    /// Connections for which the transport holds any state.
    pub fn connection_count(&self) -> usize {
        self.endpoint.connection_count()
    }

    /// Closes every connection, e.g. on broker shutdown.
    pub fn shutdown(&mut self) {
        for cid in self.endpoint.connection_ids() {
            if let Some(c) = self.endpoint.connection(cid) {
                c.close(0, "shutdown");
            }
        }
    }

    fn process_events(&mut self, now: Timestamp) {
        while let Some(ev) = self.events.pop_front() {
            match (ev.kind, ev.direction) {
                (EventKind::ProcessPacket, Direction::Receive) => {
                    if let Some(src) = ev.src {
                        self.process_rx_packets(now, src, &ev.payload);
                    }
                }
                (EventKind::ProcessPacket, Direction::Send) => {}
                (EventKind::ClientDisconnect | EventKind::SocketTimeout, _) => {
                    if let Some(cid) = ev.conn {
                        self.broker.connection_lost(cid.0);
                    }
                }
            }
        }
    }

    fn process_rx_packets(&mut self, now: Timestamp, src: SocketAddr, datagram: &[u8]) {
        self.endpoint.handle_datagram(now, src, datagram);
        self.service(now);
    }

    /// Drains transport events from every connection and reaps the closed
    /// ones.
    fn service(&mut self, now: Timestamp) {
        while let Some(e) = self.endpoint.poll_event() {
            match e {
                EndpointEvent::NewConnection(cid) => {
                    self.ctx.insert(
                        cid,
                        ConnCtx {
                            last_heard: Some(now),
                            ..ConnCtx::default()
                        },
                    );
                }
                EndpointEvent::ConnectionClosed(cid) => {
                    self.ctx.remove(&cid);
                }
                EndpointEvent::Rejected { .. } => {}
            }
        }
        for cid in self.endpoint.connection_ids() {
            while let Some(e) = self.endpoint.connection(cid).and_then(|c| c.poll_event()) {
                match e {
                    Event::StreamReadable(id) => {
                        let Some(Ok(data)) =
                            self.endpoint.connection(cid).map(|c| c.stream_read(id))
                        else {
                            continue;
                        };
                        let ctx = self.ctx.entry(cid).or_default();
                        ctx.last_heard = Some(now);
                        match ctx.framer.push(id, &data) {
                            Ok(msgs) => {
                                for m in msgs {
                                    self.quic_input_message(now, cid, id, &m);
                                }
                            }
                            Err(_) => self.stats.invalid_headers += 1,
                        }
                    }
                    Event::Closing(reason) => {
                        let kind = if reason == CloseReason::IdleTimeout {
                            self.stats.timeouts += 1;
                            EventKind::SocketTimeout
                        } else {
                            self.stats.disconnects += 1;
                            EventKind::ClientDisconnect
                        };
                        self.events.push_back(AgentEvent {
                            kind,
                            conn: Some(cid),
                            ..AgentEvent::default()
                        });
                    }
                    _ => {}
                }
            }
        }
        self.endpoint.reap();
        while let Some(e) = self.endpoint.poll_event() {
            if let EndpointEvent::ConnectionClosed(cid) = e {
                self.ctx.remove(&cid);
            }
        }
        self.process_events(now);
    }

    /// One complete MQTT message from a client.
    fn quic_input_message(
        &mut self,
        now: Timestamp,
        cid: ConnectionId,
        stream: StreamId,
        bytes: &[u8],
    ) {
        if !valid_mqtt_header(bytes) {
            self.stats.invalid_headers += 1;
            return;
        }
        match mqtt_parse_args(bytes) {
            Ok(m) => self.quic_dispatcher(now, cid, stream, m),
            Err(e) => {
                self.stats.invalid_headers += 1;
                log::debug!("bad message on {cid}: {e}");
            }
        }
    }

    fn quic_dispatcher(
        &mut self,
        _now: Timestamp,
        cid: ConnectionId,
        stream: StreamId,
        m: MqttMessage,
    ) {
        self.stats.messages_in += 1;
        let ctx = self.ctx.entry(cid).or_default();
        ctx.reply_stream = Some(stream);
        if m.kind == Kind::Connect && m.keep_alive > 0 {
            ctx.keep_alive = Some(Duration::from_secs(m.keep_alive as u64));
        }
        let kind = m.kind;
        match self.broker.handle(cid.0, m) {
            Ok(out) => {
                for d in out {
                    self.write(d);
                }
                if kind == Kind::Disconnect {
                    if let Some(c) = self.endpoint.connection(cid) {
                        c.close(0, "disconnect");
                    }
                }
            }
            Err(e) => {
                log::debug!("closing {cid}: {e}");
                self.broker.connection_lost(cid.0);
                if let Some(c) = self.endpoint.connection(cid) {
                    c.close(1, &e.to_string());
                }
            }
        }
    }

    fn write(&mut self, d: Delivery) {
        let cid = ConnectionId(d.to);
        let Some(conn) = self.endpoint.connection(cid) else {
            return;
        };
        let ctx = self.ctx.entry(cid).or_default();
        let stream = if d.msg.kind == Kind::Publish {
            match ctx.topic_streams.get(&d.msg.topic) {
                Some(&s) => Some(s),
                None => conn.open_stream().ok().inspect(|&s| {
                    ctx.topic_streams.insert(d.msg.topic.clone(), s);
                }),
            }
        } else {
            ctx.reply_stream
        };
        if let Some(s) = stream {
            if conn.stream_write(s, &d.msg.encode(), false).is_ok() {
                self.stats.messages_out += 1;
            }
        }
    }

    fn keep_alive_deadline(&self) -> Option<Timestamp> {
        self.ctx
            .values()
            .filter_map(|c| Some(c.last_heard? + c.keep_alive?.mul_f64(1.5)))
            .min()
    }

    fn expire_keep_alive(&mut self, now: Timestamp) {
        let expired: Vec<ConnectionId> = self
            .ctx
            .iter()
            .filter(|(_, c)| {
                c.keep_alive
                    .zip(c.last_heard)
                    .is_some_and(|(k, t)| t + k.mul_f64(1.5) <= now)
            })
            .map(|(cid, _)| *cid)
            .collect();
        for cid in expired {
            self.stats.keep_alive_expiries += 1;
            self.ctx.get_mut(&cid).unwrap().keep_alive = None;
            self.broker.connection_lost(cid.0);
            if let Some(c) = self.endpoint.connection(cid) {
                c.close(2, "keep-alive expired");
            }
        }
    }
}

impl Node for ServerAgent {
    fn handle_datagram(&mut self, now: Timestamp, src: SocketAddr, payload: &[u8]) {
        self.events
            .push_back(AgentEvent::receive(src, payload.to_vec()));
        self.process_events(now);
    }

    fn poll_transmit(&mut self, now: Timestamp) -> Option<Transmit> {
        let t = self.endpoint.poll_transmit(now);
        self.service(now);
        t
    }

    fn poll_timeout(&self) -> Option<Timestamp> {
        [self.endpoint.poll_timeout(), self.keep_alive_deadline()]
            .into_iter()
            .flatten()
            .min()
    }

    fn handle_timeout(&mut self, now: Timestamp) {
        self.expire_keep_alive(now);
        self.endpoint.handle_timeout(now);
        self.service(now);
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
