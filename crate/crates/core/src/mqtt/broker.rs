//! Broker logic: sessions, topic routing, retained messages and QoS 1
//! bookkeeping. Transport-agnostic; connections are opaque keys.

use super::codec::{CodecError, Kind, MqttMessage, PROTOCOL_LEVEL};
use super::persist::{MemoryStore, SessionStore};
use super::topic::{valid_filter, valid_topic, TopicTable};
use std::collections::BTreeMap;
use thiserror::Error;

pub type ConnKey = u64;

/// CONNACK return code for an unsupported protocol level.
pub const CONNACK_BAD_VERSION: u8 = 1;
pub const SUBACK_FAILURE: u8 = 0x80;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BrokerError {
    #[error("message before CONNECT")]
    NotConnected,
    #[error("second CONNECT on one connection")]
    DuplicateConnect,
    #[error("invalid topic name {0:?}")]
    InvalidTopic(String),
    #[error("unexpected {0:?} from a client")]
    Unexpected(Kind),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub to: ConnKey,
    pub msg: MqttMessage,
}

#[derive(Debug)]
struct Session {
    client_id: String,
    persist: bool,
    next_msgid: u16,
    inflight: BTreeMap<u16, MqttMessage>,
}

impl Session {
    fn alloc_msgid(&mut self) -> u16 {
        loop {
            self.next_msgid = self.next_msgid.wrapping_add(1).max(1);
            if !self.inflight.contains_key(&self.next_msgid) {
                return self.next_msgid;
            }
        }
    }
}

pub struct Broker {
    store: Box<dyn SessionStore>,
    sessions: BTreeMap<ConnKey, Session>,
    table: TopicTable<ConnKey>,
    retained: BTreeMap<String, MqttMessage>,
    /// Unacknowledged qos 1 deliveries of persistent clients that went away.
    parked: BTreeMap<String, Vec<MqttMessage>>,
}

impl Default for Broker {
    fn default() -> Self {
        Broker::new(Box::new(MemoryStore::default()))
    }
}

impl Broker {
    pub fn new(store: Box<dyn SessionStore>) -> Self {
        Broker {
            store,
            sessions: BTreeMap::new(),
            table: TopicTable::new(),
            retained: BTreeMap::new(),
            parked: BTreeMap::new(),
        }
    }

    pub fn connection_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn retained_count(&self) -> usize {
        self.retained.len()
    }

    pub fn client_id(&self, who: ConnKey) -> Option<&str> {
        self.sessions.get(&who).map(|s| s.client_id.as_str())
    }

    pub fn subscriptions(&self, who: ConnKey) -> Vec<String> {
        self.table.filters_of(who).into_iter().collect()
    }

    /// Processes one message from `from`. An error means the connection
    /// should be closed; the caller then reports it via
    /// [`connection_lost`](Self::connection_lost).
    pub fn handle(
        &mut self,
        from: ConnKey,
        msg: MqttMessage,
    ) -> Result<Vec<Delivery>, BrokerError> {
        if msg.kind == Kind::Connect {
            return self.connect(from, msg);
        }
        if !self.sessions.contains_key(&from) {
            return Err(BrokerError::NotConnected);
        }
        let mut out = Vec::new();
        match msg.kind {
            Kind::Subscribe => {
                if !valid_filter(&msg.topic) {
                    out.push(Delivery {
                        to: from,
                        msg: MqttMessage::suback(msg.msgid, SUBACK_FAILURE),
                    });
                    return Ok(out);
                }
                let granted = msg.qos.min(1);
                self.table.subscribe(&msg.topic, from, granted);
                self.save(from);
                out.push(Delivery {
                    to: from,
                    msg: MqttMessage::suback(msg.msgid, granted),
                });
                let retained: Vec<MqttMessage> = self
                    .retained
                    .values()
                    .filter(|m| super::topic::matches(&msg.topic, &m.topic))
                    .cloned()
                    .collect();
                for m in retained {
                    out.push(self.deliver(from, &m, granted, true));
                }
            }
            Kind::Unsubscribe => {
                self.table.unsubscribe(&msg.topic, from);
                self.save(from);
                out.push(Delivery {
                    to: from,
                    msg: MqttMessage::unsuback(msg.msgid),
                });
            }
            Kind::Publish => {
                if !valid_topic(&msg.topic) {
                    return Err(BrokerError::InvalidTopic(msg.topic));
                }
                if msg.qos == 1 {
                    out.push(Delivery {
                        to: from,
                        msg: MqttMessage::puback(msg.msgid),
                    });
                }
                if msg.retained {
                    if msg.payload.is_empty() {
                        self.retained.remove(&msg.topic);
                    } else {
                        self.retained.insert(msg.topic.clone(), msg.clone());
                    }
                }
                for (to, qos) in self.table.route(&msg.topic) {
                    out.push(self.deliver(to, &msg, qos, false));
                }
            }
            Kind::Puback => {
                self.sessions
                    .get_mut(&from)
                    .unwrap()
                    .inflight
                    .remove(&msg.msgid);
            }
            Kind::Pingreq => out.push(Delivery {
                to: from,
                msg: MqttMessage::new(Kind::Pingresp),
            }),
            Kind::Disconnect => self.connection_lost(from),
            k => return Err(BrokerError::Unexpected(k)),
        }
        Ok(out)
    }

    fn deliver(&mut self, to: ConnKey, m: &MqttMessage, sub_qos: u8, retained: bool) -> Delivery {
        let s = self
            .sessions
            .get_mut(&to)
            .expect("subscriber has a session");
        let qos = m.qos.min(sub_qos);
        let msgid = if qos == 1 { s.alloc_msgid() } else { 0 };
        let out = MqttMessage::publish(&m.topic, &m.payload, qos, retained, msgid);
        if qos == 1 {
            s.inflight.insert(msgid, out.clone());
        }
        Delivery { to, msg: out }
    }

    fn connect(&mut self, from: ConnKey, msg: MqttMessage) -> Result<Vec<Delivery>, BrokerError> {
        if self.sessions.contains_key(&from) {
            return Err(BrokerError::DuplicateConnect);
        }
        if msg.version != PROTOCOL_LEVEL {
            return Ok(vec![Delivery {
                to: from,
                msg: MqttMessage::connack(false, CONNACK_BAD_VERSION),
            }]);
        }
        msg.sanity()?;
        // A client id in use elsewhere takes over that session.
        let previous: Vec<ConnKey> = self
            .sessions
            .iter()
            .filter(|(_, s)| !msg.client_id.is_empty() && s.client_id == msg.client_id)
            .map(|(k, _)| *k)
            .collect();
        for k in previous {
            self.connection_lost(k);
        }
        let restored = if msg.persist {
            self.store.load(&msg.client_id)
        } else {
            let _ = self.store.remove(&msg.client_id);
            self.parked.remove(&msg.client_id);
            None
        };
        let mut session = Session {
            client_id: msg.client_id.clone(),
            persist: msg.persist,
            next_msgid: 0,
            inflight: BTreeMap::new(),
        };
        let mut out = vec![Delivery {
            to: from,
            msg: MqttMessage::connack(restored.is_some(), 0),
        }];
        for (filter, qos) in restored.iter().flatten() {
            self.table.subscribe(filter, from, *qos);
        }
        for mut m in self.parked.remove(&msg.client_id).unwrap_or_default() {
            m.dup = true;
            session.next_msgid = session.next_msgid.max(m.msgid);
            session.inflight.insert(m.msgid, m.clone());
            out.push(Delivery { to: from, msg: m });
        }
        self.sessions.insert(from, session);
        if msg.persist {
            self.save(from);
        }
        Ok(out)
    }

    fn save(&mut self, who: ConnKey) {
        let s = &self.sessions[&who];
        if s.persist {
            let subs = self.table.filters_of(who);
            let map: BTreeMap<String, u8> = subs
                .into_iter()
                .map(|f| (f.clone(), self.table.route_qos(&f, who)))
                .collect();
            let id = s.client_id.clone();
            if let Err(e) = self.store.save(&id, &map) {
                log::warn!("saving session for {id}: {e}");
            }
        }
    }

    /// Frees all state of a connection. Persistent sessions keep their
    /// subscriptions in the store and their unacknowledged deliveries in
    /// memory.
    pub fn connection_lost(&mut self, who: ConnKey) {
        if let Some(s) = self.sessions.remove(&who) {
            if s.persist && !s.inflight.is_empty() {
                self.parked
                    .insert(s.client_id, s.inflight.into_values().collect());
            }
        }
        self.table.remove_all(who);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn connect(b: &mut Broker, who: ConnKey, id: &str, persist: bool) -> Vec<Delivery> {
        b.handle(who, MqttMessage::connect(id, persist)).unwrap()
    }

    #[test]
    fn publish_reaches_subscribers_only() {
        let mut b = Broker::default();
        connect(&mut b, 1, "s", false);
        connect(&mut b, 2, "p", false);
        connect(&mut b, 3, "other", false);
        b.handle(1, MqttMessage::subscribe("t", 0, 1)).unwrap();
        let out = b
            .handle(2, MqttMessage::publish("t", b"m", 0, false, 0))
            .unwrap();
        assert_eq!(
            out,
            vec![Delivery {
                to: 1,
                msg: MqttMessage::publish("t", b"m", 0, false, 0)
            }]
        );
    }

    #[test]
    fn retained_message_on_later_subscribe() {
        let mut b = Broker::default();
        connect(&mut b, 1, "p", false);
        b.handle(1, MqttMessage::publish("t", b"m", 0, true, 0))
            .unwrap();
        connect(&mut b, 2, "s", false);
        let out = b.handle(2, MqttMessage::subscribe("t", 0, 5)).unwrap();
        assert_eq!(out[0].msg, MqttMessage::suback(5, 0));
        assert_eq!(out[1].msg, MqttMessage::publish("t", b"m", 0, true, 0));
        b.handle(1, MqttMessage::publish("t", b"", 0, true, 0))
            .unwrap();
        assert_eq!(b.retained_count(), 0);
    }

    #[test]
    fn persistent_session_restores_subscriptions() {
        let mut b = Broker::default();
        connect(&mut b, 1, "s", true);
        b.handle(1, MqttMessage::subscribe("a/+", 1, 1)).unwrap();
        b.handle(1, MqttMessage::subscribe("b", 0, 2)).unwrap();
        let before = b.subscriptions(1);
        b.connection_lost(1);
        assert_eq!(b.connection_count(), 0);
        let out = connect(&mut b, 7, "s", true);
        assert_eq!(out[0].msg, MqttMessage::connack(true, 0));
        assert_eq!(b.subscriptions(7), before);
        connect(&mut b, 8, "p", false);
        let out = b
            .handle(8, MqttMessage::publish("a/x", b"v", 1, false, 3))
            .unwrap();
        assert_eq!(out[0].msg, MqttMessage::puback(3));
        assert_eq!(out[1].to, 7);
        assert_eq!(out[1].msg.qos, 1);
    }

    #[test]
    fn clean_session_forgets() {
        let mut b = Broker::default();
        connect(&mut b, 1, "s", true);
        b.handle(1, MqttMessage::subscribe("a", 0, 1)).unwrap();
        b.connection_lost(1);
        let out = connect(&mut b, 2, "s", false);
        assert_eq!(out[0].msg, MqttMessage::connack(false, 0));
        assert!(b.subscriptions(2).is_empty());
    }

    #[test]
    fn unacked_qos1_redelivered_with_dup() {
        let mut b = Broker::default();
        connect(&mut b, 1, "s", true);
        b.handle(1, MqttMessage::subscribe("t", 1, 1)).unwrap();
        connect(&mut b, 2, "p", false);
        let out = b
            .handle(2, MqttMessage::publish("t", b"x", 1, false, 9))
            .unwrap();
        let first = out[1].msg.clone();
        assert!(!first.dup);
        b.connection_lost(1);
        let out = connect(&mut b, 3, "s", true);
        assert_eq!(out[1].msg, MqttMessage { dup: true, ..first });
    }

    #[test]
    fn protocol_errors() {
        let mut b = Broker::default();
        assert_eq!(
            b.handle(1, MqttMessage::disconnect()),
            Err(BrokerError::NotConnected)
        );
        connect(&mut b, 1, "c", false);
        assert_eq!(
            b.handle(1, MqttMessage::connect("c", false)),
            Err(BrokerError::DuplicateConnect)
        );
        assert!(matches!(
            b.handle(1, MqttMessage::publish("a/+", b"", 0, false, 0)),
            Err(BrokerError::InvalidTopic(_))
        ));
        let mut old = MqttMessage::connect("d", false);
        old.version = 3;
        assert_eq!(
            b.handle(2, old).unwrap()[0].msg.return_code,
            CONNACK_BAD_VERSION
        );
    }
}
