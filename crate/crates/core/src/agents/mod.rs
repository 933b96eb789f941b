//! Agents bridging MQTT and the transport: a client agent per MQTT client
//! and a server agent hosting the broker. Both are [`Node`](crate::netsim::Node)s,
//! so the same code runs in the simulator and over real UDP.

pub mod client;
pub mod framing;
pub mod server;
pub mod session;

pub use client::{
    mqtt_message_initializer, protocol_connect, ClientAgent, ClientConfig, HandshakeMode, MqttState,
};
pub use server::{ServerAgent, ServerStats};
pub use session::{FileResumeStore, MemoryResumeStore, ResumeStore, SessionFile, STATE_DIR_ENV};

use crate::mqtt::CodecError;
use crate::transport::handshake::HandshakeError;
use crate::transport::ConnectionId;
use crate::Direction;
use std::net::SocketAddr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AgentError {
    #[error("message failed sanity check: {0}")]
    Sanity(CodecError),
    #[error("handshake failed: {0}")]
    Handshake(HandshakeError),
    #[error("broker refused the connection (code {0})")]
    Refused(u8),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum EventKind {
    #[default]
    ProcessPacket,
    ClientDisconnect,
    SocketTimeout,
}

/// Unit of work for an agent loop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentEvent {
    pub kind: EventKind,
    pub direction: Direction,
    pub payload: Vec<u8>,
    pub src: Option<SocketAddr>,
    pub conn: Option<ConnectionId>,
    pub topic: Option<String>,
}

impl Default for AgentEvent {
    fn default() -> Self {
        AgentEvent {
            kind: EventKind::ProcessPacket,
            direction: Direction::Receive,
            payload: Vec::new(),
            src: None,
            conn: None,
            topic: None,
        }
    }
}

impl AgentEvent {
    pub fn send(payload: Vec<u8>) -> Self {
        AgentEvent {
            direction: Direction::Send,
            payload,
            ..AgentEvent::default()
        }
    }

    pub fn receive(src: SocketAddr, payload: Vec<u8>) -> Self {
        AgentEvent {
            direction: Direction::Receive,
            payload,
            src: Some(src),
            ..AgentEvent::default()
        }
    }
}
