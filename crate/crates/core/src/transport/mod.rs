//! QUIC-style transport: packets, handshake, streams, recovery and
//! migration. Everything here is sans-IO; callers feed datagrams and time in
//! and poll datagrams and timer deadlines out.

pub mod config;
pub mod connection;
pub mod endpoint;
pub mod flow;
pub mod frame;
pub mod handshake;
pub mod protect;
pub mod ranges;
pub mod recovery;
pub mod stream;
pub mod wire;

pub use config::TransportConfig;
pub use connection::{
    ClientState, CloseReason, ConnStats, Connection, Event, Phase, ResumeState, Transmit,
};
pub use endpoint::{EndpointEvent, EndpointStats, ServerEndpoint};
pub use stream::StreamId;

use std::fmt;
use thiserror::Error;

/// 64-bit connection identifier, random per connection and stable across
/// address changes.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub struct ConnectionId(pub u64);

impl ConnectionId {
    pub fn random(rng: &mut impl rand::RngCore) -> Self {
        ConnectionId(rng.next_u64())
    }
}

impl fmt::Display for ConnectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("stream {0} is closed")]
    StreamClosed(StreamId),
    #[error("unknown stream {0}")]
    UnknownStream(StreamId),
    #[error("final offset of stream {0} changed")]
    FinalOffsetChanged(StreamId),
    #[error("flow control limit exceeded")]
    FlowControl,
    #[error("connection is closing")]
    Closing,
    #[error(transparent)]
    Wire(#[from] wire::WireError),
    #[error("protocol violation: {0}")]
    Protocol(&'static str),
}
