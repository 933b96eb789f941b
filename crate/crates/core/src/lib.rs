//! MQTT over a QUIC-style secure transport.
//!
//! The crate is organised bottom-up:
//!
//! * [`crypto`]: signature scheme, AEAD, Diffie-Hellman and key expansion.
//! * [`transport`]: wire format, handshake, streams, loss recovery and
//!   connection migration, written sans-IO.
//! * [`mqtt`]: MQTT 3.1.1 codec and broker logic.
//! * [`agents`]: client and server agents bridging MQTT and the transport.
//! * [`netsim`]: deterministic discrete-event network simulator and the TCP
//!   baseline models.
//! * [`bench`]: the four benchmark scenarios and their parallel runner.

pub mod agents;
pub mod bench;
pub mod crypto;
pub mod mqtt;
pub mod netsim;
pub mod time;
pub mod transport;
pub mod udp;

pub use time::Timestamp;

/// Which end of a connection a party plays.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub enum Role {
    Client,
    Server,
}

impl Role {
    pub fn peer(self) -> Role {
        match self {
            Role::Client => Role::Server,
            Role::Server => Role::Client,
        }
    }
}

/// Direction of a protection operation relative to the local party.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Send,
    Receive,
}
