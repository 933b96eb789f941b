//! Deterministic discrete-event network simulator plus the TCP/TLS
//! baseline models used for comparison.

pub mod network;
pub mod tcp;
pub mod trace;

pub use network::{DropRule, NetStats, Network, Node, NodeId, Profile, SimConfig, SimError};
pub use trace::{Trace, TraceEvent, TraceKind};
