//! Transport tunables.

use super::handshake::HandshakeConfig;
use super::recovery::RecoveryConfig;
use crate::time::WallClock;
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportConfig {
    pub idle_timeout: Duration,
    /// Draining lasts this many probe timeouts.
    pub drain_ptos: u32,
    pub recovery: RecoveryConfig,
    /// Fixed congestion window, in ack-eliciting packets.
    pub cwnd_packets: usize,
    pub stream_window: u64,
    pub conn_window: u64,
    /// Packets of new application data a side may send under the initial
    /// key before key settlement.
    pub initial_data_packets: usize,
    pub max_undecryptable: usize,
    pub handshake: HandshakeConfig,
    pub wall: WallClock,
    /// Keep a log of every sealed `(epoch, sqn)` for inspection.
    pub record_sent: bool,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            idle_timeout: Duration::from_secs(30),
            drain_ptos: 3,
            recovery: RecoveryConfig::default(),
            cwnd_packets: 32,
            stream_window: 64 * 1024,
            conn_window: 256 * 1024,
            initial_data_packets: 1,
            max_undecryptable: 16,
            handshake: HandshakeConfig::default(),
            wall: WallClock::default(),
            record_sent: false,
        }
    }
}
