//! RTT estimation, loss detection and probe timeouts.
//!
//! Packets are declared lost once three later packets have been acked or
//! once they are older than 9/8 of the RTT relative to an acked packet. The
//! probe timeout is `max(2 * srtt, floor)` doubled per consecutive expiry.

use super::frame::AckFrame;
use super::stream::{Chunk, StreamId};
use super::wire::Epoch;
use crate::Timestamp;
use std::collections::BTreeMap;
use std::time::Duration;

/// Retransmittable content of a sent packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SentFrame {
    Stream {
        id: StreamId,
        chunk: Chunk,
    },
    Crypto {
        data: Vec<u8>,
    },
    WindowUpdate {
        stream_id: StreamId,
    },
    RstStream {
        stream_id: StreamId,
        final_offset: u64,
        error_code: u32,
    },
    Ping,
}

#[derive(Debug, Clone)]
pub struct SentPacket {
    pub sqn: u64,
    pub epoch: Epoch,
    pub time_sent: Timestamp,
    pub ack_eliciting: bool,
    pub frames: Vec<SentFrame>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryConfig {
    pub initial_rtt: Duration,
    pub min_pto: Duration,
    pub packet_threshold: u64,
    /// Numerator and denominator of the time threshold.
    pub time_threshold: (u32, u32),
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            initial_rtt: Duration::from_millis(100),
            min_pto: Duration::from_millis(200),
            packet_threshold: 3,
            time_threshold: (9, 8),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RttEstimator {
    pub srtt: Duration,
    pub rttvar: Duration,
    pub latest: Duration,
    has_sample: bool,
}

impl RttEstimator {
    pub fn new(initial: Duration) -> Self {
        RttEstimator {
            srtt: initial,
            rttvar: initial / 2,
            latest: initial,
            has_sample: false,
        }
    }

    pub fn update(&mut self, sample: Duration) {
        self.latest = sample;
        if !self.has_sample {
            self.srtt = sample;
            self.rttvar = sample / 2;
            self.has_sample = true;
        } else {
            let diff = self.srtt.abs_diff(sample);
            self.rttvar = (self.rttvar * 3 + diff) / 4;
            self.srtt = (self.srtt * 7 + sample) / 8;
        }
    }
}

/// Packets acknowledged and declared lost by one ACK or timer event.
#[derive(Debug, Default)]
pub struct AckOutcome {
    pub acked: Vec<SentPacket>,
    pub lost: Vec<SentPacket>,
}

#[derive(Debug, Clone)]
pub struct Recovery {
    pub config: RecoveryConfig,
    pub rtt: RttEstimator,
    sent: BTreeMap<u64, SentPacket>,
    largest_acked: Option<u64>,
    pto_count: u32,
    last_ack_eliciting: Option<Timestamp>,
    loss_time: Option<Timestamp>,
}

impl Recovery {
    pub fn new(config: RecoveryConfig) -> Self {
        Recovery {
            config,
            rtt: RttEstimator::new(config.initial_rtt),
            sent: BTreeMap::new(),
            largest_acked: None,
            pto_count: 0,
            last_ack_eliciting: None,
            loss_time: None,
        }
    }

    pub fn on_packet_sent(&mut self, p: SentPacket) {
        if p.ack_eliciting {
            self.last_ack_eliciting = Some(p.time_sent);
            self.sent.insert(p.sqn, p);
        }
    }

    pub fn ack_eliciting_in_flight(&self) -> usize {
        self.sent.len()
    }

    pub fn largest_acked(&self) -> Option<u64> {
        self.largest_acked
    }

    pub fn pto_count(&self) -> u32 {
        self.pto_count
    }

    /// Base probe timeout without backoff.
    pub fn pto_base(&self) -> Duration {
        (self.rtt.srtt * 2).max(self.config.min_pto)
    }

    pub fn pto(&self) -> Duration {
        self.pto_base() * 2u32.saturating_pow(self.pto_count.min(16))
    }

    fn loss_delay(&self) -> Duration {
        let (n, d) = self.config.time_threshold;
        self.rtt.srtt.max(self.rtt.latest) * n / d
    }

    pub fn on_ack(&mut self, ack: &AckFrame, now: Timestamp) -> AckOutcome {
        let mut out = AckOutcome::default();
        let acked: Vec<u64> = self
            .sent
            .range(..=ack.largest)
            .map(|(&s, _)| s)
            .filter(|&s| ack.acks(s))
            .collect();
        for s in acked {
            out.acked.push(self.sent.remove(&s).unwrap());
        }
        if let Some(newest) = out.acked.iter().max_by_key(|p| p.sqn) {
            if newest.sqn == ack.largest {
                let raw = now - newest.time_sent;
                let delay = Duration::from_micros(ack.delay_us);
                self.rtt.update(if raw > delay { raw - delay } else { raw });
            }
            self.pto_count = 0;
        }
        self.largest_acked = Some(
            self.largest_acked
                .map_or(ack.largest, |l| l.max(ack.largest)),
        );
        out.lost = self.detect_lost(now);
        out
    }

    /// Removes packets that meet either loss threshold and arms the loss
    /// timer for the earliest one that does not yet.
    pub fn detect_lost(&mut self, now: Timestamp) -> Vec<SentPacket> {
        self.loss_time = None;
        let Some(largest) = self.largest_acked else {
            return Vec::new();
        };
        let delay = self.loss_delay();
        let mut lost = Vec::new();
        let candidates: Vec<u64> = self.sent.range(..largest).map(|(&s, _)| s).collect();
        for s in candidates {
            let p = &self.sent[&s];
            if largest >= s + self.config.packet_threshold || p.time_sent + delay <= now {
                lost.push(self.sent.remove(&s).unwrap());
            } else {
                let t = p.time_sent + delay;
                self.loss_time = Some(self.loss_time.map_or(t, |l| l.min(t)));
            }
        }
        lost
    }

    pub fn loss_time(&self) -> Option<Timestamp> {
        self.loss_time
    }

    pub fn pto_deadline(&self) -> Option<Timestamp> {
        if self.sent.is_empty() {
            return None;
        }
        self.last_ack_eliciting.map(|t| t + self.pto())
    }

    /// Probe timeout: everything in flight is treated as lost and the
    /// timeout backs off.
    pub fn on_pto(&mut self) -> Vec<SentPacket> {
        self.pto_count += 1;
        self.loss_time = None;
        std::mem::take(&mut self.sent).into_values().collect()
    }

    /// Declares every in-flight packet lost without backing off; used when
    /// the path changes.
    pub fn take_all_in_flight(&mut self) -> Vec<SentPacket> {
        self.loss_time = None;
        std::mem::take(&mut self.sent).into_values().collect()
    }

    pub fn clear(&mut self) {
        self.sent.clear();
        self.loss_time = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pkt(sqn: u64, t: u64) -> SentPacket {
        SentPacket {
            sqn,
            epoch: Epoch::Final,
            time_sent: Timestamp::from_millis(t),
            ack_eliciting: true,
            frames: vec![SentFrame::Ping],
        }
    }

    #[test]
    fn packet_threshold_loss() {
        let mut r = Recovery::new(RecoveryConfig::default());
        for s in 1..=5 {
            r.on_packet_sent(pkt(s, 0));
        }
        let ack = AckFrame {
            largest: 5,
            delay_us: 0,
            nacks: vec![(2, 2)],
        };
        let out = r.on_ack(&ack, Timestamp::from_millis(1));
        assert_eq!(
            out.acked.iter().map(|p| p.sqn).collect::<Vec<_>>(),
            vec![1, 3, 4, 5]
        );
        assert_eq!(out.lost.iter().map(|p| p.sqn).collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn time_threshold_arms_timer() {
        let mut r = Recovery::new(RecoveryConfig::default());
        r.on_packet_sent(pkt(1, 0));
        r.on_packet_sent(pkt(2, 1));
        let out = r.on_ack(
            &AckFrame {
                largest: 2,
                delay_us: 0,
                nacks: vec![(1, 1)],
            },
            Timestamp::from_millis(100),
        );
        assert!(out.lost.is_empty());
        let t = r.loss_time().unwrap();
        assert!(t > Timestamp::from_millis(100));
        assert_eq!(r.detect_lost(t).len(), 1);
    }

    #[test]
    fn pto_backs_off_and_resets() {
        let mut r = Recovery::new(RecoveryConfig::default());
        assert_eq!(r.pto(), Duration::from_millis(200));
        r.on_packet_sent(pkt(1, 0));
        assert_eq!(r.on_pto().len(), 1);
        assert_eq!(r.pto(), Duration::from_millis(400));
        r.on_packet_sent(pkt(2, 500));
        r.on_ack(
            &AckFrame {
                largest: 2,
                delay_us: 0,
                nacks: vec![],
            },
            Timestamp::from_millis(501),
        );
        assert_eq!(r.pto_count(), 0);
        assert_eq!(r.pto(), Duration::from_millis(200));
    }

    #[test]
    fn retransmission_has_fresh_sqn_and_is_distinguishable() {
        let mut r = Recovery::new(RecoveryConfig::default());
        for s in 5..=8 {
            r.on_packet_sent(pkt(s, 0));
        }
        let out = r.on_ack(
            &AckFrame {
                largest: 8,
                delay_us: 0,
                nacks: vec![(5, 5)],
            },
            Timestamp::from_millis(1),
        );
        assert_eq!(out.lost[0].sqn, 5);
        r.on_packet_sent(pkt(9, 2));
        let out = r.on_ack(
            &AckFrame {
                largest: 9,
                delay_us: 0,
                nacks: vec![(5, 5)],
            },
            Timestamp::from_millis(3),
        );
        assert_eq!(out.acked.iter().map(|p| p.sqn).collect::<Vec<_>>(), vec![9]);
    }
}
