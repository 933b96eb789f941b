//! Real-UDP driver for a [`Node`]: one event loop per endpoint, the OS
//! socket standing in for the simulated network.

use crate::netsim::Node;
use crate::Timestamp;
use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::time::{Duration, Instant};

const RECV_BUF: usize = 65_536;
/// Upper bound on a single blocking receive so the stop predicate is polled.
const MAX_WAIT: Duration = Duration::from_millis(50);

pub struct UdpDriver<N: Node> {
    socket: UdpSocket,
    node: N,
    epoch: Instant,
    sent: Vec<String>,
    record: bool,
}

impl<N: Node> UdpDriver<N> {
    pub fn bind(addr: SocketAddr, node: N) -> io::Result<Self> {
        let socket = UdpSocket::bind(addr)?;
        Ok(UdpDriver {
            socket,
            node,
            epoch: Instant::now(),
            sent: Vec::new(),
            record: false,
        })
    }

    /// Keep the label of every datagram sent, for `--trace`.
    pub fn record_labels(&mut self, on: bool) {
        self.record = on;
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }

    pub fn node(&self) -> &N {
        &self.node
    }

    pub fn node_mut(&mut self) -> &mut N {
        &mut self.node
    }

    pub fn sent_labels(&self) -> &[String] {
        &self.sent
    }

    /// Time since the driver was created, on the node's clock.
    pub fn now(&self) -> Timestamp {
        Timestamp::from_micros(self.epoch.elapsed().as_micros() as u64)
    }

    /// Sends everything the node has queued.
    pub fn flush(&mut self) -> io::Result<()> {
        let now = self.now();
        while let Some(t) = self.node.poll_transmit(now) {
            self.socket.send_to(&t.payload, t.dst)?;
            if self.record {
                self.sent.push(t.label);
            }
        }
        Ok(())
    }

    /// Runs the loop until `stop` holds or `budget` elapses. Returns whether
    /// `stop` was satisfied.
    pub fn run(
        &mut self,
        budget: Duration,
        mut stop: impl FnMut(&mut N) -> bool,
    ) -> io::Result<bool> {
        let deadline = Instant::now() + budget;
        let mut buf = vec![0u8; RECV_BUF];
        loop {
            self.flush()?;
            if stop(&mut self.node) {
                return Ok(true);
            }
            let wall = Instant::now();
            if wall >= deadline {
                return Ok(false);
            }
            let now = self.now();
            let mut wait = (deadline - wall).min(MAX_WAIT);
            if let Some(t) = self.node.poll_timeout() {
                if t <= now {
                    self.node.handle_timeout(now);
                    continue;
                }
                wait = wait.min(t - now);
            }
            self.socket
                .set_read_timeout(Some(wait.max(Duration::from_micros(100))))?;
            match self.socket.recv_from(&mut buf) {
                Ok((n, src)) => {
                    let now = self.now();
                    self.node.handle_datagram(now, src, &buf[..n]);
                }
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                    ) => {}
                // ICMP port unreachable surfaces as a reset on some platforms.
                Err(e) if e.kind() == io::ErrorKind::ConnectionReset => {}
                Err(e) => return Err(e),
            }
            let now = self.now();
            if self.node.poll_timeout().is_some_and(|t| t <= now) {
                self.node.handle_timeout(now);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::Transmit;
    use std::any::Any;

    /// Sends one datagram to `peer` and counts what it receives.
    struct Echo {
        peer: Option<SocketAddr>,
        got: usize,
    }

    impl Node for Echo {
        fn handle_datagram(&mut self, _now: Timestamp, _src: SocketAddr, _payload: &[u8]) {
            self.got += 1;
        }
        fn poll_transmit(&mut self, _now: Timestamp) -> Option<Transmit> {
            self.peer.take().map(|dst| Transmit {
                dst,
                payload: b"hi".to_vec(),
                label: "ping".into(),
            })
        }
        fn poll_timeout(&self) -> Option<Timestamp> {
            None
        }
        fn handle_timeout(&mut self, _now: Timestamp) {}
        fn as_any(&self) -> &dyn Any {
            self
        }
        fn as_any_mut(&mut self) -> &mut dyn Any {
            self
        }
    }

    #[test]
    fn loopback_delivery() {
        let any: SocketAddr = "127.0.0.1:0".parse().unwrap();
        let mut rx = UdpDriver::bind(any, Echo { peer: None, got: 0 }).unwrap();
        let mut tx = UdpDriver::bind(
            any,
            Echo {
                peer: Some(rx.local_addr().unwrap()),
                got: 0,
            },
        )
        .unwrap();
        tx.record_labels(true);
        tx.flush().unwrap();
        assert_eq!(tx.sent_labels(), ["ping"]);
        assert!(rx.run(Duration::from_secs(2), |n| n.got == 1).unwrap());
    }
}
