//! Event trace of a simulation run.

use crate::Timestamp;
use std::fmt::Write;
use std::net::SocketAddr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceKind {
    Send,
    Deliver,
    Drop,
}

impl TraceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::Send => "send",
            TraceKind::Deliver => "deliver",
            TraceKind::Drop => "drop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub time: Timestamp,
    pub kind: TraceKind,
    /// Source address, which identifies the flow.
    pub flow: SocketAddr,
    pub dst: SocketAddr,
    pub src_node: usize,
    pub dst_node: Option<usize>,
    pub size: usize,
    pub label: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn push(&mut self, e: TraceEvent) {
        self.events.push(e);
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Datagrams sent by `node` plus datagrams delivered to it, counting
    /// events from index `since` on.
    pub fn packets_at(&self, node: usize, since: usize) -> usize {
        self.events[since.min(self.events.len())..]
            .iter()
            .filter(|e| match e.kind {
                TraceKind::Send => e.src_node == node,
                TraceKind::Deliver => e.dst_node == Some(node),
                TraceKind::Drop => false,
            })
            .count()
    }

    /// Label of the first datagram `node` sent after index `since`.
    pub fn first_sent_label(&self, node: usize, since: usize) -> Option<&str> {
        self.events[since.min(self.events.len())..]
            .iter()
            .find(|e| e.kind == TraceKind::Send && e.src_node == node)
            .map(|e| e.label.as_str())
    }

    /// `time_us,event,flow,size,annotation`, one event per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_us,event,flow,size,annotation\n");
        for e in &self.events {
            let _ = writeln!(
                out,
                "{},{},{},{},to={};{}",
                e.time.as_micros(),
                e.kind.as_str(),
                e.flow,
                e.size,
                e.dst,
                e.label
            );
        }
        out
    }
}
