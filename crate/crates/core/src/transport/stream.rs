//! Application streams: send buffering with retransmission, receive
//! reassembly, and the per-connection stream registry.

use super::flow::{RecvWindow, SendCredit};
use super::ranges::IntervalSet;
use super::TransportError;
use crate::Role;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

pub type StreamId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamState {
    Open,
    /// We sent FIN (or reset); the peer may still send.
    HalfClosedLocal,
    /// The peer's data is complete; we may still send.
    HalfClosedRemote,
    Closed,
}

/// A chunk of stream data ready to go on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub offset: u64,
    pub data: Vec<u8>,
    pub fin: bool,
}

#[derive(Debug, Clone)]
pub struct Stream {
    pub id: StreamId,
    // send side
    unsent: VecDeque<u8>,
    next_offset: u64,
    fin_queued: bool,
    fin_sent: bool,
    retransmit: BTreeMap<u64, Chunk>,
    acked: IntervalSet,
    fin_acked: bool,
    reset: bool,
    pub credit: SendCredit,
    // receive side
    pending: BTreeMap<u64, Vec<u8>>,
    delivered: u64,
    readable: VecDeque<u8>,
    fin_offset: Option<u64>,
    highest_received: u64,
    pub window: RecvWindow,
    peer_reset: bool,
}

impl Stream {
    pub fn new(id: StreamId, send_limit: u64, recv_window: u64) -> Self {
        Stream {
            id,
            unsent: VecDeque::new(),
            next_offset: 0,
            fin_queued: false,
            fin_sent: false,
            retransmit: BTreeMap::new(),
            acked: IntervalSet::new(),
            fin_acked: false,
            reset: false,
            credit: SendCredit::new(send_limit),
            pending: BTreeMap::new(),
            delivered: 0,
            readable: VecDeque::new(),
            fin_offset: None,
            highest_received: 0,
            window: RecvWindow::new(recv_window),
            peer_reset: false,
        }
    }

    pub fn state(&self) -> StreamState {
        let local_done = self.reset || (self.fin_queued && self.unsent.is_empty());
        let remote_done = self.peer_reset
            || self
                .fin_offset
                .is_some_and(|f| self.delivered == f && self.readable.is_empty());
        match (local_done, remote_done) {
            (false, false) => StreamState::Open,
            (true, false) => StreamState::HalfClosedLocal,
            (false, true) => StreamState::HalfClosedRemote,
            (true, true) => StreamState::Closed,
        }
    }

    /// Closed and nothing left for the transport to do.
    pub fn is_finished(&self) -> bool {
        self.state() == StreamState::Closed && (self.reset || self.fin_acked)
    }

    pub fn write(&mut self, data: &[u8], fin: bool) -> Result<(), TransportError> {
        if self.fin_queued || self.reset {
            return Err(TransportError::StreamClosed(self.id));
        }
        self.unsent.extend(data);
        self.fin_queued = fin;
        Ok(())
    }

    /// Abandons the send side, returning the final offset to announce.
    pub fn reset(&mut self) -> u64 {
        self.reset = true;
        self.unsent.clear();
        self.retransmit.clear();
        self.next_offset
    }

    pub fn has_pending_send(&self) -> bool {
        !self.retransmit.is_empty() || (!self.reset && self.has_new_data())
    }

    fn has_new_data(&self) -> bool {
        !self.unsent.is_empty() || (self.fin_queued && !self.fin_sent)
    }

    /// Bytes written but not yet acknowledged.
    pub fn all_acked(&self) -> bool {
        self.unsent.is_empty()
            && self.retransmit.is_empty()
            && self.acked.covers(0, self.next_offset)
            && (!self.fin_sent || self.fin_acked)
    }

    /// Next chunk to send: retransmissions first, then new data bounded by
    /// `max_len` and by `conn_credit` (new bytes only). Returns the chunk and
    /// how many new bytes it consumed.
    pub fn next_chunk(&mut self, max_len: usize, conn_credit: u64) -> Option<(Chunk, u64)> {
        if let Some((&off, _)) = self.retransmit.iter().next() {
            let mut c = self.retransmit.remove(&off).unwrap();
            if c.data.len() > max_len {
                let rest = c.data.split_off(max_len);
                self.retransmit.insert(
                    off + max_len as u64,
                    Chunk {
                        offset: off + max_len as u64,
                        data: rest,
                        fin: c.fin,
                    },
                );
                c.fin = false;
            }
            return Some((c, 0));
        }
        if self.reset || !self.has_new_data() {
            return None;
        }
        let allowed = (max_len as u64)
            .min(self.credit.available())
            .min(conn_credit) as usize;
        let n = allowed.min(self.unsent.len());
        if n == 0 && !self.unsent.is_empty() {
            return None;
        }
        let data: Vec<u8> = self.unsent.drain(..n).collect();
        let fin = self.fin_queued && self.unsent.is_empty();
        let chunk = Chunk {
            offset: self.next_offset,
            data,
            fin,
        };
        self.next_offset += n as u64;
        self.credit.used += n as u64;
        if fin {
            self.fin_sent = true;
        }
        Some((chunk, n as u64))
    }

    /// Whether new data is held back only by stream-level credit.
    pub fn is_blocked(&self) -> bool {
        !self.unsent.is_empty() && self.credit.available() == 0
    }

    pub fn on_chunk_acked(&mut self, c: &Chunk) {
        self.acked.insert(c.offset, c.offset + c.data.len() as u64);
        if c.fin {
            self.fin_acked = true;
        }
    }

    pub fn on_chunk_lost(&mut self, c: Chunk) {
        if self.reset {
            return;
        }
        let end = c.offset + c.data.len() as u64;
        if self.acked.covers(c.offset, end) && (!c.fin || self.fin_acked) {
            return;
        }
        self.retransmit.insert(c.offset, c);
    }

    /// Accepts incoming data, delivering any newly contiguous bytes. Returns
    /// the number of bytes made readable.
    pub fn on_data(
        &mut self,
        offset: u64,
        data: &[u8],
        fin: bool,
    ) -> Result<usize, TransportError> {
        let end = offset + data.len() as u64;
        if let Some(f) = self.fin_offset {
            if end > f || (fin && end != f) {
                return Err(TransportError::FinalOffsetChanged(self.id));
            }
        }
        if fin {
            if end < self.highest_received {
                return Err(TransportError::FinalOffsetChanged(self.id));
            }
            self.fin_offset = Some(end);
        }
        if !self.window.permits(end) {
            return Err(TransportError::FlowControl);
        }
        self.highest_received = self.highest_received.max(end);
        if self.peer_reset || end <= self.delivered {
            return Ok(0);
        }
        let skip = self.delivered.saturating_sub(offset) as usize;
        let start = offset.max(self.delivered);
        let entry = self.pending.entry(start).or_default();
        if entry.len() < data.len() - skip {
            *entry = data[skip..].to_vec();
        }
        let before = self.readable.len();
        while let Some((&off, _)) = self.pending.iter().next() {
            if off > self.delivered {
                break;
            }
            let buf = self.pending.remove(&off).unwrap();
            let skip = (self.delivered - off) as usize;
            if skip < buf.len() {
                self.readable.extend(&buf[skip..]);
                self.delivered += (buf.len() - skip) as u64;
            }
        }
        Ok(self.readable.len() - before)
    }

    pub fn on_reset(&mut self, final_offset: u64) -> Result<(), TransportError> {
        if let Some(f) = self.fin_offset {
            if f != final_offset {
                return Err(TransportError::FinalOffsetChanged(self.id));
            }
        }
        if final_offset < self.highest_received {
            return Err(TransportError::FinalOffsetChanged(self.id));
        }
        self.fin_offset = Some(final_offset);
        self.peer_reset = true;
        self.pending.clear();
        Ok(())
    }

    pub fn readable_len(&self) -> usize {
        self.readable.len()
    }

    /// Drains readable bytes, returning them and an optional stream-level
    /// window advertisement.
    pub fn read(&mut self) -> (Vec<u8>, Option<u64>) {
        let data: Vec<u8> = self.readable.drain(..).collect();
        let update = if data.is_empty() {
            None
        } else {
            self.window.consume(data.len() as u64)
        };
        // No point advertising more credit once the peer has finished.
        let update = update.filter(|_| self.fin_offset.is_none());
        (data, update)
    }

    pub fn highest_received(&self) -> u64 {
        self.highest_received
    }

    pub fn is_fin_received(&self) -> bool {
        self.fin_offset.is_some()
    }
}

/// Stream registry for one connection.
#[derive(Debug, Clone)]
pub struct StreamMap {
    role: Role,
    streams: BTreeMap<StreamId, Stream>,
    retired: BTreeSet<StreamId>,
    next_local: StreamId,
    send_limit: u64,
    recv_window: u64,
}

impl StreamMap {
    pub fn new(role: Role, send_limit: u64, recv_window: u64) -> Self {
        let first = match role {
            Role::Client => 1,
            Role::Server => 2,
        };
        StreamMap {
            role,
            streams: BTreeMap::new(),
            retired: BTreeSet::new(),
            next_local: first,
            send_limit,
            recv_window,
        }
    }

    pub fn is_local(&self, id: StreamId) -> bool {
        (id % 2 == 1) == (self.role == Role::Client)
    }

    /// Opens the next locally initiated stream.
    pub fn open(&mut self) -> StreamId {
        let id = self.next_local;
        self.next_local += 2;
        self.streams
            .insert(id, Stream::new(id, self.send_limit, self.recv_window));
        id
    }

    /// Looks a stream up. A closed stream's entry is cleared and reported
    /// as closed.
    pub fn find(&mut self, id: StreamId) -> Result<&mut Stream, TransportError> {
        if self
            .streams
            .get(&id)
            .is_some_and(|s| s.state() == StreamState::Closed)
        {
            self.clear_entry(id);
            return Err(TransportError::StreamClosed(id));
        }
        if self.retired.contains(&id) {
            return Err(TransportError::StreamClosed(id));
        }
        self.streams
            .get_mut(&id)
            .ok_or(TransportError::UnknownStream(id))
    }

    pub fn get(&self, id: StreamId) -> Option<&Stream> {
        self.streams.get(&id)
    }

    pub fn get_mut(&mut self, id: StreamId) -> Option<&mut Stream> {
        self.streams.get_mut(&id)
    }

    /// Stream for an incoming frame, creating peer-initiated streams on
    /// first sight. `None` means the frame belongs to a retired stream.
    pub fn for_incoming(&mut self, id: StreamId) -> Result<Option<&mut Stream>, TransportError> {
        if id == 0 {
            return Err(TransportError::UnknownStream(0));
        }
        if self.retired.contains(&id) {
            return Ok(None);
        }
        if !self.streams.contains_key(&id) {
            if self.is_local(id) {
                return if id < self.next_local {
                    Ok(None)
                } else {
                    Err(TransportError::UnknownStream(id))
                };
            }
            self.streams
                .insert(id, Stream::new(id, self.send_limit, self.recv_window));
        }
        Ok(self.streams.get_mut(&id))
    }

    pub fn clear_entry(&mut self, id: StreamId) {
        if self.streams.remove(&id).is_some() {
            self.retired.insert(id);
        }
    }

    pub fn ids(&self) -> Vec<StreamId> {
        self.streams.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Stream> {
        self.streams.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Stream> {
        self.streams.values_mut()
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    pub fn clear(&mut self) {
        self.streams.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_ids_are_odd() {
        let mut m = StreamMap::new(Role::Client, 100, 100);
        assert_eq!(m.open(), 1);
        assert_eq!(m.open(), 3);
        let mut s = StreamMap::new(Role::Server, 100, 100);
        assert_eq!(s.open(), 2);
        assert!(s.is_local(4) && !s.is_local(3));
    }

    #[test]
    fn write_after_fin_fails() {
        let mut s = Stream::new(1, 100, 100);
        s.write(b"a", true).unwrap();
        assert_eq!(s.write(b"b", false), Err(TransportError::StreamClosed(1)));
    }

    #[test]
    fn reassembly_delivers_once_in_order() {
        let mut s = Stream::new(2, 100, 100);
        assert_eq!(s.on_data(3, b"def", false).unwrap(), 0);
        assert_eq!(s.on_data(0, b"abc", false).unwrap(), 6);
        assert_eq!(s.on_data(1, b"bcde", false).unwrap(), 0);
        assert_eq!(s.on_data(4, b"efgh", true).unwrap(), 2);
        assert_eq!(s.read().0, b"abcdefgh");
        assert_eq!(
            s.on_data(8, b"x", false),
            Err(TransportError::FinalOffsetChanged(2))
        );
    }

    #[test]
    fn chunks_respect_credit_and_requeue() {
        let mut s = Stream::new(1, 4, 100);
        s.write(b"abcdef", true).unwrap();
        let (c, n) = s.next_chunk(100, 100).unwrap();
        assert_eq!((c.data.as_slice(), n, c.fin), (&b"abcd"[..], 4, false));
        assert!(s.is_blocked());
        assert!(s.next_chunk(100, 100).is_none());
        s.on_chunk_lost(c.clone());
        let (r, n) = s.next_chunk(100, 100).unwrap();
        assert_eq!((r, n), (c.clone(), 0));
        s.on_chunk_acked(&c);
        s.credit.update(10);
        let (c2, _) = s.next_chunk(100, 100).unwrap();
        assert!(c2.fin);
        assert!(!s.all_acked());
        s.on_chunk_acked(&c2);
        assert!(s.all_acked());
    }

    #[test]
    fn closed_stream_is_cleared_on_find() {
        let mut m = StreamMap::new(Role::Client, 100, 100);
        let id = m.open();
        let s = m.find(id).unwrap();
        s.write(b"x", true).unwrap();
        let (c, _) = s.next_chunk(10, 10).unwrap();
        s.on_chunk_acked(&c);
        s.on_data(0, b"y", true).unwrap();
        s.read();
        assert_eq!(m.find(id).unwrap_err(), TransportError::StreamClosed(id));
        assert_eq!(m.find(id).unwrap_err(), TransportError::StreamClosed(id));
        assert!(m.get(id).is_none());
    }
}
