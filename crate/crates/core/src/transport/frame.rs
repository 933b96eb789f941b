//! Frames carried inside a sealed packet body, each prefixed by a kind byte.

use super::wire::{Reader, WireError};

pub const MAX_NACK_RANGES: usize = 256;

/// Ranges actually placed in an outgoing ACK. Older gaps are folded into the
/// oldest reported one so the frame leaves room for stream data.
pub const SENT_NACK_RANGES: usize = 32;

const KIND_PADDING: u8 = 0x00;
const KIND_STREAM: u8 = 0x01;
const KIND_ACK: u8 = 0x02;
const KIND_WINDOW_UPDATE: u8 = 0x03;
const KIND_RST_STREAM: u8 = 0x04;
const KIND_PING: u8 = 0x05;
const KIND_CLOSE: u8 = 0x06;

/// Acknowledgement: everything in `1..=largest` outside the NACK ranges has
/// been received.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AckFrame {
    pub largest: u64,
    pub delay_us: u64,
    /// Inclusive `(first, last)` missing ranges, newest first.
    pub nacks: Vec<(u64, u64)>,
}

impl AckFrame {
    pub fn acks(&self, sqn: u64) -> bool {
        sqn >= 1
            && sqn <= self.largest
            && !self.nacks.iter().any(|&(lo, hi)| lo <= sqn && sqn <= hi)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    /// A run of zero bytes.
    Padding(usize),
    Stream {
        id: u32,
        offset: u64,
        fin: bool,
        data: Vec<u8>,
    },
    Ack(AckFrame),
    /// `stream_id == 0` addresses the connection-level window.
    WindowUpdate {
        stream_id: u32,
        offset: u64,
    },
    RstStream {
        stream_id: u32,
        final_offset: u64,
        error_code: u32,
    },
    Ping,
    Close {
        error_code: u32,
        reason: String,
    },
}

impl Frame {
    /// Whether receiving this frame obliges the peer to acknowledge.
    pub fn is_ack_eliciting(&self) -> bool {
        !matches!(
            self,
            Frame::Padding(_) | Frame::Ack(_) | Frame::Close { .. }
        )
    }

    pub fn encoded_len(&self) -> usize {
        match self {
            Frame::Padding(n) => *n,
            Frame::Stream { data, .. } => 1 + 4 + 8 + 1 + 2 + data.len(),
            Frame::Ack(a) => 1 + 8 + 8 + 2 + 16 * a.nacks.len(),
            Frame::WindowUpdate { .. } => 1 + 4 + 8,
            Frame::RstStream { .. } => 1 + 4 + 8 + 4,
            Frame::Ping => 1,
            Frame::Close { reason, .. } => 1 + 4 + 2 + reason.len(),
        }
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        match self {
            Frame::Padding(n) => out.resize(out.len() + n, KIND_PADDING),
            Frame::Stream {
                id,
                offset,
                fin,
                data,
            } => {
                assert!(data.len() <= u16::MAX as usize, "stream frame too long");
                out.push(KIND_STREAM);
                out.extend_from_slice(&id.to_be_bytes());
                out.extend_from_slice(&offset.to_be_bytes());
                out.push(*fin as u8);
                out.extend_from_slice(&(data.len() as u16).to_be_bytes());
                out.extend_from_slice(data);
            }
            Frame::Ack(a) => {
                assert!(a.nacks.len() <= MAX_NACK_RANGES, "too many nack ranges");
                out.push(KIND_ACK);
                out.extend_from_slice(&a.largest.to_be_bytes());
                out.extend_from_slice(&a.delay_us.to_be_bytes());
                out.extend_from_slice(&(a.nacks.len() as u16).to_be_bytes());
                for (lo, hi) in &a.nacks {
                    out.extend_from_slice(&lo.to_be_bytes());
                    out.extend_from_slice(&hi.to_be_bytes());
                }
            }
            Frame::WindowUpdate { stream_id, offset } => {
                out.push(KIND_WINDOW_UPDATE);
                out.extend_from_slice(&stream_id.to_be_bytes());
                out.extend_from_slice(&offset.to_be_bytes());
            }
            Frame::RstStream {
                stream_id,
                final_offset,
                error_code,
            } => {
                out.push(KIND_RST_STREAM);
                out.extend_from_slice(&stream_id.to_be_bytes());
                out.extend_from_slice(&final_offset.to_be_bytes());
                out.extend_from_slice(&error_code.to_be_bytes());
            }
            Frame::Ping => out.push(KIND_PING),
            Frame::Close { error_code, reason } => {
                out.push(KIND_CLOSE);
                out.extend_from_slice(&error_code.to_be_bytes());
                out.extend_from_slice(&(reason.len() as u16).to_be_bytes());
                out.extend_from_slice(reason.as_bytes());
            }
        }
    }
}

pub fn encode_frames(frames: &[Frame]) -> Vec<u8> {
    let mut out = Vec::with_capacity(frames.iter().map(Frame::encoded_len).sum());
    for f in frames {
        f.encode(&mut out);
    }
    out
}

pub fn decode_frames(buf: &[u8]) -> Result<Vec<Frame>, WireError> {
    let mut r = Reader::new(buf);
    let mut out = Vec::new();
    while let Some(kind) = r.peek() {
        r.pos += 1;
        let f = match kind {
            KIND_PADDING => {
                let mut n = 1;
                while r.peek() == Some(KIND_PADDING) {
                    r.pos += 1;
                    n += 1;
                }
                Frame::Padding(n)
            }
            KIND_STREAM => {
                let id = r.u32()?;
                let offset = r.u64()?;
                let fin = match r.u8()? {
                    0 => false,
                    1 => true,
                    _ => return Err(WireError::Malformed("fin byte")),
                };
                let len = r.u16()? as usize;
                let data = r.bytes(len)?.to_vec();
                offset
                    .checked_add(len as u64)
                    .ok_or(WireError::Malformed("stream offset overflow"))?;
                Frame::Stream {
                    id,
                    offset,
                    fin,
                    data,
                }
            }
            KIND_ACK => {
                let largest = r.u64()?;
                let delay_us = r.u64()?;
                let count = r.u16()? as usize;
                if count > MAX_NACK_RANGES {
                    return Err(WireError::TooManyNackRanges(count));
                }
                let mut nacks = Vec::with_capacity(count);
                for _ in 0..count {
                    let lo = r.u64()?;
                    let hi = r.u64()?;
                    if lo > hi || hi >= largest {
                        return Err(WireError::Malformed("nack range"));
                    }
                    nacks.push((lo, hi));
                }
                Frame::Ack(AckFrame {
                    largest,
                    delay_us,
                    nacks,
                })
            }
            KIND_WINDOW_UPDATE => Frame::WindowUpdate {
                stream_id: r.u32()?,
                offset: r.u64()?,
            },
            KIND_RST_STREAM => Frame::RstStream {
                stream_id: r.u32()?,
                final_offset: r.u64()?,
                error_code: r.u32()?,
            },
            KIND_PING => Frame::Ping,
            KIND_CLOSE => {
                let error_code = r.u32()?;
                let len = r.u16()? as usize;
                let reason = String::from_utf8(r.bytes(len)?.to_vec())
                    .map_err(|_| WireError::Malformed("close reason"))?;
                Frame::Close { error_code, reason }
            }
            _ => return Err(WireError::Malformed("frame kind")),
        };
        out.push(f);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_frame_layout() {
        let f = Frame::Stream {
            id: 3,
            offset: 10,
            fin: true,
            data: b"hi".to_vec(),
        };
        let b = encode_frames(std::slice::from_ref(&f));
        assert_eq!(
            b,
            [1, 0, 0, 0, 3, 0, 0, 0, 0, 0, 0, 0, 10, 1, 0, 2, b'h', b'i']
        );
        assert_eq!(decode_frames(&b).unwrap(), vec![f]);
    }

    #[test]
    fn ack_limit_enforced() {
        let mut b = vec![KIND_ACK];
        b.extend_from_slice(&10_000u64.to_be_bytes());
        b.extend_from_slice(&0u64.to_be_bytes());
        b.extend_from_slice(&257u16.to_be_bytes());
        for i in 0..257u64 {
            b.extend_from_slice(&(i * 2 + 1).to_be_bytes());
            b.extend_from_slice(&(i * 2 + 1).to_be_bytes());
        }
        assert_eq!(decode_frames(&b), Err(WireError::TooManyNackRanges(257)));
    }

    #[test]
    fn capped_ack_leaves_room_for_data() {
        let nacks = (0..SENT_NACK_RANGES as u64)
            .map(|i| (i * 2 + 1, i * 2 + 1))
            .collect();
        let ack = Frame::Ack(AckFrame {
            largest: 1000,
            delay_us: 0,
            nacks,
        });
        assert!(ack.encoded_len() + 64 < super::super::wire::MAX_DATAGRAM / 2);
    }

    #[test]
    fn ack_semantics() {
        let a = AckFrame {
            largest: 9,
            delay_us: 0,
            nacks: vec![(5, 5), (2, 3)],
        };
        let acked: Vec<u64> = (0..12).filter(|&s| a.acks(s)).collect();
        assert_eq!(acked, vec![1, 4, 6, 7, 8, 9]);
    }

    #[test]
    fn padding_run_collapses() {
        let frames = vec![Frame::Ping, Frame::Padding(5)];
        let b = encode_frames(&frames);
        assert_eq!(b.len(), 6);
        assert_eq!(decode_frames(&b).unwrap(), frames);
    }

    #[test]
    fn unknown_kind_and_truncation() {
        assert!(decode_frames(&[0x42]).is_err());
        assert_eq!(
            decode_frames(&[KIND_STREAM, 0, 0]),
            Err(WireError::Truncated)
        );
    }
}
