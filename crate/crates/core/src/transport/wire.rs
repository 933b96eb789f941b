//! Clear packet header and packet framing.
//!
//! `flags(1) || cid(8) || [version(4)] || [div_nonce(32)] || sqn(8)` followed
//! by the AEAD body. Flag bit 0 marks a version field, bit 1 a
//! diversification nonce, bits 2-3 carry the key epoch.

use super::ConnectionId;
use crate::crypto::TAG_LEN;
use thiserror::Error;

pub const VERSION: [u8; 4] = *b"Q001";
/// Serialized size every CHLO and REJ datagram is padded to.
pub const HANDSHAKE_SIZE: usize = 1350;
/// Largest datagram an endpoint emits.
pub const MAX_DATAGRAM: usize = 1350;

const FLAG_VERSION: u8 = 0x01;
const FLAG_DIV_NONCE: u8 = 0x02;
const EPOCH_SHIFT: u8 = 2;
const EPOCH_MASK: u8 = 0x0c;
const RESERVED_MASK: u8 = 0xf0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated input")]
    Truncated,
    #[error("malformed: {0}")]
    Malformed(&'static str),
    #[error("ack frame with {0} nack ranges")]
    TooManyNackRanges(usize),
}

/// Which key set protects a packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Epoch {
    /// CHLO and REJ, protected for integrity with keys derived from the cid.
    Handshake = 0,
    /// Sealed under the initial key set `ik`.
    Initial = 1,
    /// Sealed under the forward-secure key set `k`.
    Final = 2,
}

impl Epoch {
    fn from_bits(b: u8) -> Result<Self, WireError> {
        match b {
            0 => Ok(Epoch::Handshake),
            1 => Ok(Epoch::Initial),
            2 => Ok(Epoch::Final),
            _ => Err(WireError::Malformed("epoch")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub epoch: Epoch,
    pub cid: ConnectionId,
    pub version: Option<[u8; 4]>,
    pub div_nonce: Option<[u8; 32]>,
    pub sqn: u64,
}

impl Header {
    pub fn new(epoch: Epoch, cid: ConnectionId, sqn: u64) -> Self {
        Header {
            epoch,
            cid,
            version: None,
            div_nonce: None,
            sqn,
        }
    }

    pub fn flags(&self) -> u8 {
        let mut f = (self.epoch as u8) << EPOCH_SHIFT;
        if self.version.is_some() {
            f |= FLAG_VERSION;
        }
        if self.div_nonce.is_some() {
            f |= FLAG_DIV_NONCE;
        }
        f
    }

    pub fn encoded_len(&self) -> usize {
        1 + 8 + 8 + self.version.map_or(0, |_| 4) + self.div_nonce.map_or(0, |_| 32)
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.flags());
        out.extend_from_slice(&self.cid.0.to_be_bytes());
        if let Some(v) = &self.version {
            out.extend_from_slice(v);
        }
        if let Some(d) = &self.div_nonce {
            out.extend_from_slice(d);
        }
        out.extend_from_slice(&self.sqn.to_be_bytes());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(self.encoded_len());
        self.encode(&mut v);
        v
    }

    /// Parses a header, returning it and the number of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Header, usize), WireError> {
        let mut r = Reader::new(buf);
        let flags = r.u8()?;
        if flags & RESERVED_MASK != 0 {
            return Err(WireError::Malformed("reserved flag bits"));
        }
        let epoch = Epoch::from_bits((flags & EPOCH_MASK) >> EPOCH_SHIFT)?;
        let cid = ConnectionId(r.u64()?);
        let version = if flags & FLAG_VERSION != 0 {
            Some(r.array::<4>()?)
        } else {
            None
        };
        let div_nonce = if flags & FLAG_DIV_NONCE != 0 {
            Some(r.array::<32>()?)
        } else {
            None
        };
        let sqn = r.u64()?;
        Ok((
            Header {
                epoch,
                cid,
                version,
                div_nonce,
                sqn,
            },
            r.pos,
        ))
    }
}

/// A header plus its sealed body (ciphertext and tag).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub header: Header,
    pub body: Vec<u8>,
}

impl Packet {
    pub fn encode(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(self.header.encoded_len() + self.body.len());
        self.header.encode(&mut v);
        v.extend_from_slice(&self.body);
        v
    }

    pub fn decode(buf: &[u8]) -> Result<Packet, WireError> {
        let (header, n) = Header::decode(buf)?;
        if buf.len() - n < TAG_LEN {
            return Err(WireError::Truncated);
        }
        Ok(Packet {
            header,
            body: buf[n..].to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.header.encoded_len() + self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Big-endian cursor shared by the codecs.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn peek(&self) -> Option<u8> {
        self.buf.get(self.pos).copied()
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        Ok(self.bytes(N)?.try_into().unwrap())
    }

    pub(crate) fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.array::<1>()?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut h = Header::new(Epoch::Initial, ConnectionId(0x0102030405060708), 7);
        h.version = Some(VERSION);
        let b = h.to_bytes();
        assert_eq!(b[0], 0x01 | (1 << 2));
        assert_eq!(&b[1..9], &[1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(&b[9..13], b"Q001");
        assert_eq!(&b[13..], &7u64.to_be_bytes());
        assert_eq!(Header::decode(&b).unwrap(), (h, 21));
    }

    #[test]
    fn div_nonce_flag() {
        let mut h = Header::new(Epoch::Final, ConnectionId(1), 2);
        h.div_nonce = Some([0xaa; 32]);
        let b = h.to_bytes();
        assert_eq!(b.len(), 1 + 8 + 32 + 8);
        assert_eq!(Header::decode(&b).unwrap().0, h);
    }

    #[test]
    fn rejects_bad_flags_and_truncation() {
        assert_eq!(
            Header::decode(&[0x0c; 17]),
            Err(WireError::Malformed("epoch"))
        );
        assert_eq!(
            Header::decode(&[0x10; 17]),
            Err(WireError::Malformed("reserved flag bits"))
        );
        assert_eq!(Header::decode(&[0x00; 10]), Err(WireError::Truncated));
        let h = Header::new(Epoch::Handshake, ConnectionId(5), 1);
        let mut b = h.to_bytes();
        b.extend_from_slice(&[0; 15]);
        assert_eq!(Packet::decode(&b), Err(WireError::Truncated));
    }
}
