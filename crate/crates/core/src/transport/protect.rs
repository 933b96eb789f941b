//! Packet protection: sealing frame payloads into packets and opening them.
//!
//! Every plaintext starts with a marker byte: `0x01` for application data,
//! `0x00` for key-exchange content.

use super::wire::{Header, Packet};
use super::ConnectionId;
use crate::crypto::{
    aead_open, aead_seal, extract_expand, get_iv, split_keys, KeySet, KEY_SET_LEN,
};
use crate::{Direction, Role};
use std::collections::BTreeMap;
use thiserror::Error;

pub const MARKER_KEX: u8 = 0x00;
pub const MARKER_DATA: u8 = 0x01;

/// Salt for the handshake-epoch keys. These keys are public (derived from
/// the cid alone) and only protect CHLO/REJ against corruption.
const HANDSHAKE_SALT: &[u8] = b"quicmqtt handshake integrity";

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ProtectError {
    #[error("sequence number {0} already used under this key")]
    IvReuse(u64),
    #[error("authentication failed")]
    Open,
    #[error("payload marker does not match")]
    Marker,
}

pub fn handshake_keys(cid: ConnectionId) -> KeySet {
    let m = extract_expand(
        &cid.0.to_be_bytes(),
        HANDSHAKE_SALT,
        cid.0,
        b"",
        b"",
        KEY_SET_LEN,
        true,
    )
    .expect("40 bytes");
    split_keys(&m).expect("40 bytes")
}

/// Seals `marker || payload` under `keys` with the header as associated data.
pub fn pak(keys: &KeySet, header: Header, marker: u8, payload: &[u8], role: Role) -> Packet {
    let aad = header.to_bytes();
    let nonce = get_iv(header.sqn, keys, role, Direction::Send);
    let mut pt = Vec::with_capacity(1 + payload.len());
    pt.push(marker);
    pt.extend_from_slice(payload);
    let body = aead_seal(keys.key(role, Direction::Send), &nonce, &aad, &pt);
    Packet { header, body }
}

/// Opens a packet addressed to `role`, returning `marker || payload`.
pub fn open(keys: &KeySet, packet: &Packet, role: Role) -> Result<Vec<u8>, ProtectError> {
    let aad = packet.header.to_bytes();
    let nonce = get_iv(packet.header.sqn, keys, role, Direction::Receive);
    let pt = aead_open(
        keys.key(role, Direction::Receive),
        &nonce,
        &aad,
        &packet.body,
    )
    .ok_or(ProtectError::Open)?;
    if pt.is_empty() {
        return Err(ProtectError::Marker);
    }
    Ok(pt)
}

/// Outcome of opening a batch of application-data packets.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Processed {
    /// Payloads with the marker stripped, ordered by sqn.
    pub messages: BTreeMap<u64, Vec<u8>>,
    pub dropped: Vec<(u64, ProtectError)>,
}

impl Processed {
    /// Concatenates the payloads in sqn order.
    pub fn concat(&self) -> Vec<u8> {
        self.messages.values().flatten().copied().collect()
    }
}

/// Opens each packet independently; failures are reported without aborting
/// the batch, and only application-data payloads are accepted.
pub fn process_packets<'a>(
    keys: &KeySet,
    packets: impl IntoIterator<Item = &'a Packet>,
    role: Role,
) -> Processed {
    let mut out = Processed::default();
    for p in packets {
        match open(keys, p, role) {
            Ok(pt) if pt[0] == MARKER_DATA => {
                out.messages.insert(p.header.sqn, pt[1..].to_vec());
            }
            Ok(_) => out.dropped.push((p.header.sqn, ProtectError::Marker)),
            Err(e) => out.dropped.push((p.header.sqn, e)),
        }
    }
    out
}

/// Send-side guard for one key set: refuses any sqn not strictly greater
/// than the last one sealed, so no nonce repeats under a key.
#[derive(Debug, Clone)]
pub struct Sealer {
    pub keys: KeySet,
    pub role: Role,
    last_sqn: Option<u64>,
}

impl Sealer {
    pub fn new(keys: KeySet, role: Role) -> Self {
        Sealer {
            keys,
            role,
            last_sqn: None,
        }
    }

    pub fn seal(
        &mut self,
        header: Header,
        marker: u8,
        payload: &[u8],
    ) -> Result<Packet, ProtectError> {
        if self.last_sqn.is_some_and(|l| header.sqn <= l) {
            return Err(ProtectError::IvReuse(header.sqn));
        }
        self.last_sqn = Some(header.sqn);
        Ok(pak(&self.keys, header, marker, payload, self.role))
    }

    pub fn open(&self, packet: &Packet) -> Result<Vec<u8>, ProtectError> {
        open(&self.keys, packet, self.role)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::wire::Epoch;

    fn keys(seed: u8) -> KeySet {
        split_keys(&core::array::from_fn::<u8, 40, _>(|i| {
            seed.wrapping_mul(41).wrapping_add(i as u8)
        }))
        .unwrap()
    }

    fn hdr(sqn: u64) -> Header {
        Header::new(Epoch::Final, ConnectionId(9), sqn)
    }

    #[test]
    fn pak_then_process_in_sqn_order() {
        let k = keys(1);
        let ps: Vec<Packet> = [4u64, 3, 5]
            .iter()
            .map(|&s| pak(&k, hdr(s), MARKER_DATA, &[s as u8], Role::Client))
            .collect();
        let out = process_packets(&k, &ps, Role::Server);
        assert_eq!(
            out.messages.keys().copied().collect::<Vec<_>>(),
            vec![3, 4, 5]
        );
        assert_eq!(out.concat(), vec![3, 4, 5]);
    }

    #[test]
    fn corrupt_packet_does_not_abort_batch() {
        let k = keys(2);
        let mut ps: Vec<Packet> = (1..=3)
            .map(|s| pak(&k, hdr(s), MARKER_DATA, b"x", Role::Client))
            .collect();
        ps[1].body[0] ^= 1;
        let out = process_packets(&k, &ps, Role::Server);
        assert_eq!(out.messages.len(), 2);
        assert_eq!(out.dropped, vec![(2, ProtectError::Open)]);
    }

    #[test]
    fn kex_marker_rejected_as_data() {
        let k = keys(3);
        let p = pak(&k, hdr(1), MARKER_KEX, b"x", Role::Server);
        let out = process_packets(&k, [&p], Role::Client);
        assert_eq!(out.dropped, vec![(1, ProtectError::Marker)]);
    }

    #[test]
    fn key_separation_and_direction() {
        let (ik, k) = (keys(4), keys(5));
        let p = pak(&ik, hdr(1), MARKER_DATA, b"m", Role::Client);
        assert_eq!(open(&k, &p, Role::Server), Err(ProtectError::Open));
        // A client cannot open its own packet: directions use distinct keys.
        assert_eq!(open(&ik, &p, Role::Client), Err(ProtectError::Open));
        assert_eq!(
            open(&ik, &p, Role::Server).unwrap(),
            vec![MARKER_DATA, b'm']
        );
    }

    #[test]
    fn header_is_authenticated() {
        let k = keys(6);
        let mut p = pak(&k, hdr(1), MARKER_DATA, b"m", Role::Client);
        p.header.cid = ConnectionId(10);
        assert_eq!(open(&k, &p, Role::Server), Err(ProtectError::Open));
    }

    #[test]
    fn sealer_refuses_reuse() {
        let mut s = Sealer::new(keys(7), Role::Client);
        s.seal(hdr(3), MARKER_DATA, b"a").unwrap();
        assert_eq!(
            s.seal(hdr(3), MARKER_DATA, b"b").unwrap_err(),
            ProtectError::IvReuse(3)
        );
        assert_eq!(
            s.seal(hdr(2), MARKER_DATA, b"b").unwrap_err(),
            ProtectError::IvReuse(2)
        );
        s.seal(hdr(4), MARKER_DATA, b"c").unwrap();
    }
}
