//! HMAC-SHA-256 extract/expand and the key-set layout built on it.

use super::aead::{AeadKey, Nonce};
use super::CryptoError;
use crate::{Direction, Role};
use hmac::{Hmac, Mac};
use sha2::Sha256;

type HmacSha256 = Hmac<Sha256>;

pub const INITIAL_LABEL: &[u8] = b"QUIC key expansion";
pub const FORWARD_LABEL: &[u8] = b"QUIC forward secure key expansion";
pub const KEY_SET_LEN: usize = 40;
const HASH_LEN: usize = 32;

fn hmac(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    for p in parts {
        mac.update(p);
    }
    mac.finalize().into_bytes().into()
}

/// Extracts a master secret `HMAC(nonc, ipm)` and expands it into `l` bytes
/// with `T(i) = HMAC(ms, T(i-1) || info || i)`, where
/// `info = label || 0x00 || cid || m || scfg_pub`. `init` selects the initial
/// or forward-secure label.
pub fn extract_expand(
    ipm: &[u8],
    nonc: &[u8],
    cid: u64,
    m: &[u8],
    scfg_pub: &[u8],
    l: usize,
    init: bool,
) -> Result<Vec<u8>, CryptoError> {
    if l > 255 * HASH_LEN {
        return Err(CryptoError::OutputTooLong(l));
    }
    let ms = hmac(nonc, &[ipm]);
    let label = if init { INITIAL_LABEL } else { FORWARD_LABEL };
    let cid = cid.to_be_bytes();
    let mut out = Vec::with_capacity(l);
    let mut prev: Vec<u8> = Vec::new();
    let mut i: u8 = 1;
    while out.len() < l {
        let t = hmac(&ms, &[&prev, label, &[0u8], &cid, m, scfg_pub, &[i]]);
        out.extend_from_slice(&t);
        prev = t.to_vec();
        i = i.wrapping_add(1);
    }
    out.truncate(l);
    Ok(out)
}

/// Two directional AEAD keys plus their 4-byte IV prefixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct KeySet {
    pub k_c: AeadKey,
    pub k_s: AeadKey,
    pub iv_c: [u8; 4],
    pub iv_s: [u8; 4],
}

impl KeySet {
    pub fn to_bytes(&self) -> [u8; KEY_SET_LEN] {
        let mut b = [0u8; KEY_SET_LEN];
        b[..16].copy_from_slice(&self.k_c.0);
        b[16..32].copy_from_slice(&self.k_s.0);
        b[32..36].copy_from_slice(&self.iv_c);
        b[36..].copy_from_slice(&self.iv_s);
        b
    }

    /// The key a party uses: senders seal with the destination's key,
    /// receivers open with their own.
    pub fn key(&self, role: Role, dir: Direction) -> &AeadKey {
        match target(role, dir) {
            Role::Client => &self.k_c,
            Role::Server => &self.k_s,
        }
    }

    fn prefix(&self, role: Role, dir: Direction) -> [u8; 4] {
        match target(role, dir) {
            Role::Client => self.iv_c,
            Role::Server => self.iv_s,
        }
    }
}

fn target(role: Role, dir: Direction) -> Role {
    match dir {
        Direction::Send => role.peer(),
        Direction::Receive => role,
    }
}

/// Slices 40 bytes of expansion output into a key set. Both roles slice
/// identically.
pub fn split_keys(material: &[u8]) -> Result<KeySet, CryptoError> {
    if material.len() != KEY_SET_LEN {
        return Err(CryptoError::Malformed("key material must be 40 bytes"));
    }
    let mut ks = KeySet::default();
    ks.k_c.0.copy_from_slice(&material[..16]);
    ks.k_s.0.copy_from_slice(&material[16..32]);
    ks.iv_c.copy_from_slice(&material[32..36]);
    ks.iv_s.copy_from_slice(&material[36..40]);
    Ok(ks)
}

/// Nonce for packet `sqn`: the destination-role prefix when sending, the
/// local-role prefix when receiving, followed by the big-endian sqn.
pub fn get_iv(sqn: u64, keys: &KeySet, role: Role, dir: Direction) -> Nonce {
    Nonce::new(keys.prefix(role, dir), sqn)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hex(b: &[u8]) -> String {
        b.iter().map(|x| format!("{x:02x}")).collect()
    }

    fn seq(n: u8) -> Vec<u8> {
        (0..n).collect()
    }

    #[test]
    fn oracle_vectors() {
        let out = extract_expand(&[0; 32], &[0; 20], 0, b"", b"", 40, true).unwrap();
        assert_eq!(
            hex(&out),
            "658a83de06424757294593fcbcaf224c959e1907a2e06d1493a69b2226eba370a7c3f5e2b7cf0133"
        );
        let out = extract_expand(&[0; 32], &[0; 20], 0, b"", b"", 40, false).unwrap();
        assert_eq!(
            hex(&out),
            "9ccdc7f6efc604bc010d2c40d1027edd0ea9913e7c3b47c65c8279be2808bed3da3eac038758ae6d"
        );
        let out = extract_expand(
            &seq(32),
            &seq(24),
            0x0102030405060708,
            b"chlo",
            b"scfg",
            100,
            true,
        )
        .unwrap();
        assert_eq!(
            hex(&out),
            "f50754e8719db87eb6f15323e1480817663015c34d7c0b7e30efe28d8e4f99ff7f627b84ba26d9ae3cd2c8c5\
             91748769dfb266a778c823e36a79e593f7705adb852862b3f57b954cf68bde4f1249e9f07be12c74e9ba5092\
             4396f827643afa757305d2c5"
        );
    }

    #[test]
    fn length_edges() {
        assert!(extract_expand(b"k", b"n", 1, b"", b"", 0, true)
            .unwrap()
            .is_empty());
        assert_eq!(
            extract_expand(b"k", b"n", 1, b"", b"", 255 * 32, true)
                .unwrap()
                .len(),
            255 * 32
        );
        assert!(extract_expand(b"k", b"n", 1, b"", b"", 255 * 32 + 1, true).is_err());
    }

    #[test]
    fn split_partitions_material() {
        let m: Vec<u8> = (0..40).collect();
        let ks = split_keys(&m).unwrap();
        assert_eq!(ks.to_bytes().to_vec(), m);
        assert_eq!(split_keys(&[0; 40]).unwrap(), KeySet::default());
        assert!(split_keys(&[0; 39]).is_err());
    }

    #[test]
    fn iv_prefix_by_role() {
        let ks = KeySet {
            iv_c: [9, 9, 9, 9],
            iv_s: [1, 2, 3, 4],
            ..KeySet::default()
        };
        let c = get_iv(7, &ks, Role::Client, Direction::Send);
        assert_eq!(c.0, [1, 2, 3, 4, 0, 0, 0, 0, 0, 0, 0, 7]);
        let s = get_iv(7, &ks, Role::Server, Direction::Send);
        assert_eq!(&s.0[4..], &c.0[4..]);
        assert_ne!(s.0[..4], c.0[..4]);
        assert_eq!(get_iv(7, &ks, Role::Server, Direction::Receive), c);
        assert_ne!(get_iv(8, &ks, Role::Client, Direction::Send), c);
    }
}
