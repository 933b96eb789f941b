//! AES-128-GCM with a 96-bit nonce and 128-bit tag.

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Key};
use serde::{Deserialize, Serialize};

pub const TAG_LEN: usize = 16;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct AeadKey(pub [u8; 16]);

impl std::fmt::Debug for AeadKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("AeadKey(..)")
    }
}

/// 12-byte nonce: 4-byte IV prefix followed by the 8-byte big-endian sequence
/// number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Nonce(pub [u8; 12]);

impl Nonce {
    pub fn new(prefix: [u8; 4], sqn: u64) -> Self {
        let mut n = [0u8; 12];
        n[..4].copy_from_slice(&prefix);
        n[4..].copy_from_slice(&sqn.to_be_bytes());
        Nonce(n)
    }
}

pub fn aead_seal(k: &AeadKey, nonce: &Nonce, aad: &[u8], m: &[u8]) -> Vec<u8> {
    let cipher = Aes128Gcm::new(&Key::<Aes128Gcm>::from(k.0));
    cipher
        .encrypt((&nonce.0).into(), Payload { msg: m, aad })
        .expect("AES-GCM sealing is infallible for in-memory buffers")
}

/// Opens `c`; `None` is the authentication failure symbol.
pub fn aead_open(k: &AeadKey, nonce: &Nonce, aad: &[u8], c: &[u8]) -> Option<Vec<u8>> {
    let cipher = Aes128Gcm::new(&Key::<Aes128Gcm>::from(k.0));
    cipher
        .decrypt((&nonce.0).into(), Payload { msg: c, aad })
        .ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hex(b: &[u8]) -> String {
        b.iter().map(|x| format!("{x:02x}")).collect()
    }

    #[test]
    fn known_answer_zero_key() {
        let k = AeadKey([0; 16]);
        let n = Nonce([0; 12]);
        assert_eq!(
            hex(&aead_seal(&k, &n, b"", &[0u8; 16])),
            "0388dace60b6a392f328c2b971b2fe78ab6e47d42cec13bdf53a67b21257bddf"
        );
        assert_eq!(
            hex(&aead_seal(&k, &n, b"", b"")),
            "58e2fccefa7e3061367f1d57a4e7455a"
        );
    }

    #[test]
    fn known_answer_with_aad() {
        let k = AeadKey([0; 16]);
        let mut n = [0u8; 12];
        for (i, b) in n.iter_mut().enumerate() {
            *b = i as u8;
        }
        assert_eq!(
            hex(&aead_seal(&k, &Nonce(n), b"hdr", b"quic mqtt")),
            "42a81a8f37eb5c5295eef0556aea756cbbae0be71573ad7605"
        );
    }

    #[test]
    fn empty_roundtrip_and_tamper() {
        let k = AeadKey([7; 16]);
        let n = Nonce::new([1, 2, 3, 4], 9);
        let c = aead_seal(&k, &n, b"h", b"");
        assert_eq!(aead_open(&k, &n, b"h", &c), Some(vec![]));
        let mut bad = c.clone();
        *bad.last_mut().unwrap() ^= 1;
        assert_eq!(aead_open(&k, &n, b"h", &bad), None);
        assert_eq!(aead_open(&k, &Nonce::new([1, 2, 3, 4], 10), b"h", &c), None);
    }

    #[test]
    fn nonce_layout() {
        let n = Nonce::new([1, 2, 3, 4], 7);
        assert_eq!(n.0, [1, 2, 3, 4, 0, 0, 0, 0, 0, 0, 0, 7]);
    }
}
