//! Cryptographic building blocks for the handshake and packet protection.

mod aead;
mod dh;
mod kdf;
mod signature;

pub use aead::{aead_open, aead_seal, AeadKey, Nonce, TAG_LEN};
pub use dh::{dh_keypair, dh_shared, DhKeyPair, DhPublic, DhSecret, Group};
pub use kdf::{
    extract_expand, get_iv, split_keys, KeySet, FORWARD_LABEL, INITIAL_LABEL, KEY_SET_LEN,
};
pub use signature::{kg, sign, ver, SignatureKeyPair, SCFG_SIGNATURE_LABEL};

use thiserror::Error;

/// Errors raised by key generation and agreement. Authentication failures
/// are reported as `None`/`false`, never as errors.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("unsupported security parameter {0}")]
    UnsupportedSecurity(u32),
    #[error("invalid group element")]
    InvalidPublic,
    #[error("peer public value belongs to a different group")]
    GroupMismatch,
    #[error("malformed key material: {0}")]
    Malformed(&'static str),
    #[error("requested {0} bytes exceeds the expansion limit")]
    OutputTooLong(usize),
}

/// Randomness accepted by every operation that needs it.
pub trait CryptoRng: rand::RngCore + rand::CryptoRng {}
impl<T: rand::RngCore + rand::CryptoRng> CryptoRng for T {}

/// SHA-256 of the concatenation of `parts`.
pub fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}
