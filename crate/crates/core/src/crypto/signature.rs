//! ECDSA-P256-SHA256 behind the `(kg, sign, ver)` interface.

use super::{CryptoError, CryptoRng};
use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};

/// Label prefixed to the signed server configuration.
pub const SCFG_SIGNATURE_LABEL: &[u8] = b"QUIC Server Config Signature";

#[derive(Clone, PartialEq, Eq)]
pub struct SignatureKeyPair {
    /// SEC1 compressed point, 33 bytes.
    pub pk: Vec<u8>,
    /// Scalar, 32 bytes.
    pub sk: Vec<u8>,
}

impl std::fmt::Debug for SignatureKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SignatureKeyPair")
            .field("pk", &self.pk)
            .finish_non_exhaustive()
    }
}

impl SignatureKeyPair {
    /// Rebuilds a key pair from a stored 32-byte scalar.
    pub fn from_secret(sk: &[u8]) -> Result<Self, CryptoError> {
        let key = SigningKey::from_slice(sk).map_err(|_| CryptoError::Malformed("signing key"))?;
        let pk = VerifyingKey::from(&key)
            .to_encoded_point(true)
            .as_bytes()
            .to_vec();
        Ok(SignatureKeyPair {
            pk,
            sk: key.to_bytes().to_vec(),
        })
    }
}

/// Generates a key pair. Only `lambda = 128` is supported.
pub fn kg(lambda: u32, rng: &mut impl CryptoRng) -> Result<SignatureKeyPair, CryptoError> {
    if lambda != 128 {
        return Err(CryptoError::UnsupportedSecurity(lambda));
    }
    let sk = SigningKey::random(rng);
    let pk = VerifyingKey::from(&sk)
        .to_encoded_point(true)
        .as_bytes()
        .to_vec();
    Ok(SignatureKeyPair {
        pk,
        sk: sk.to_bytes().to_vec(),
    })
}

/// Signs `m`, returning the 64-byte `r || s` encoding.
pub fn sign(sk: &[u8], m: &[u8]) -> Result<Vec<u8>, CryptoError> {
    let key = SigningKey::from_slice(sk).map_err(|_| CryptoError::Malformed("signing key"))?;
    let sig: Signature = key.sign(m);
    Ok(sig.to_bytes().to_vec())
}

/// Returns true iff `sigma` is a valid signature of `m` under `pk`.
/// Malformed keys or signatures yield false.
pub fn ver(pk: &[u8], m: &[u8], sigma: &[u8]) -> bool {
    let Ok(key) = VerifyingKey::from_sec1_bytes(pk) else {
        return false;
    };
    let Ok(sig) = Signature::from_slice(sigma) else {
        return false;
    };
    key.verify(m, &sig).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn sign_then_verify() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let kp = kg(128, &mut rng).unwrap();
        let s = sign(&kp.sk, b"x").unwrap();
        assert!(ver(&kp.pk, b"x", &s));
        assert!(!ver(&kp.pk, b"x\0", &s));
    }

    #[test]
    fn from_secret_restores_public_key() {
        let kp = kg(128, &mut ChaCha20Rng::seed_from_u64(3)).unwrap();
        assert_eq!(SignatureKeyPair::from_secret(&kp.sk).unwrap(), kp);
        assert!(SignatureKeyPair::from_secret(&[0u8; 32]).is_err());
    }

    #[test]
    fn unrelated_key_rejects() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let a = kg(128, &mut rng).unwrap();
        let b = kg(128, &mut rng).unwrap();
        assert_ne!(a.pk, b.pk);
        let s = sign(&a.sk, b"msg").unwrap();
        assert!(!ver(&b.pk, b"msg", &s));
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = kg(128, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        let b = kg(128, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_inputs_do_not_panic() {
        let kp = kg(128, &mut ChaCha20Rng::seed_from_u64(3)).unwrap();
        assert!(!ver(&kp.pk, b"m", &[0u8; 3]));
        assert!(!ver(&[1, 2, 3], b"m", &[0u8; 64]));
        assert!(!ver(&kp.pk, b"m", &[0u8; 64]));
    }

    #[test]
    fn unsupported_lambda() {
        assert_eq!(
            kg(80, &mut ChaCha20Rng::seed_from_u64(0)),
            Err(CryptoError::UnsupportedSecurity(80))
        );
    }
}
