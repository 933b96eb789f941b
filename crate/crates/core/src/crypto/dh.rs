//! Diffie-Hellman over an abstract group: X25519 for real use, and a small
//! multiplicative group modulo a prime for brute-force checks.

use super::{CryptoError, CryptoRng};
use x25519_dalek::{PublicKey, StaticSecret};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Group {
    X25519,
    /// Powers of `generator` modulo the prime `modulus`.
    Modp {
        generator: u64,
        modulus: u64,
    },
}

impl Group {
    /// The b = 2, a = 23 group used by tests.
    pub const TINY: Group = Group::Modp {
        generator: 2,
        modulus: 23,
    };
}

#[derive(Clone)]
pub enum DhSecret {
    X25519(StaticSecret),
    Modp {
        generator: u64,
        modulus: u64,
        x: u64,
    },
}

impl std::fmt::Debug for DhSecret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DhSecret({:?})", self.group())
    }
}

impl DhSecret {
    pub fn group(&self) -> Group {
        match self {
            DhSecret::X25519(_) => Group::X25519,
            DhSecret::Modp {
                generator, modulus, ..
            } => Group::Modp {
                generator: *generator,
                modulus: *modulus,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum DhPublic {
    X25519([u8; 32]),
    Modp {
        generator: u64,
        modulus: u64,
        y: u64,
    },
}

const TAG_X25519: u8 = 0x01;
const TAG_MODP: u8 = 0x02;

impl DhPublic {
    pub fn group(&self) -> Group {
        match self {
            DhPublic::X25519(_) => Group::X25519,
            DhPublic::Modp {
                generator, modulus, ..
            } => Group::Modp {
                generator: *generator,
                modulus: *modulus,
            },
        }
    }

    /// Tagged encoding: `0x01 || 32 bytes` or `0x02 || b || a || y`.
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            DhPublic::X25519(p) => {
                let mut v = Vec::with_capacity(33);
                v.push(TAG_X25519);
                v.extend_from_slice(p);
                v
            }
            DhPublic::Modp {
                generator,
                modulus,
                y,
            } => {
                let mut v = Vec::with_capacity(25);
                v.push(TAG_MODP);
                v.extend_from_slice(&generator.to_be_bytes());
                v.extend_from_slice(&modulus.to_be_bytes());
                v.extend_from_slice(&y.to_be_bytes());
                v
            }
        }
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, CryptoError> {
        match b.split_first() {
            Some((&TAG_X25519, rest)) if rest.len() == 32 => {
                let mut p = [0u8; 32];
                p.copy_from_slice(rest);
                Ok(DhPublic::X25519(p))
            }
            Some((&TAG_MODP, rest)) if rest.len() == 24 => {
                let word =
                    |i: usize| u64::from_be_bytes(rest[i * 8..i * 8 + 8].try_into().unwrap());
                Ok(DhPublic::Modp {
                    generator: word(0),
                    modulus: word(1),
                    y: word(2),
                })
            }
            _ => Err(CryptoError::Malformed("dh public")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DhKeyPair {
    pub secret: DhSecret,
    pub public: DhPublic,
}

impl DhKeyPair {
    /// Builds a pair from a chosen exponent in a modp group.
    pub fn from_modp_secret(group: Group, x: u64) -> Result<Self, CryptoError> {
        let Group::Modp { generator, modulus } = group else {
            return Err(CryptoError::GroupMismatch);
        };
        let y = mod_pow(generator, x, modulus);
        Ok(DhKeyPair {
            secret: DhSecret::Modp {
                generator,
                modulus,
                x,
            },
            public: DhPublic::Modp {
                generator,
                modulus,
                y,
            },
        })
    }
}

fn mod_pow(base: u64, mut exp: u64, modulus: u64) -> u64 {
    let m = modulus as u128;
    let mut acc: u128 = 1 % m;
    let mut b = base as u128 % m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * b % m;
        }
        b = b * b % m;
        exp >>= 1;
    }
    acc as u64
}

pub fn dh_keypair(group: Group, rng: &mut impl CryptoRng) -> DhKeyPair {
    match group {
        Group::X25519 => {
            let secret = StaticSecret::random_from_rng(&mut *rng);
            let public = PublicKey::from(&secret).to_bytes();
            DhKeyPair {
                secret: DhSecret::X25519(secret),
                public: DhPublic::X25519(public),
            }
        }
        Group::Modp { modulus, .. } => {
            use rand::Rng;
            loop {
                let x = rng.gen_range(1..modulus - 1);
                let kp = DhKeyPair::from_modp_secret(group, x).expect("modp group");
                if let DhPublic::Modp { y, .. } = kp.public {
                    if y >= 2 {
                        return kp;
                    }
                }
            }
        }
    }
}

/// Computes the shared secret `peer^secret`. Degenerate peer values and
/// cross-group inputs are rejected.
pub fn dh_shared(secret: &DhSecret, peer: &DhPublic) -> Result<Vec<u8>, CryptoError> {
    if secret.group() != peer.group() {
        return Err(CryptoError::GroupMismatch);
    }
    match (secret, peer) {
        (DhSecret::X25519(s), DhPublic::X25519(p)) => {
            let shared = s.diffie_hellman(&PublicKey::from(*p));
            if !shared.was_contributory() {
                return Err(CryptoError::InvalidPublic);
            }
            Ok(shared.as_bytes().to_vec())
        }
        (DhSecret::Modp { modulus, x, .. }, DhPublic::Modp { y, .. }) => {
            if *y < 2 || *y >= *modulus {
                return Err(CryptoError::InvalidPublic);
            }
            Ok(mod_pow(*y, *x, *modulus).to_be_bytes().to_vec())
        }
        _ => Err(CryptoError::GroupMismatch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn tiny_group_brute_force() {
        let c = DhKeyPair::from_modp_secret(Group::TINY, 6).unwrap();
        let s = DhKeyPair::from_modp_secret(Group::TINY, 5).unwrap();
        let a = dh_shared(&c.secret, &s.public).unwrap();
        let b = dh_shared(&s.secret, &c.public).unwrap();
        assert_eq!(a, b);
        // 2^30 mod 23, computed by repeated multiplication.
        let mut v = 1u64;
        for _ in 0..30 {
            v = v * 2 % 23;
        }
        assert_eq!(v, 3);
        assert_eq!(a, 3u64.to_be_bytes().to_vec());
    }

    #[test]
    fn x25519_symmetry() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let c = dh_keypair(Group::X25519, &mut rng);
        let s = dh_keypair(Group::X25519, &mut rng);
        assert_eq!(
            dh_shared(&c.secret, &s.public).unwrap(),
            dh_shared(&s.secret, &c.public).unwrap()
        );
    }

    #[test]
    fn identity_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let c = dh_keypair(Group::X25519, &mut rng);
        assert_eq!(
            dh_shared(&c.secret, &DhPublic::X25519([0; 32])),
            Err(CryptoError::InvalidPublic)
        );
        let t = DhKeyPair::from_modp_secret(Group::TINY, 3).unwrap();
        let one = DhPublic::Modp {
            generator: 2,
            modulus: 23,
            y: 1,
        };
        assert_eq!(dh_shared(&t.secret, &one), Err(CryptoError::InvalidPublic));
    }

    #[test]
    fn cross_group_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let c = dh_keypair(Group::X25519, &mut rng);
        let t = dh_keypair(Group::TINY, &mut rng);
        assert_eq!(
            dh_shared(&c.secret, &t.public),
            Err(CryptoError::GroupMismatch)
        );
    }

    #[test]
    fn public_encoding_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for g in [Group::X25519, Group::TINY] {
            let kp = dh_keypair(g, &mut rng);
            assert_eq!(
                DhPublic::from_bytes(&kp.public.to_bytes()).unwrap(),
                kp.public
            );
        }
        assert!(DhPublic::from_bytes(&[9, 9]).is_err());
    }
}
