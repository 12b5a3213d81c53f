use std::fmt;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ed25519_dalek::{Signer, Verifier};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

macro_rules! b64_bytes {
    ($name:ident, $len:expr) => {
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_b64(&self) -> String {
                B64.encode(self.0)
            }

            pub fn from_b64(s: &str) -> Option<Self> {
                let raw = B64.decode(s).ok()?;
                let arr: [u8; $len] = raw.try_into().ok()?;
                Some(Self(arr))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_b64())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_b64())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_b64())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::from_b64(&s).ok_or_else(|| {
                    serde::de::Error::custom(concat!("invalid base64 ", stringify!($name)))
                })
            }
        }
    };
}

b64_bytes!(VerifyingKeyBytes, 32);
b64_bytes!(SignatureBytes, 64);
b64_bytes!(EncryptionPublicKey, 32);

/// Domain-separated 32-byte seed for long-lived key material.
///
/// Static keys are a property of the federation configuration, not of a run:
/// the same federation seed and entity id always yield the same key.
pub fn derive_static_seed(federation_seed: u64, entity_id: &str, purpose: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"pefim-static-key-v1");
    h.update(federation_seed.to_be_bytes());
    h.update((entity_id.len() as u32).to_be_bytes());
    h.update(entity_id.as_bytes());
    h.update((purpose.len() as u32).to_be_bytes());
    h.update(purpose.as_bytes());
    h.finalize().into()
}

/// Ed25519 signing key. Used both for static metadata keys and for
/// short-term client keys.
#[derive(Clone)]
pub struct SigningKey(ed25519_dalek::SigningKey);

impl SigningKey {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self(ed25519_dalek::SigningKey::from_bytes(&seed))
    }

    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(seed)
    }

    pub fn verifying_key(&self) -> VerifyingKeyBytes {
        VerifyingKeyBytes(self.0.verifying_key().to_bytes())
    }

    pub fn sign(&self, msg: &[u8]) -> SignatureBytes {
        SignatureBytes(self.0.sign(msg).to_bytes())
    }
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SigningKey(pub={})", self.verifying_key())
    }
}

pub fn verify_signature(key: &VerifyingKeyBytes, msg: &[u8], sig: &SignatureBytes) -> bool {
    let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&key.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    vk.verify(msg, &sig).is_ok()
}

/// X25519 secret used to open payloads.
#[derive(Clone)]
pub struct EncryptionSecretKey(x25519_dalek::StaticSecret);

impl EncryptionSecretKey {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self(x25519_dalek::StaticSecret::from(seed))
    }

    pub fn public_key(&self) -> EncryptionPublicKey {
        EncryptionPublicKey(x25519_dalek::PublicKey::from(&self.0).to_bytes())
    }

    pub(crate) fn diffie_hellman(&self, peer: &EncryptionPublicKey) -> [u8; 32] {
        let peer = x25519_dalek::PublicKey::from(peer.0);
        self.0.diffie_hellman(&peer).to_bytes()
    }
}

impl fmt::Debug for EncryptionSecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EncryptionSecretKey(pub={})", self.public_key())
    }
}

/// A per-transaction encryption keypair.
#[derive(Clone, Debug)]
pub struct OnetimeKeypair {
    pub public: EncryptionPublicKey,
    pub secret: EncryptionSecretKey,
}

pub fn generate_onetime_keypair<R: RngCore + CryptoRng>(rng: &mut R) -> OnetimeKeypair {
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    let secret = EncryptionSecretKey::from_seed(seed);
    OnetimeKeypair {
        public: secret.public_key(),
        secret,
    }
}

/// Lowercase hex SHA-256 of the given bytes, truncated to 16 hex digits.
pub fn fingerprint(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}
