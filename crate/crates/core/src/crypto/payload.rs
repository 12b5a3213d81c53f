//! End-to-end encrypted attribute payloads.
//!
//! The sealing scheme is ephemeral-static X25519, HKDF-SHA256 and
//! ChaCha20-Poly1305. The AEAD key and nonce are expanded from the shared
//! secret with the ephemeral and recipient public keys as salt; the
//! recipient's certificate serial is bound as associated data.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use super::cert::{validate_cert, CertRejection, OneTimeCertificate, Serial};
use super::keys::{EncryptionPublicKey, EncryptionSecretKey, VerifyingKeyBytes};
use crate::{Attributes, SimTime};

const HKDF_INFO: &[u8] = b"pefim-payload-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PayloadScheme {
    #[serde(rename = "x25519-hkdf-sha256-chacha20poly1305")]
    X25519ChaCha20Poly1305,
    /// Attributes in the clear. Only produced by the disabled-encryption
    /// fault hook.
    #[serde(rename = "none")]
    Plaintext,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncryptedPayload {
    pub scheme: PayloadScheme,
    #[serde(with = "b64_vec")]
    pub ciphertext: Vec<u8>,
    #[serde(with = "b64_vec")]
    pub ephemeral_material: Vec<u8>,
    pub recipient_hint: Serial,
}

impl EncryptedPayload {
    /// Canonical bytes covered by the issuer's payload signature.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("payload serializes")
    }

    /// Attributes readable by anyone holding this payload. `None` unless the
    /// payload was produced with encryption disabled.
    pub fn observable_plaintext(&self) -> Option<Attributes> {
        match self.scheme {
            PayloadScheme::Plaintext => serde_json::from_slice(&self.ciphertext).ok(),
            PayloadScheme::X25519ChaCha20Poly1305 => None,
        }
    }
}

mod b64_vec {
    use super::B64;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        B64.decode(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PayloadError {
    #[error("recipient certificate rejected: {0}")]
    InvalidCert(#[from] CertRejection),
    #[error("payload could not be decrypted")]
    DecryptionFailure,
}

/// AEAD key and nonce for one payload. A holder of this value can open that
/// payload and nothing else.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct ContentKey(pub [u8; 44]);

impl ContentKey {
    pub fn to_b64(&self) -> String {
        B64.encode(self.0)
    }

    pub fn from_b64(s: &str) -> Option<Self> {
        let raw = B64.decode(s).ok()?;
        Some(Self(raw.try_into().ok()?))
    }
}

impl std::fmt::Debug for ContentKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ContentKey([REDACTED])")
    }
}

impl Serialize for ContentKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_b64())
    }
}

impl<'de> Deserialize<'de> for ContentKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_b64(&s).ok_or_else(|| serde::de::Error::custom("invalid content key"))
    }
}

fn expand(shared: &[u8; 32], eph: &[u8; 32], recipient: &[u8; 32]) -> ContentKey {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(eph);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut okm = [0u8; 44];
    hk.expand(HKDF_INFO, &mut okm).expect("44 bytes is a valid HKDF length");
    ContentKey(okm)
}

fn aead_open(ck: &ContentKey, ct: &[u8], aad: &Serial) -> Result<Vec<u8>, PayloadError> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&ck.0[..32]));
    cipher
        .decrypt(
            Nonce::from_slice(&ck.0[32..]),
            Payload {
                msg: ct,
                aad: &aad.0,
            },
        )
        .map_err(|_| PayloadError::DecryptionFailure)
}

/// The sealing backend. Both implementations produce the same envelope shape
/// so that flows are oblivious to which one is configured.
pub trait PayloadCipher: Send + Sync {
    fn seal(
        &self,
        plaintext: &[u8],
        recipient: &EncryptionPublicKey,
        hint: Serial,
        rng: &mut dyn RngCore,
    ) -> EncryptedPayload;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct HybridCipher;

impl PayloadCipher for HybridCipher {
    fn seal(
        &self,
        plaintext: &[u8],
        recipient: &EncryptionPublicKey,
        hint: Serial,
        rng: &mut dyn RngCore,
    ) -> EncryptedPayload {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let eph = EncryptionSecretKey::from_seed(seed);
        let eph_pub = eph.public_key();
        let shared = eph.diffie_hellman(recipient);
        let ck = expand(&shared, &eph_pub.0, &recipient.0);
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&ck.0[..32]));
        let ciphertext = cipher
            .encrypt(
                Nonce::from_slice(&ck.0[32..]),
                Payload {
                    msg: plaintext,
                    aad: &hint.0,
                },
            )
            .expect("in-memory encryption does not fail");
        EncryptedPayload {
            scheme: PayloadScheme::X25519ChaCha20Poly1305,
            ciphertext,
            ephemeral_material: eph_pub.0.to_vec(),
            recipient_hint: hint,
        }
    }
}

/// Fault-injection backend: leaves the attribute statement readable.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullCipher;

impl PayloadCipher for NullCipher {
    fn seal(
        &self,
        plaintext: &[u8],
        _recipient: &EncryptionPublicKey,
        hint: Serial,
        _rng: &mut dyn RngCore,
    ) -> EncryptedPayload {
        EncryptedPayload {
            scheme: PayloadScheme::Plaintext,
            ciphertext: plaintext.to_vec(),
            ephemeral_material: Vec::new(),
            recipient_hint: hint,
        }
    }
}

pub fn encode_attributes(attrs: &Attributes) -> Vec<u8> {
    serde_json::to_vec(attrs).expect("attribute maps serialize")
}

/// Encrypt `attributes` for the holder of `cert`'s private key.
pub fn encrypt_payload<R: RngCore + CryptoRng>(
    cipher: &dyn PayloadCipher,
    attributes: &Attributes,
    cert: &OneTimeCertificate,
    trust_root: &VerifyingKeyBytes,
    now: SimTime,
    rng: &mut R,
) -> Result<EncryptedPayload, PayloadError> {
    validate_cert(cert, trust_root, now)?;
    Ok(cipher.seal(
        &encode_attributes(attributes),
        &cert.public_key,
        cert.serial,
        rng,
    ))
}

/// Derive the content key of `payload` using the recipient's secret.
pub fn derive_content_key(
    payload: &EncryptedPayload,
    secret: &EncryptionSecretKey,
) -> Result<ContentKey, PayloadError> {
    let eph: [u8; 32] = payload
        .ephemeral_material
        .as_slice()
        .try_into()
        .map_err(|_| PayloadError::DecryptionFailure)?;
    let shared = secret.diffie_hellman(&EncryptionPublicKey(eph));
    Ok(expand(&shared, &eph, &secret.public_key().0))
}

pub fn decrypt_payload(
    payload: &EncryptedPayload,
    secret: &EncryptionSecretKey,
) -> Result<Attributes, PayloadError> {
    match payload.scheme {
        PayloadScheme::Plaintext => payload
            .observable_plaintext()
            .ok_or(PayloadError::DecryptionFailure),
        PayloadScheme::X25519ChaCha20Poly1305 => {
            let ck = derive_content_key(payload, secret)?;
            open_with_content_key(payload, &ck)
        }
    }
}

pub fn open_with_content_key(
    payload: &EncryptedPayload,
    ck: &ContentKey,
) -> Result<Attributes, PayloadError> {
    match payload.scheme {
        PayloadScheme::Plaintext => payload
            .observable_plaintext()
            .ok_or(PayloadError::DecryptionFailure),
        PayloadScheme::X25519ChaCha20Poly1305 => {
            let pt = aead_open(ck, &payload.ciphertext, &payload.recipient_hint)?;
            serde_json::from_slice(&pt).map_err(|_| PayloadError::DecryptionFailure)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::cert::{CertRequest, CertificateAuthority, EnrollmentKey};
    use crate::crypto::keys::{generate_onetime_keypair, SigningKey};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn setup(rng: &mut ChaCha20Rng) -> (CertificateAuthority, crate::crypto::OnetimeKeypair, OneTimeCertificate) {
        let mut ca = CertificateAuthority::new(SigningKey::from_seed([3; 32]), EnrollmentKey([4; 32]), 300);
        let kp = generate_onetime_keypair(rng);
        let cert = ca
            .issue(&CertRequest::new(&EnrollmentKey([4; 32]), kp.public, None), 0, rng)
            .unwrap();
        (ca, kp, cert)
    }

    fn attrs(pairs: &[(&str, &str)]) -> Attributes {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn round_trip_and_wrong_key() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let (ca, kp, cert) = setup(&mut rng);
        let m = attrs(&[("givenName", "Alice Liddell"), ("affiliation", "member.staff")]);
        let p = encrypt_payload(&HybridCipher, &m, &cert, &ca.trust_root(), 1, &mut rng).unwrap();
        assert_eq!(p.recipient_hint, cert.serial);
        assert_eq!(decrypt_payload(&p, &kp.secret).unwrap(), m);
        let other = generate_onetime_keypair(&mut rng);
        assert_eq!(
            decrypt_payload(&p, &other.secret),
            Err(PayloadError::DecryptionFailure)
        );
        assert!(p.observable_plaintext().is_none());
    }

    #[test]
    fn expired_cert_refused() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let (ca, _kp, cert) = setup(&mut rng);
        let r = encrypt_payload(&HybridCipher, &Attributes::new(), &cert, &ca.trust_root(), 301, &mut rng);
        assert_eq!(r, Err(PayloadError::InvalidCert(CertRejection::Expired)));
    }

    #[test]
    fn content_key_opens_only_its_payload() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let (ca, kp, cert) = setup(&mut rng);
        let a = attrs(&[("x", "one value")]);
        let b = attrs(&[("x", "two value")]);
        let pa = encrypt_payload(&HybridCipher, &a, &cert, &ca.trust_root(), 1, &mut rng).unwrap();
        let pb = encrypt_payload(&HybridCipher, &b, &cert, &ca.trust_root(), 1, &mut rng).unwrap();
        let ck = derive_content_key(&pa, &kp.secret).unwrap();
        assert_eq!(open_with_content_key(&pa, &ck).unwrap(), a);
        assert!(open_with_content_key(&pb, &ck).is_err());
    }

    #[test]
    fn tampered_ciphertext_fails() {
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let (ca, kp, cert) = setup(&mut rng);
        let mut p = encrypt_payload(&HybridCipher, &attrs(&[("k", "v v")]), &cert, &ca.trust_root(), 1, &mut rng).unwrap();
        p.ciphertext[0] ^= 0x80;
        assert_eq!(decrypt_payload(&p, &kp.secret), Err(PayloadError::DecryptionFailure));
    }

    #[test]
    fn null_cipher_is_observable() {
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let (ca, kp, cert) = setup(&mut rng);
        let m = attrs(&[("givenName", "Alice Liddell")]);
        let p = encrypt_payload(&NullCipher, &m, &cert, &ca.trust_root(), 1, &mut rng).unwrap();
        assert_eq!(p.observable_plaintext(), Some(m.clone()));
        assert_eq!(decrypt_payload(&p, &kp.secret).unwrap(), m);
    }
}
