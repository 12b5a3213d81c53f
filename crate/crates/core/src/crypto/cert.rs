//! One-time certificates and the issuing certificate authority.
//!
//! A one-time certificate binds a fresh encryption key (and, for WS clients,
//! a short-term verification key) to a validity window and a random serial.
//! It carries nothing that names or derives from the requesting entity.
//!
//! Canonical to-be-signed encoding, all integers big-endian:
//!
//! | field        | bytes | content                                   |
//! |--------------|-------|-------------------------------------------|
//! | magic        | 10    | `PEFIM-OTC` followed by version byte 0x01 |
//! | public_key   | 32    | X25519 encryption key                     |
//! | vk_flag      | 1     | 0x00 absent, 0x01 present                 |
//! | verify_key   | 0/32  | Ed25519 key when `vk_flag` is 0x01        |
//! | not_before   | 8     | u64 simulated seconds                     |
//! | not_after    | 8     | u64 simulated seconds                     |
//! | serial       | 16    | random                                    |
//!
//! The full encoding appends the 64-byte CA signature over those bytes.

use std::collections::BTreeSet;
use std::fmt;

use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::Sha256;
use thiserror::Error;

use super::keys::{
    verify_signature, EncryptionPublicKey, SignatureBytes, SigningKey, VerifyingKeyBytes,
};
use crate::SimTime;

const CERT_MAGIC: &[u8; 10] = b"PEFIM-OTC\x01";

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Serial(pub [u8; 16]);

impl Serial {
    pub fn random<R: RngCore>(rng: &mut R) -> Self {
        let mut b = [0u8; 16];
        rng.fill_bytes(&mut b);
        Self(b)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Serial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Serial({})", self.to_hex())
    }
}

impl fmt::Display for Serial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Serial {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Serial {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let raw = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 16] = raw
            .try_into()
            .map_err(|_| serde::de::Error::custom("serial must be 16 bytes"))?;
        Ok(Serial(arr))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validity {
    pub not_before: SimTime,
    pub not_after: SimTime,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneTimeCertificate {
    pub public_key: EncryptionPublicKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify_key: Option<VerifyingKeyBytes>,
    pub validity: Validity,
    pub serial: Serial,
    pub ca_signature: SignatureBytes,
}

impl OneTimeCertificate {
    pub fn tbs_bytes(&self) -> Vec<u8> {
        tbs_bytes(
            &self.public_key,
            self.verify_key.as_ref(),
            &self.validity,
            &self.serial,
        )
    }

    /// Full canonical encoding: to-be-signed bytes followed by the signature.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.tbs_bytes();
        out.extend_from_slice(&self.ca_signature.0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let rest = bytes.strip_prefix(CERT_MAGIC.as_slice())?;
        let (pk, rest) = split::<32>(rest)?;
        let (flag, rest) = rest.split_first()?;
        let (verify_key, rest) = match flag {
            0 => (None, rest),
            1 => {
                let (vk, rest) = split::<32>(rest)?;
                (Some(VerifyingKeyBytes(vk)), rest)
            }
            _ => return None,
        };
        let (nb, rest) = split::<8>(rest)?;
        let (na, rest) = split::<8>(rest)?;
        let (serial, rest) = split::<16>(rest)?;
        let (sig, rest) = split::<64>(rest)?;
        if !rest.is_empty() {
            return None;
        }
        Some(Self {
            public_key: EncryptionPublicKey(pk),
            verify_key,
            validity: Validity {
                not_before: u64::from_be_bytes(nb),
                not_after: u64::from_be_bytes(na),
            },
            serial: Serial(serial),
            ca_signature: SignatureBytes(sig),
        })
    }
}

fn split<const N: usize>(b: &[u8]) -> Option<([u8; N], &[u8])> {
    if b.len() < N {
        return None;
    }
    let (head, tail) = b.split_at(N);
    Some((head.try_into().ok()?, tail))
}

fn tbs_bytes(
    pk: &EncryptionPublicKey,
    vk: Option<&VerifyingKeyBytes>,
    validity: &Validity,
    serial: &Serial,
) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 32 + 33 + 16 + 16);
    out.extend_from_slice(CERT_MAGIC);
    out.extend_from_slice(&pk.0);
    match vk {
        Some(vk) => {
            out.push(1);
            out.extend_from_slice(&vk.0);
        }
        None => out.push(0),
    }
    out.extend_from_slice(&validity.not_before.to_be_bytes());
    out.extend_from_slice(&validity.not_after.to_be_bytes());
    out.extend_from_slice(&serial.0);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum CertRejection {
    #[error("certificate signature does not verify against the trust root")]
    BadSignature,
    #[error("certificate expired")]
    Expired,
    #[error("certificate not yet valid")]
    NotYetValid,
}

/// Single-hop path validation: CA root directly over the one-time cert.
pub fn validate_cert(
    cert: &OneTimeCertificate,
    trust_root: &VerifyingKeyBytes,
    now: SimTime,
) -> Result<(), CertRejection> {
    if !verify_signature(trust_root, &cert.tbs_bytes(), &cert.ca_signature) {
        return Err(CertRejection::BadSignature);
    }
    if now < cert.validity.not_before {
        return Err(CertRejection::NotYetValid);
    }
    if now > cert.validity.not_after {
        return Err(CertRejection::Expired);
    }
    Ok(())
}

/// Secret shared out of band with every enrolled SP and WS client. Proves
/// federation membership to the CA without saying which member is asking.
#[derive(Clone)]
pub struct EnrollmentKey(pub [u8; 32]);

impl fmt::Debug for EnrollmentKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("EnrollmentKey([REDACTED])")
    }
}

type HmacSha256 = Hmac<Sha256>;

impl EnrollmentKey {
    fn mac(&self, pk: &EncryptionPublicKey, vk: Option<&VerifyingKeyBytes>) -> HmacSha256 {
        let mut mac = HmacSha256::new_from_slice(&self.0).expect("HMAC takes any key length");
        mac.update(b"pefim-cert-request-v1");
        mac.update(&pk.0);
        if let Some(vk) = vk {
            mac.update(&vk.0);
        }
        mac
    }

    pub fn prove(&self, pk: &EncryptionPublicKey, vk: Option<&VerifyingKeyBytes>) -> [u8; 32] {
        self.mac(pk, vk).finalize().into_bytes().into()
    }

    fn check(&self, req: &CertRequest) -> bool {
        self.mac(&req.public_key, req.verify_key.as_ref())
            .verify_slice(&req.enrollment_proof)
            .is_ok()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertRequest {
    pub public_key: EncryptionPublicKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify_key: Option<VerifyingKeyBytes>,
    #[serde(with = "hex_32")]
    pub enrollment_proof: [u8; 32],
}

impl CertRequest {
    pub fn new(
        key: &EnrollmentKey,
        public_key: EncryptionPublicKey,
        verify_key: Option<VerifyingKeyBytes>,
    ) -> Self {
        let enrollment_proof = key.prove(&public_key, verify_key.as_ref());
        Self {
            public_key,
            verify_key,
            enrollment_proof,
        }
    }
}

mod hex_32 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let raw = hex::decode(&s).map_err(serde::de::Error::custom)?;
        raw.try_into()
            .map_err(|_| serde::de::Error::custom("expected 32 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CaError {
    #[error("requester is not an enrolled federation member")]
    UnauthorizedRequester,
}

/// What the CA keeps about an issuance. Deliberately nothing else.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuanceRecord {
    pub serial: Serial,
    pub issued_at: SimTime,
}

pub struct CertificateAuthority {
    signing_key: SigningKey,
    enrollment: EnrollmentKey,
    validity_secs: u64,
    serials: BTreeSet<Serial>,
    log: Vec<IssuanceRecord>,
}

impl CertificateAuthority {
    pub fn new(signing_key: SigningKey, enrollment: EnrollmentKey, validity_secs: u64) -> Self {
        Self {
            signing_key,
            enrollment,
            validity_secs,
            serials: BTreeSet::new(),
            log: Vec::new(),
        }
    }

    pub fn trust_root(&self) -> VerifyingKeyBytes {
        self.signing_key.verifying_key()
    }

    pub fn issuance_log(&self) -> &[IssuanceRecord] {
        &self.log
    }

    pub fn issue<R: RngCore + CryptoRng>(
        &mut self,
        req: &CertRequest,
        now: SimTime,
        rng: &mut R,
    ) -> Result<OneTimeCertificate, CaError> {
        if !self.enrollment.check(req) {
            return Err(CaError::UnauthorizedRequester);
        }
        let serial = loop {
            let s = Serial::random(rng);
            if self.serials.insert(s) {
                break s;
            }
        };
        let validity = Validity {
            not_before: now,
            not_after: now + self.validity_secs,
        };
        let tbs = tbs_bytes(&req.public_key, req.verify_key.as_ref(), &validity, &serial);
        let ca_signature = self.signing_key.sign(&tbs);
        self.log.push(IssuanceRecord {
            serial,
            issued_at: now,
        });
        Ok(OneTimeCertificate {
            public_key: req.public_key,
            verify_key: req.verify_key,
            validity,
            serial,
            ca_signature,
        })
    }
}
