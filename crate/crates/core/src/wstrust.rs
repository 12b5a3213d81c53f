//! Token types for the brokered WS-Trust model.
//!
//! A WS client holds a short-term certificate carrying both an encryption key
//! and a verification key. It asks the broker's STS for a token that applies
//! to an SP; the broker hands the request on naming only the SP's proxy, the
//! IdP's STS answers with attributes encrypted to the client, and the broker
//! rewrites subject and audience for the concrete SP.

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::crypto::{
    decrypt_payload, EncryptedPayload, EncryptionPublicKey, EncryptionSecretKey, HybridCipher,
    OneTimeCertificate, PayloadCipher, PayloadError, Serial, SignatureBytes, VerifyingKeyBytes,
};
use crate::federation::EntityId;
use crate::idmap::TidValue;
use crate::{Attributes, SimTime};

pub const TOKEN_TYPE_SAML2: &str = "urn:oasis:names:tc:SAML:2.0:assertion";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Confirmation {
    Bearer,
    HolderOfKey,
}

/// The request for a security token. Says nothing about the SP.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rst {
    pub request_id: String,
    pub short_term_cert: OneTimeCertificate,
    pub token_type: String,
    pub idp: EntityId,
    /// Principal credentials sealed to the IdP's static encryption key.
    pub credentials: EncryptedPayload,
    pub confirmation: Confirmation,
}

/// Client to broker, signed with the short-term key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRequestBody {
    pub applies_to: EntityId,
    pub rst: Rst,
}

/// Broker to IdP, signed by the broker. `requester` is a proxy id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxiedRstBody {
    pub requester: EntityId,
    pub rst: Rst,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityToken {
    pub token_id: String,
    pub issuer: EntityId,
    pub subject_tid: TidValue,
    /// The concrete SP, set by the broker.
    pub audience: EntityId,
    pub issue_instant: SimTime,
    pub in_response_to: String,
    pub confirmation: Confirmation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confirmation_key: Option<VerifyingKeyBytes>,
    pub encrypted_attributes: EncryptedPayload,
    pub payload_issuer: EntityId,
    pub payload_signature: SignatureBytes,
}

/// Seal username and password for an IdP's static key.
pub fn seal_credentials<R: RngCore + CryptoRng>(
    username: &str,
    password: &str,
    idp_key: &EncryptionPublicKey,
    rng: &mut R,
) -> EncryptedPayload {
    let creds: Attributes = [
        ("username".to_string(), username.to_string()),
        ("password".to_string(), password.to_string()),
    ]
    .into();
    HybridCipher.seal(
        &crate::crypto::payload::encode_attributes(&creds),
        idp_key,
        Serial([0; 16]),
        rng,
    )
}

pub fn open_credentials(
    sealed: &EncryptedPayload,
    idp_secret: &EncryptionSecretKey,
) -> Result<(String, String), PayloadError> {
    let mut m = decrypt_payload(sealed, idp_secret)?;
    match (m.remove("username"), m.remove("password")) {
        (Some(u), Some(p)) => Ok((u, p)),
        _ => Err(PayloadError::DecryptionFailure),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn credentials_round_trip_only_for_idp() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let idp = EncryptionSecretKey::from_seed([7; 32]);
        let other = EncryptionSecretKey::from_seed([8; 32]);
        let sealed = seal_credentials("alice", "s3cret pass", &idp.public_key(), &mut rng);
        assert_eq!(
            open_credentials(&sealed, &idp).unwrap(),
            ("alice".to_string(), "s3cret pass".to_string())
        );
        assert!(open_credentials(&sealed, &other).is_err());
    }
}
