use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::keys::{verify_signature, SignatureBytes, SigningKey, VerifyingKeyBytes};
use crate::federation::{EntityId, FederationRegistry};

/// A canonical message body with a detached signature by a static key.
///
/// `signer_id` names the key to check against in metadata. When it names an
/// SP proxy, the verifier tries the static keys of the proxy's members; the
/// body then says nothing about which member signed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedMessage {
    pub body: String,
    pub signer_id: EntityId,
    pub signature: SignatureBytes,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SignatureError {
    #[error("signer {0} is not in the federation registry")]
    UnknownSigner(EntityId),
    #[error("signature does not verify")]
    BadSignature,
    #[error("message body does not parse: {0}")]
    Malformed(String),
}

pub fn canonical_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("message types serialize")
}

pub fn sign_message<T: Serialize>(body: &T, signer_id: &EntityId, key: &SigningKey) -> SignedMessage {
    let body = canonical_json(body);
    let signature = key.sign(body.as_bytes());
    SignedMessage {
        body,
        signer_id: signer_id.clone(),
        signature,
    }
}

impl SignedMessage {
    pub fn verify_with_key(&self, key: &VerifyingKeyBytes) -> bool {
        verify_signature(key, self.body.as_bytes(), &self.signature)
    }

    pub fn open<T: DeserializeOwned>(&self) -> Result<T, SignatureError> {
        serde_json::from_str(&self.body).map_err(|e| SignatureError::Malformed(e.to_string()))
    }
}

/// Verify against registry metadata and return the entity whose key signed.
pub fn verify_message(
    msg: &SignedMessage,
    registry: &FederationRegistry,
) -> Result<EntityId, SignatureError> {
    if let Some(desc) = registry.entity(&msg.signer_id) {
        return if msg.verify_with_key(&desc.static_signing_key) {
            Ok(desc.entity_id.clone())
        } else {
            Err(SignatureError::BadSignature)
        };
    }
    if let Some(group) = registry.group(&msg.signer_id) {
        for member in &group.member_sp_ids {
            if let Some(desc) = registry.entity(member) {
                if msg.verify_with_key(&desc.static_signing_key) {
                    return Ok(member.clone());
                }
            }
        }
        return Err(SignatureError::BadSignature);
    }
    Err(SignatureError::UnknownSigner(msg.signer_id.clone()))
}
