//! Key material, one-time certificates, payload encryption and static-key
//! message signing.

pub mod cert;
pub mod keys;
pub mod payload;
pub mod signing;

pub use cert::{
    validate_cert, CaError, CertRejection, CertRequest, CertificateAuthority, EnrollmentKey,
    IssuanceRecord, OneTimeCertificate, Serial, Validity,
};
pub use keys::{
    derive_static_seed, fingerprint, generate_onetime_keypair, verify_signature,
    EncryptionPublicKey, EncryptionSecretKey, OnetimeKeypair, SignatureBytes, SigningKey,
    VerifyingKeyBytes,
};
pub use payload::{
    decrypt_payload, derive_content_key, encrypt_payload, open_with_content_key, ContentKey,
    EncryptedPayload, HybridCipher, NullCipher, PayloadCipher, PayloadError, PayloadScheme,
};
pub use signing::{canonical_json, sign_message, verify_message, SignatureError, SignedMessage};
