use thiserror::Error;

use crate::consent::ConsentError;
use crate::crypto::{CaError, CertRejection, PayloadError, SignatureError};
use crate::federation::FederationError;
use crate::idmap::TidError;
use crate::messaging::RewriteError;

/// Every way a protocol step can refuse to proceed.
///
/// Actors return these from their handlers; the simulator records the
/// [`FlowError::code`] in the outcome log so scenarios can assert on it.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FlowError {
    #[error("service provider is not in a proxy group")]
    Ungrouped,
    #[error("one-time certificate could not be obtained")]
    CertIssuanceFailed,
    #[error("one-time key material was offered for a second transaction")]
    CertReuse,
    #[error("signature does not verify")]
    BadSignature,
    #[error("signer is not in the federation registry")]
    UnknownSigner,
    #[error("signer is a federation SP but not a member of the claimed proxy group")]
    UnknownGroupMember,
    #[error("certificate rejected: {0:?}")]
    InvalidCert(CertRejection),
    #[error("principal or client authentication failed")]
    AuthnFailed,
    #[error("no consent covers this release")]
    ConsentMissing,
    #[error("requested attributes exceed the consented set")]
    AttributeSetExceedsConsent,
    #[error("response does not correlate with any pending request")]
    UnknownCorrelation,
    #[error("assertion or token was already consumed")]
    ReplayDetected,
    #[error("audience restriction names another party")]
    AudienceMismatch,
    #[error("assertion is outside the freshness window")]
    StaleAssertion,
    #[error("payload could not be decrypted")]
    DecryptionFailure,
    #[error("response does not pair with an outstanding request")]
    UnpairedResponse,
    #[error("discovery hint matches no identity provider")]
    UnknownPrincipalHint,
    #[error("holder-of-key confirmation failed")]
    KeyConfirmationFailed,
    #[error("local part cannot be resolved at this hop")]
    UnresolvableLocalPart,
    #[error("address domain is not served by this hop")]
    WrongDomainForHop,
    #[error("targeted identifier was never issued by this owner")]
    UnknownTid,
    #[error("TID1 was never issued to this broker")]
    UnknownTid1,
    #[error("both link ends name the same SP")]
    SameSp,
    #[error("link conversion requested by an SP that is not the link target")]
    NotLinkTarget,
    #[error("link consent cannot be revoked")]
    LinkIrrevocable,
    #[error("consent target is not known to the registry")]
    UnknownTarget,
    #[error("no such consent record")]
    UnknownRecord,
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unexpected message: {0}")]
    Unexpected(String),
}

impl FlowError {
    /// Stable name used in transcripts, outcomes and scenario expectations.
    pub fn code(&self) -> &'static str {
        use FlowError::*;
        match self {
            Ungrouped => "Ungrouped",
            CertIssuanceFailed => "CertIssuanceFailed",
            CertReuse => "CertReuse",
            BadSignature => "BadSignature",
            UnknownSigner => "UnknownSigner",
            UnknownGroupMember => "UnknownGroupMember",
            InvalidCert(_) => "InvalidCert",
            AuthnFailed => "AuthnFailed",
            ConsentMissing => "ConsentMissing",
            AttributeSetExceedsConsent => "AttributeSetExceedsConsent",
            UnknownCorrelation => "UnknownCorrelation",
            ReplayDetected => "ReplayDetected",
            AudienceMismatch => "AudienceMismatch",
            StaleAssertion => "StaleAssertion",
            DecryptionFailure => "DecryptionFailure",
            UnpairedResponse => "UnpairedResponse",
            UnknownPrincipalHint => "UnknownPrincipalHint",
            KeyConfirmationFailed => "KeyConfirmationFailed",
            UnresolvableLocalPart => "UnresolvableLocalPart",
            WrongDomainForHop => "WrongDomainForHop",
            UnknownTid => "UnknownTid",
            UnknownTid1 => "UnknownTid1",
            SameSp => "SameSp",
            NotLinkTarget => "NotLinkTarget",
            LinkIrrevocable => "LinkIrrevocable",
            UnknownTarget => "UnknownTarget",
            UnknownRecord => "UnknownRecord",
            UnknownEntity(_) => "UnknownEntity",
            Malformed(_) => "Malformed",
            Unexpected(_) => "Unexpected",
        }
    }
}

impl From<SignatureError> for FlowError {
    fn from(e: SignatureError) -> Self {
        match e {
            SignatureError::UnknownSigner(_) => FlowError::UnknownSigner,
            SignatureError::BadSignature => FlowError::BadSignature,
            SignatureError::Malformed(m) => FlowError::Malformed(m),
        }
    }
}

impl From<CertRejection> for FlowError {
    fn from(e: CertRejection) -> Self {
        FlowError::InvalidCert(e)
    }
}

impl From<PayloadError> for FlowError {
    fn from(e: PayloadError) -> Self {
        match e {
            PayloadError::InvalidCert(r) => FlowError::InvalidCert(r),
            PayloadError::DecryptionFailure => FlowError::DecryptionFailure,
        }
    }
}

impl From<CaError> for FlowError {
    fn from(_: CaError) -> Self {
        FlowError::CertIssuanceFailed
    }
}

impl From<TidError> for FlowError {
    fn from(e: TidError) -> Self {
        match e {
            TidError::EmptyParent | TidError::ScopeMismatch => FlowError::Malformed(e.to_string()),
            TidError::UnknownTid => FlowError::UnknownTid,
            TidError::UnknownTid1 => FlowError::UnknownTid1,
            TidError::SameSp => FlowError::SameSp,
            TidError::NotLinkTarget => FlowError::NotLinkTarget,
        }
    }
}

impl From<ConsentError> for FlowError {
    fn from(e: ConsentError) -> Self {
        match e {
            ConsentError::UnknownTarget(_) => FlowError::UnknownTarget,
            ConsentError::ConsentMissing => FlowError::ConsentMissing,
            ConsentError::AttributeSetExceedsConsent => FlowError::AttributeSetExceedsConsent,
            ConsentError::UnknownRecord(_) => FlowError::UnknownRecord,
            ConsentError::LinkIrrevocable(_) => FlowError::LinkIrrevocable,
        }
    }
}

impl From<RewriteError> for FlowError {
    fn from(e: RewriteError) -> Self {
        match e {
            RewriteError::UnresolvableLocalPart(_) => FlowError::UnresolvableLocalPart,
            RewriteError::WrongDomainForHop { .. } => FlowError::WrongDomainForHop,
            RewriteError::BadAddress(a) => FlowError::Malformed(a),
        }
    }
}

impl From<FederationError> for FlowError {
    fn from(e: FederationError) -> Self {
        match e {
            FederationError::Ungrouped(_) => FlowError::Ungrouped,
            FederationError::UnknownEntity(id) | FederationError::NotAnSp(id) => {
                FlowError::UnknownEntity(id.to_string())
            }
            other => FlowError::Malformed(other.to_string()),
        }
    }
}

/// Problems with scenario or federation files. Always names where.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {message}")]
    Syntax { path: String, message: String },
    #[error("{field}: {message}")]
    Field { field: String, message: String },
}

impl ConfigError {
    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Field {
            field: field.into(),
            message: message.into(),
        }
    }
}
