//! Wire messages.
//!
//! Each variant is one hop of one flow. Signed bodies travel as
//! [`SignedMessage`] whose `body` is the canonical JSON of the body struct
//! below; unsigned variants carry no security-relevant claims.
//!
//! Transcripts render messages with `serde_json`, which keeps struct field
//! order, so the rendering is stable.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::consent::ConsentMode;
use crate::crypto::{
    CertRequest, ContentKey, EncryptedPayload, OneTimeCertificate, SignatureBytes, SignedMessage,
};
use crate::federation::{EntityId, NameIdPolicy};
use crate::idmap::TidValue;
use crate::messaging::RelayedMessage;
use crate::wstrust::Confirmation;
use crate::SimTime;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthnRequestBody {
    pub request_id: String,
    /// Always a proxy id. Never a member SP.
    pub issuer: EntityId,
    pub destination: EntityId,
    pub onetime_cert: OneTimeCertificate,
    pub nameid_policy: NameIdPolicy,
    /// `<idp id>#<nonce>`: IdP chosen at discovery plus SP correlation.
    pub relay_token: String,
    pub issue_instant: SimTime,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthnStatement {
    pub method: String,
    pub instant: SimTime,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionEnvelope {
    pub assertion_id: String,
    pub issuer: EntityId,
    /// Clear text so the broker can map it.
    pub subject_tid: TidValue,
    pub audience: EntityId,
    pub issue_instant: SimTime,
    pub in_response_to: String,
    pub encrypted_attributes: EncryptedPayload,
    pub authn_statement: AuthnStatement,
    /// IdP that produced the payload and its signature over it. Survives
    /// the broker's re-signing.
    pub payload_issuer: EntityId,
    pub payload_signature: SignatureBytes,
}

/// Bytes the IdP signs to vouch for a payload.
pub fn payload_tbs(in_response_to: &str, payload: &EncryptedPayload) -> Vec<u8> {
    let mut out = b"pefim-payload-sig-v1".to_vec();
    out.extend_from_slice(&(in_response_to.len() as u32).to_be_bytes());
    out.extend_from_slice(in_response_to.as_bytes());
    out.extend_from_slice(&payload.canonical_bytes());
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentQueryBody {
    pub request_id: String,
    pub tid1: TidValue,
    pub requested: BTreeSet<String>,
}

/// The broker's answer to a consent query. `record_id` is set iff granted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentVoucherBody {
    pub request_id: String,
    pub record_id: Option<u64>,
    pub denial: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentifyRequestBody {
    pub request_id: String,
    pub issuer: EntityId,
    pub destination: EntityId,
    pub issue_instant: SimTime,
}

/// Authentication-only statement: who, pseudonymously, with no attributes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityStatementBody {
    pub statement_id: String,
    pub issuer: EntityId,
    pub subject_tid: TidValue,
    pub audience: EntityId,
    pub in_response_to: String,
    pub issue_instant: SimTime,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConsentSubject {
    /// Consent for the group the SP belongs to.
    Sp { sp: EntityId },
    Link { sp_a: EntityId, sp_b: EntityId },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkRequestBody {
    pub request_id: String,
    pub tid2: TidValue,
    pub peer_sp: EntityId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvertLinkBody {
    pub request_id: String,
    pub tid3: TidValue,
}

/// Harness instructions. Never sent between actors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Control {
    StartWebSso {
        sp: EntityId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        password_override: Option<String>,
    },
    StartConsent {
        subject: ConsentSubject,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mode: Option<ConsentMode>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        attributes: Option<BTreeSet<String>>,
    },
    StartWsTrust {
        sp: EntityId,
        confirmation: Confirmation,
        #[serde(default)]
        swap_key: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        present_to: Option<EntityId>,
    },
    SendMail {
        to_tid2: TidValue,
        subject: String,
        body: String,
    },
    Link {
        tid2: TidValue,
        peer_sp: EntityId,
        payload: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reply: Option<String>,
    },
    SpFaults {
        #[serde(default)]
        reuse_cert: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        claim_proxy: Option<EntityId>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Message {
    Control(Control),
    /// Front-channel hop: the receiving user agent forwards `message` to `to`.
    Redirect {
        to: String,
        message: Box<Message>,
    },

    SsoStart,
    DiscoveryRequest {
        session: String,
        return_to: EntityId,
        proxy: EntityId,
        required_attributes: BTreeSet<String>,
    },
    DiscoveryPrompt {
        session: String,
    },
    DiscoverySelect {
        session: String,
        hint: String,
    },
    DiscoveryResponse {
        session: String,
        idp: EntityId,
    },
    CertIssue {
        nonce: String,
        request: CertRequest,
    },
    CertIssued {
        nonce: String,
        cert: OneTimeCertificate,
    },
    CertDenied {
        nonce: String,
    },
    AuthnRequest(SignedMessage),
    LoginPrompt {
        request_id: String,
    },
    Credentials {
        request_id: String,
        username: String,
        password: String,
    },
    ConsentQuery(SignedMessage),
    ConsentVoucher(SignedMessage),
    Response(SignedMessage),
    LoginComplete {
        subject: TidValue,
    },

    ConsentStart {
        subject: ConsentSubject,
        idp: EntityId,
        mode: Option<ConsentMode>,
        attributes: Option<BTreeSet<String>>,
    },
    IdentifyRequest(SignedMessage),
    IdentityStatement(SignedMessage),
    ConsentGranted {
        record_id: u64,
    },

    MailSubmit(SignedMessage),
    MailRelay(SignedMessage),
    MailDeliver(RelayedMessage),

    LinkRequest(SignedMessage),
    LinkGranted {
        request_id: String,
        tid2: TidValue,
        tid3: TidValue,
    },
    LinkMessage {
        tid3: TidValue,
        payload: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reply: Option<String>,
    },
    ConvertLink(SignedMessage),
    LinkConverted {
        request_id: String,
        tid3: TidValue,
        tid2: TidValue,
    },

    TokenRequest(SignedMessage),
    ProxiedRst(SignedMessage),
    RstResponse(SignedMessage),
    TokenResponse {
        request_id: String,
        token: SignedMessage,
    },
    WsInvoke {
        token: SignedMessage,
        content_key: ContentKey,
        body: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        body_signature: Option<SignatureBytes>,
    },
    WsResult {
        token_id: String,
        status: String,
    },
}

impl Message {
    /// Short name used in transcripts.
    pub fn kind(&self) -> &'static str {
        use Message::*;
        match self {
            Control(_) => "Control",
            Redirect { .. } => "Redirect",
            SsoStart => "SsoStart",
            DiscoveryRequest { .. } => "DiscoveryRequest",
            DiscoveryPrompt { .. } => "DiscoveryPrompt",
            DiscoverySelect { .. } => "DiscoverySelect",
            DiscoveryResponse { .. } => "DiscoveryResponse",
            CertIssue { .. } => "CertIssue",
            CertIssued { .. } => "CertIssued",
            CertDenied { .. } => "CertDenied",
            AuthnRequest(_) => "AuthnRequest",
            LoginPrompt { .. } => "LoginPrompt",
            Credentials { .. } => "Credentials",
            ConsentQuery(_) => "ConsentQuery",
            ConsentVoucher(_) => "ConsentVoucher",
            Response(_) => "Response",
            LoginComplete { .. } => "LoginComplete",
            ConsentStart { .. } => "ConsentStart",
            IdentifyRequest(_) => "IdentifyRequest",
            IdentityStatement(_) => "IdentityStatement",
            ConsentGranted { .. } => "ConsentGranted",
            MailSubmit(_) => "MailSubmit",
            MailRelay(_) => "MailRelay",
            MailDeliver(_) => "MailDeliver",
            LinkRequest(_) => "LinkRequest",
            LinkGranted { .. } => "LinkGranted",
            LinkMessage { .. } => "LinkMessage",
            ConvertLink(_) => "ConvertLink",
            LinkConverted { .. } => "LinkConverted",
            TokenRequest(_) => "TokenRequest",
            ProxiedRst(_) => "ProxiedRst",
            RstResponse(_) => "RstResponse",
            TokenResponse { .. } => "TokenResponse",
            WsInvoke { .. } => "WsInvoke",
            WsResult { .. } => "WsResult",
        }
    }

    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("messages serialize")
    }
}
