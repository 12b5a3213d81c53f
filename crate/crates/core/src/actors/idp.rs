use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crypto::{
    encrypt_payload, sign_message, validate_cert, EncryptionSecretKey, OneTimeCertificate,
    PayloadCipher, SignedMessage, SigningKey, VerifyingKeyBytes,
};
use crate::error::FlowError;
use crate::federation::{EntityId, FederationRegistry, Role};
use crate::idmap::{DerivationKey, Tier, TidIssuer, TidValue};
use crate::message::{
    payload_tbs, AssertionEnvelope, AuthnRequestBody, AuthnStatement, ConsentQueryBody,
    ConsentVoucherBody, IdentifyRequestBody, IdentityStatementBody, Message,
};
use crate::messaging::{idp_rewrite, RelayedMessage};
use crate::observe::{ElementKind, ObservationLedger};
use crate::sim::{Actor, Ctx, Outcome, SimEnvelope};
use crate::wstrust::{open_credentials, ProxiedRstBody};
use crate::Attributes;

use super::{actor_plumbing, mailbox_id, new_token, sb_id, verify_direct};

/// A principal enrolled at an IdP.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrincipalRecord {
    pub principal_id: String,
    pub reference_id: String,
    pub password: String,
    pub email: String,
    pub attributes: Attributes,
}

/// Stable IdP-internal handle for `principal` at `idp`.
pub fn reference_id_for(federation_seed: u64, idp: &EntityId, principal: &str) -> String {
    let mut h = Sha256::new();
    h.update(b"pefim-refid-v1");
    h.update(federation_seed.to_be_bytes());
    h.update((idp.as_str().len() as u32).to_be_bytes());
    h.update(idp.as_str());
    h.update(principal.as_bytes());
    format!("ref-{}", hex::encode(&h.finalize()[..12]))
}

/// What an authentication is for once the principal has logged in.
#[derive(Clone, Debug)]
enum Purpose {
    Sso {
        proxy: EntityId,
        cert: OneTimeCertificate,
    },
    Identify,
    Ws {
        proxy: EntityId,
        cert: OneTimeCertificate,
    },
}

#[derive(Clone, Debug)]
struct Pending {
    request_id: String,
    purpose: Purpose,
}

/// A logged-in principal whose release waits on a consent voucher.
#[derive(Clone, Debug)]
struct AwaitingConsent {
    pending: Pending,
    principal: String,
    tid1: TidValue,
    reply_to: String,
}

pub struct IdentityProvider {
    ledger: ObservationLedger,
    id: EntityId,
    registry: Arc<FederationRegistry>,
    signing: SigningKey,
    encryption: EncryptionSecretKey,
    tids: TidIssuer,
    principals: BTreeMap<String, PrincipalRecord>,
    sources: BTreeMap<String, BTreeSet<String>>,
    cipher: Box<dyn PayloadCipher>,
    rng: ChaCha20Rng,
    seen_requests: BTreeSet<String>,
    logins: BTreeMap<String, Pending>,
    awaiting: BTreeMap<String, AwaitingConsent>,
}

impl IdentityProvider {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: &EntityId,
        registry: Arc<FederationRegistry>,
        signing: SigningKey,
        encryption: EncryptionSecretKey,
        derivation: DerivationKey,
        principals: Vec<PrincipalRecord>,
        sources: BTreeMap<String, BTreeSet<String>>,
        cipher: Box<dyn PayloadCipher>,
        rng: ChaCha20Rng,
    ) -> Self {
        Self {
            ledger: ObservationLedger::new(id.as_str(), "IDP"),
            id: id.clone(),
            registry,
            signing,
            encryption,
            tids: TidIssuer::new(id.clone(), derivation),
            principals: principals
                .into_iter()
                .map(|p| (p.principal_id.clone(), p))
                .collect(),
            sources,
            cipher,
            rng,
            seen_requests: BTreeSet::new(),
            logins: BTreeMap::new(),
            awaiting: BTreeMap::new(),
        }
    }

    pub fn tids(&self) -> &TidIssuer {
        &self.tids
    }

    pub fn principals(&self) -> impl Iterator<Item = &PrincipalRecord> {
        self.principals.values()
    }

    fn trust_root(&self) -> Result<VerifyingKeyBytes, FlowError> {
        self.registry
            .ca_trust_root
            .ok_or_else(|| FlowError::UnknownEntity("certificate authority".into()))
    }

    fn fresh_request(&mut self, request_id: &str) -> Result<(), FlowError> {
        if !self.seen_requests.insert(request_id.to_string()) {
            return Err(FlowError::ReplayDetected);
        }
        Ok(())
    }

    fn observe_request(&mut self, ctx: &Ctx, proxy: &EntityId, cert: &OneTimeCertificate) {
        let now = ctx.now();
        self.ledger
            .record(now, ElementKind::SpIdentity, proxy.as_str(), ctx.tx());
        self.ledger
            .record(now, ElementKind::EncKeyPublic, cert.public_key.to_b64(), ctx.tx());
        let names = self.registry.release_policy(proxy).cloned().unwrap_or_default();
        for name in names {
            self.ledger
                .record_about(now, ElementKind::AttributeName, name, ctx.tx(), proxy.as_str());
        }
    }

    fn authenticate(&mut self, ctx: &Ctx, username: &str, password: &str) -> Result<TidValue, FlowError> {
        let record = match self.principals.get(username) {
            Some(r) if r.password == password => r,
            _ => return Err(FlowError::AuthnFailed),
        };
        let refid = record.reference_id.clone();
        self.ledger
            .record(ctx.now(), ElementKind::UserIdentity, username, ctx.tx());
        let tid1 = self.tids.derive_tid(&refid, &[sb_id(&self.registry)], Tier::Tid1)?.value;
        self.ledger
            .record(ctx.now(), ElementKind::Pseudonym, tid1.as_str(), ctx.tx());
        Ok(tid1)
    }

    /// Continue after login: ask for consent, issue an identity statement or
    /// release straight away.
    fn after_login(
        &mut self,
        ctx: &mut Ctx,
        pending: Pending,
        principal: String,
        tid1: TidValue,
        reply_to: String,
    ) -> Result<(), FlowError> {
        match &pending.purpose {
            Purpose::Identify => {
                let body = IdentityStatementBody {
                    statement_id: new_token(&mut self.rng, "stmt"),
                    issuer: self.id.clone(),
                    subject_tid: tid1,
                    audience: sb_id(&self.registry),
                    in_response_to: pending.request_id.clone(),
                    issue_instant: ctx.now(),
                };
                let signed = sign_message(&body, &self.id, &self.signing);
                ctx.send(
                    reply_to,
                    Message::Redirect {
                        to: sb_id(&self.registry).to_string(),
                        message: Box::new(Message::IdentityStatement(signed)),
                    },
                );
                Ok(())
            }
            Purpose::Sso { proxy, .. } | Purpose::Ws { proxy, .. } => {
                if self.registry.policy.consent_gated() {
                    let requested = self.requested(proxy);
                    let body = ConsentQueryBody {
                        request_id: pending.request_id.clone(),
                        tid1: tid1.clone(),
                        requested,
                    };
                    let signed = sign_message(&body, &self.id, &self.signing);
                    ctx.send(sb_id(&self.registry).to_string(), Message::ConsentQuery(signed));
                    self.awaiting.insert(
                        pending.request_id.clone(),
                        AwaitingConsent {
                            pending,
                            principal,
                            tid1,
                            reply_to,
                        },
                    );
                    Ok(())
                } else {
                    self.release(ctx, &pending, &principal, tid1, reply_to, None)
                }
            }
        }
    }

    fn requested(&self, proxy: &EntityId) -> BTreeSet<String> {
        self.registry.release_policy(proxy).cloned().unwrap_or_default()
    }

    fn release(
        &mut self,
        ctx: &mut Ctx,
        pending: &Pending,
        principal: &str,
        tid1: TidValue,
        reply_to: String,
        consent_record: Option<u64>,
    ) -> Result<(), FlowError> {
        let (proxy, cert, ws) = match &pending.purpose {
            Purpose::Sso { proxy, cert } => (proxy.clone(), cert.clone(), false),
            Purpose::Ws { proxy, cert } => (proxy.clone(), cert.clone(), true),
            Purpose::Identify => unreachable!("identify flows release nothing"),
        };
        let requested = self.requested(&proxy);
        let store = &self.principals[principal].attributes;
        let attrs: Attributes = store
            .iter()
            .filter(|(k, _)| requested.contains(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let now = ctx.now();
        for (name, value) in &attrs {
            self.ledger
                .record_about(now, ElementKind::AttributeName, name.as_str(), ctx.tx(), proxy.as_str());
            self.ledger
                .record_about(now, ElementKind::AttributeValue, value.as_str(), ctx.tx(), proxy.as_str());
        }
        let trust_root = self.trust_root()?;
        let payload = encrypt_payload(self.cipher.as_ref(), &attrs, &cert, &trust_root, now, &mut self.rng)?;
        let payload_signature = self.signing.sign(&payload_tbs(&pending.request_id, &payload));
        let assertion = AssertionEnvelope {
            assertion_id: new_token(&mut self.rng, "assertion"),
            issuer: self.id.clone(),
            subject_tid: tid1,
            audience: proxy.clone(),
            issue_instant: now,
            in_response_to: pending.request_id.clone(),
            encrypted_attributes: payload,
            authn_statement: AuthnStatement {
                method: "password".into(),
                instant: now,
            },
            payload_issuer: self.id.clone(),
            payload_signature,
        };
        let names: BTreeSet<String> = attrs.keys().cloned().collect();
        let sources = self
            .sources
            .iter()
            .filter(|(_, supplied)| !supplied.is_disjoint(&names))
            .map(|(s, _)| s.clone())
            .collect();
        ctx.outcome(Outcome::Released {
            tx: ctx.tx_owned(),
            idp: self.id.clone(),
            proxy,
            names,
            sources,
            consent_record,
        });
        let signed = sign_message(&assertion, &self.id, &self.signing);
        if ws {
            ctx.send(reply_to, Message::RstResponse(signed));
        } else {
            ctx.send(
                reply_to,
                Message::Redirect {
                    to: sb_id(&self.registry).to_string(),
                    message: Box::new(Message::Response(signed)),
                },
            );
        }
        Ok(())
    }

    fn on_authn_request(&mut self, env: &SimEnvelope, msg: &SignedMessage, ctx: &mut Ctx) -> Result<(), FlowError> {
        verify_direct(msg, &self.registry, Role::Sb)?;
        let body: AuthnRequestBody = msg.open()?;
        if body.destination != self.id {
            return Err(FlowError::AudienceMismatch);
        }
        if !self.registry.is_proxy(&body.issuer) {
            return Err(FlowError::UnknownGroupMember);
        }
        validate_cert(&body.onetime_cert, &self.trust_root()?, ctx.now())?;
        self.fresh_request(&body.request_id)?;
        self.observe_request(ctx, &body.issuer, &body.onetime_cert);
        self.logins.insert(
            body.request_id.clone(),
            Pending {
                request_id: body.request_id.clone(),
                purpose: Purpose::Sso {
                    proxy: body.issuer,
                    cert: body.onetime_cert,
                },
            },
        );
        ctx.send(env.from.clone(), Message::LoginPrompt { request_id: body.request_id });
        Ok(())
    }

    fn on_identify_request(&mut self, env: &SimEnvelope, msg: &SignedMessage, ctx: &mut Ctx) -> Result<(), FlowError> {
        verify_direct(msg, &self.registry, Role::Sb)?;
        let body: IdentifyRequestBody = msg.open()?;
        if body.destination != self.id {
            return Err(FlowError::AudienceMismatch);
        }
        self.fresh_request(&body.request_id)?;
        self.logins.insert(
            body.request_id.clone(),
            Pending {
                request_id: body.request_id.clone(),
                purpose: Purpose::Identify,
            },
        );
        ctx.send(env.from.clone(), Message::LoginPrompt { request_id: body.request_id });
        Ok(())
    }

    fn on_voucher(&mut self, msg: &SignedMessage, ctx: &mut Ctx) -> Result<(), FlowError> {
        verify_direct(msg, &self.registry, Role::Sb)?;
        let body: ConsentVoucherBody = msg.open()?;
        let waiting = self
            .awaiting
            .remove(&body.request_id)
            .ok_or(FlowError::UnknownCorrelation)?;
        match (body.record_id, body.denial.as_deref()) {
            (Some(record), None) => self.release(
                ctx,
                &waiting.pending,
                &waiting.principal,
                waiting.tid1,
                waiting.reply_to,
                Some(record),
            ),
            (_, Some("AttributeSetExceedsConsent")) => Err(FlowError::AttributeSetExceedsConsent),
            _ => Err(FlowError::ConsentMissing),
        }
    }

    fn on_proxied_rst(&mut self, env: &SimEnvelope, msg: &SignedMessage, ctx: &mut Ctx) -> Result<(), FlowError> {
        verify_direct(msg, &self.registry, Role::Sb)?;
        let body: ProxiedRstBody = msg.open()?;
        let rst = body.rst;
        if rst.idp != self.id {
            return Err(FlowError::AudienceMismatch);
        }
        if !self.registry.is_proxy(&body.requester) {
            return Err(FlowError::UnknownGroupMember);
        }
        validate_cert(&rst.short_term_cert, &self.trust_root()?, ctx.now())?;
        self.fresh_request(&rst.request_id)?;
        let (username, password) =
            open_credentials(&rst.credentials, &self.encryption).map_err(|_| FlowError::AuthnFailed)?;
        self.observe_request(ctx, &body.requester, &rst.short_term_cert);
        let tid1 = self.authenticate(ctx, &username, &password)?;
        let pending = Pending {
            request_id: rst.request_id.clone(),
            purpose: Purpose::Ws {
                proxy: body.requester,
                cert: rst.short_term_cert,
            },
        };
        self.after_login(ctx, pending, username, tid1, env.from.clone())
    }

    fn on_mail_relay(&mut self, msg: &SignedMessage, ctx: &mut Ctx) -> Result<(), FlowError> {
        verify_direct(msg, &self.registry, Role::Sb)?;
        let mut mail: RelayedMessage = msg.open()?;
        let domain = self
            .registry
            .entity(&self.id)
            .and_then(|d| d.endpoint("mail"))
            .ok_or(FlowError::WrongDomainForHop)?
            .to_string();
        let by_ref: BTreeMap<&str, &str> = self
            .principals
            .values()
            .map(|p| (p.reference_id.as_str(), p.email.as_str()))
            .collect();
        let to = idp_rewrite(&self.tids, &domain, &mail.to, |r| by_ref.get(r).map(|e| e.to_string()))?;
        self.ledger
            .record(ctx.now(), ElementKind::UserIdentity, to.to_string(), ctx.tx());
        mail.to = to;
        mail.hop_trace.push("IDP".into());
        ctx.send(mailbox_id(&mail.to.domain), Message::MailDeliver(mail));
        Ok(())
    }
}

impl Actor for IdentityProvider {
    actor_plumbing!();

    fn handle(&mut self, env: &SimEnvelope, ctx: &mut Ctx) -> Result<(), FlowError> {
        match &env.payload {
            Message::AuthnRequest(msg) => self.on_authn_request(env, msg, ctx),
            Message::IdentifyRequest(msg) => self.on_identify_request(env, msg, ctx),
            Message::Credentials {
                request_id,
                username,
                password,
            } => {
                let pending = self
                    .logins
                    .remove(request_id)
                    .ok_or(FlowError::UnknownCorrelation)?;
                let tid1 = self.authenticate(ctx, username, password)?;
                self.after_login(ctx, pending, username.clone(), tid1, env.from.clone())
            }
            Message::ConsentVoucher(msg) => self.on_voucher(msg, ctx),
            Message::ProxiedRst(msg) => self.on_proxied_rst(env, msg, ctx),
            Message::MailRelay(msg) => self.on_mail_relay(msg, ctx),
            other => Err(FlowError::Unexpected(other.kind().into())),
        }
    }
}
