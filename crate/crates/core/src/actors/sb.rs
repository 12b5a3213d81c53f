use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand_chacha::ChaCha20Rng;

use crate::consent::{ConsentStore, ConsentTarget};
use crate::crypto::{
    sign_message, validate_cert, verify_message, SignatureError, SignedMessage, SigningKey,
    VerifyingKeyBytes,
};
use crate::error::FlowError;
use crate::federation::{EntityId, FederationRegistry, Role};
use crate::idmap::{DerivationKey, SbPseudonyms};
use crate::message::{
    AssertionEnvelope, AuthnRequestBody, ConsentQueryBody, ConsentSubject, ConsentVoucherBody,
    ConvertLinkBody, IdentifyRequestBody, IdentityStatementBody, LinkRequestBody, Message,
};
use crate::messaging::{sb_rewrite, RelayAddress, RelayedMessage};
use crate::observe::{link_tag, ElementKind, ObservationLedger};
use crate::sim::{Actor, Ctx, Outcome, SimEnvelope};
use crate::wstrust::{Confirmation, ProxiedRstBody, SecurityToken, TokenRequestBody};
use crate::consent::ConsentMode;

use super::{actor_plumbing, new_token, verify_direct};

/// An AuthnRequest or token request the broker has forwarded and will see
/// answered.
#[derive(Clone, Debug)]
struct Forwarded {
    member: EntityId,
    proxy: EntityId,
    idp: EntityId,
    ws: Option<WsRequest>,
}

#[derive(Clone, Debug)]
struct WsRequest {
    client: String,
    confirmation: Confirmation,
    confirmation_key: Option<VerifyingKeyBytes>,
}

#[derive(Clone, Debug)]
struct ConsentCapture {
    target: ConsentTarget,
    idp: EntityId,
    mode: Option<ConsentMode>,
    attributes: Option<BTreeSet<String>>,
}

/// The service broker: pseudonym mapping, consent, proxy-group signing and
/// mail and link rewriting. Never holds a key that opens an attribute payload.
pub struct ServiceBroker {
    ledger: ObservationLedger,
    id: EntityId,
    registry: Arc<FederationRegistry>,
    signing: SigningKey,
    pseudonyms: SbPseudonyms,
    consent: ConsentStore,
    rng: ChaCha20Rng,
    seen_requests: BTreeSet<String>,
    consumed_assertions: BTreeSet<String>,
    forwarded: BTreeMap<String, Forwarded>,
    captures: BTreeMap<String, ConsentCapture>,
}

impl ServiceBroker {
    pub fn new(
        id: &EntityId,
        registry: Arc<FederationRegistry>,
        signing: SigningKey,
        derivation: DerivationKey,
        consent: ConsentStore,
        rng: ChaCha20Rng,
    ) -> Self {
        Self {
            ledger: ObservationLedger::new(id.as_str(), "SB"),
            id: id.clone(),
            registry,
            signing,
            pseudonyms: SbPseudonyms::new(id.clone(), derivation),
            consent,
            rng,
            seen_requests: BTreeSet::new(),
            consumed_assertions: BTreeSet::new(),
            forwarded: BTreeMap::new(),
            captures: BTreeMap::new(),
        }
    }

    pub fn pseudonyms(&self) -> &SbPseudonyms {
        &self.pseudonyms
    }

    pub fn consent_store(&self) -> &ConsentStore {
        &self.consent
    }

    pub fn consent_store_mut(&mut self) -> &mut ConsentStore {
        &mut self.consent
    }

    fn mail_domain(&self) -> Result<String, FlowError> {
        self.registry
            .entity(&self.id)
            .and_then(|d| d.endpoint("mail"))
            .map(str::to_string)
            .ok_or(FlowError::WrongDomainForHop)
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

    fn sign<T: serde::Serialize>(&self, body: &T) -> SignedMessage {
        sign_message(body, &self.id, &self.signing)
    }

    fn require_idp(&self, id: &EntityId) -> Result<(), FlowError> {
        match self.registry.entity(id) {
            Some(d) if d.role == Role::Idp => Ok(()),
            _ => Err(FlowError::UnknownEntity(id.to_string())),
        }
    }

    fn observe_group(&mut self, ctx: &Ctx, member: &EntityId, proxy: &EntityId) {
        let now = ctx.now();
        self.ledger
            .record(now, ElementKind::SpIdentity, member.as_str(), ctx.tx());
        self.ledger
            .record(now, ElementKind::SpIdentity, proxy.as_str(), ctx.tx());
        let names = self.registry.release_policy(proxy).cloned().unwrap_or_default();
        for name in names {
            self.ledger
                .record_about(now, ElementKind::AttributeName, name, ctx.tx(), proxy.as_str());
        }
    }

    /// Resolve a request signed under a proxy id to the member SP whose key
    /// produced it.
    fn verify_member(&self, msg: &SignedMessage) -> Result<EntityId, FlowError> {
        match verify_message(msg, &self.registry) {
            Ok(member) if member != msg.signer_id => Ok(member),
            Ok(direct) => match self.registry.entity(&direct) {
                Some(d) if d.role == Role::Sp => Err(FlowError::Ungrouped),
                _ => Err(FlowError::BadSignature),
            },
            Err(SignatureError::BadSignature) if self.registry.is_proxy(&msg.signer_id) => {
                let outsider = self
                    .registry
                    .with_role(Role::Sp)
                    .any(|d| msg.verify_with_key(&d.static_signing_key));
                Err(if outsider {
                    FlowError::UnknownGroupMember
                } else {
                    FlowError::BadSignature
                })
            }
            Err(e) => Err(e.into()),
        }
    }

    fn on_authn_request(&mut self, env: &SimEnvelope, msg: &SignedMessage, ctx: &mut Ctx) -> Result<(), FlowError> {
        let member = self.verify_member(msg)?;
        let mut body: AuthnRequestBody = msg.open()?;
        if body.issuer != msg.signer_id || body.destination != self.id {
            return Err(FlowError::BadSignature);
        }
        self.fresh_request(&body.request_id)?;
        validate_cert(&body.onetime_cert, &self.trust_root()?, ctx.now())?;
        let idp = EntityId::new(
            body.relay_token
                .split_once('#')
                .map(|(idp, _)| idp)
                .ok_or_else(|| FlowError::Malformed("relay token".into()))?,
        );
        self.require_idp(&idp)?;
        let proxy = body.issuer.clone();
        self.observe_group(ctx, &member, &proxy);
        self.ledger.record(
            ctx.now(),
            ElementKind::EncKeyPublic,
            body.onetime_cert.public_key.to_b64(),
            ctx.tx(),
        );
        self.forwarded.insert(
            body.request_id.clone(),
            Forwarded {
                member,
                proxy,
                idp: idp.clone(),
                ws: None,
            },
        );
        body.destination = idp.clone();
        body.relay_token = String::new();
        let signed = self.sign(&body);
        ctx.send(
            env.from.clone(),
            Message::Redirect {
                to: idp.to_string(),
                message: Box::new(Message::AuthnRequest(signed)),
            },
        );
        Ok(())
    }

    fn on_consent_query(&mut self, env: &SimEnvelope, msg: &SignedMessage, ctx: &mut Ctx) -> Result<(), FlowError> {
        let idp = verify_direct(msg, &self.registry, Role::Idp)?;
        let body: ConsentQueryBody = msg.open()?;
        let fwd = self
            .forwarded
            .get(&body.request_id)
            .filter(|f| f.idp == idp)
            .ok_or(FlowError::UnknownCorrelation)?;
        let target = ConsentTarget::Proxy {
            proxy_id: fwd.proxy.clone(),
        };
        self.pseudonyms.accept_tid1(body.tid1.clone(), idp);
        self.ledger
            .record(ctx.now(), ElementKind::Pseudonym, body.tid1.as_str(), ctx.tx());
        let verdict = self
            .consent
            .check_and_consume(&body.tid1, &target, &body.requested, ctx.now());
        let voucher = match verdict {
            Ok(token) => ConsentVoucherBody {
                request_id: body.request_id,
                record_id: Some(token.record_id),
                denial: None,
            },
            Err(e) => ConsentVoucherBody {
                request_id: body.request_id,
                record_id: None,
                denial: Some(FlowError::from(e).code().to_string()),
            },
        };
        let signed = self.sign(&voucher);
        ctx.send(env.from.clone(), Message::ConsentVoucher(signed));
        Ok(())
    }

    /// Checks common to SSO responses and RST responses from an IdP.
    fn accept_assertion(&mut self, msg: &SignedMessage, ctx: &Ctx) -> Result<(AssertionEnvelope, Forwarded), FlowError> {
        let idp = verify_direct(msg, &self.registry, Role::Idp)?;
        let assertion: AssertionEnvelope = msg.open()?;
        if self.consumed_assertions.contains(&assertion.assertion_id) {
            return Err(FlowError::ReplayDetected);
        }
        let fwd = self
            .forwarded
            .remove(&assertion.in_response_to)
            .ok_or(FlowError::UnknownCorrelation)?;
        if fwd.idp != idp || assertion.issuer != idp || assertion.payload_issuer != idp {
            return Err(FlowError::BadSignature);
        }
        if assertion.audience != fwd.proxy {
            return Err(FlowError::AudienceMismatch);
        }
        self.consumed_assertions.insert(assertion.assertion_id.clone());
        self.pseudonyms.accept_tid1(assertion.subject_tid.clone(), idp);
        let now = ctx.now();
        self.ledger
            .record(now, ElementKind::Pseudonym, assertion.subject_tid.as_str(), ctx.tx());
        if let Some(visible) = assertion.encrypted_attributes.observable_plaintext() {
            for (name, value) in visible {
                self.ledger
                    .record_about(now, ElementKind::AttributeName, name, ctx.tx(), fwd.proxy.as_str());
                self.ledger
                    .record_about(now, ElementKind::AttributeValue, value, ctx.tx(), fwd.proxy.as_str());
            }
        }
        Ok((assertion, fwd))
    }

    fn on_response(&mut self, env: &SimEnvelope, msg: &SignedMessage, ctx: &mut Ctx) -> Result<(), FlowError> {
        let (mut assertion, fwd) = self.accept_assertion(msg, ctx)?;
        if fwd.ws.is_some() {
            return Err(FlowError::UnknownCorrelation);
        }
        let tid2 = self.pseudonyms.derive_tid2(&assertion.subject_tid, &fwd.member)?.value;
        self.ledger
            .record(ctx.now(), ElementKind::Pseudonym, tid2.as_str(), ctx.tx());
        assertion.subject_tid = tid2;
        assertion.audience = fwd.member.clone();
        assertion.issuer = self.id.clone();
        let signed = self.sign(&assertion);
        ctx.send(
            env.from.clone(),
            Message::Redirect {
                to: fwd.member.to_string(),
                message: Box::new(Message::Response(signed)),
            },
        );
        Ok(())
    }

    fn on_consent_start(
        &mut self,
        env: &SimEnvelope,
        subject: &ConsentSubject,
        idp: &EntityId,
        mode: Option<ConsentMode>,
        attributes: &Option<BTreeSet<String>>,
        ctx: &mut Ctx,
    ) -> Result<(), FlowError> {
        self.require_idp(idp)?;
        let target = match subject {
            ConsentSubject::Sp { sp } => {
                let proxy = self.registry.lookup_proxy(sp)?.clone();
                self.observe_group(ctx, sp, &proxy);
                ConsentTarget::Proxy { proxy_id: proxy }
            }
            ConsentSubject::Link { sp_a, sp_b } => {
                for sp in [sp_a, sp_b] {
                    self.ledger
                        .record(ctx.now(), ElementKind::SpIdentity, sp.as_str(), ctx.tx());
                }
                ConsentTarget::Link {
                    sp_a: sp_a.clone(),
                    sp_b: sp_b.clone(),
                }
            }
        };
        let request_id = new_token(&mut self.rng, "identify");
        self.captures.insert(
            request_id.clone(),
            ConsentCapture {
                target,
                idp: idp.clone(),
                mode,
                attributes: attributes.clone(),
            },
        );
        let body = IdentifyRequestBody {
            request_id,
            issuer: self.id.clone(),
            destination: idp.clone(),
            issue_instant: ctx.now(),
        };
        let signed = self.sign(&body);
        ctx.send(
            env.from.clone(),
            Message::Redirect {
                to: idp.to_string(),
                message: Box::new(Message::IdentifyRequest(signed)),
            },
        );
        Ok(())
    }

    fn on_identity_statement(&mut self, env: &SimEnvelope, msg: &SignedMessage, ctx: &mut Ctx) -> Result<(), FlowError> {
        let idp = verify_direct(msg, &self.registry, Role::Idp)?;
        let body: IdentityStatementBody = msg.open()?;
        if body.audience != self.id {
            return Err(FlowError::AudienceMismatch);
        }
        let capture = self
            .captures
            .remove(&body.in_response_to)
            .filter(|c| c.idp == idp)
            .ok_or(FlowError::UnknownCorrelation)?;
        self.pseudonyms.accept_tid1(body.subject_tid.clone(), idp);
        self.ledger
            .record(ctx.now(), ElementKind::Pseudonym, body.subject_tid.as_str(), ctx.tx());
        let attributes = match (&capture.target, capture.attributes) {
            (_, Some(a)) => a,
            (ConsentTarget::Proxy { proxy_id }, None) => {
                self.registry.release_policy(proxy_id).cloned().unwrap_or_default()
            }
            (ConsentTarget::Link { .. }, None) => BTreeSet::new(),
        };
        let mode = capture
            .mode
            .unwrap_or(self.registry.policy.consent_mode_default);
        let record = self.consent.grant_consent(
            &self.registry,
            body.subject_tid,
            capture.target,
            attributes,
            mode,
            ctx.now(),
        )?;
        let record_id = record.id;
        ctx.outcome(Outcome::ConsentRecorded {
            tx: ctx.tx_owned(),
            record_id,
            target: record.target.to_string(),
        });
        ctx.send(env.from.clone(), Message::ConsentGranted { record_id });
        Ok(())
    }

    fn on_mail_submit(&mut self, msg: &SignedMessage, ctx: &mut Ctx) -> Result<(), FlowError> {
        let sender = verify_direct(msg, &self.registry, Role::Sp)?;
        let mut mail: RelayedMessage = msg.open()?;
        let proxy = self.registry.lookup_proxy(&sender)?.clone();
        let domain = self.mail_domain()?;
        let registry = Arc::clone(&self.registry);
        let (to, idp) = sb_rewrite(&self.pseudonyms, &domain, &sender, &mail.to, |idp| {
            registry
                .entity(idp)
                .and_then(|d| d.endpoint("mail"))
                .map(str::to_string)
        })?;
        let now = ctx.now();
        self.ledger
            .record(now, ElementKind::SpIdentity, sender.as_str(), ctx.tx());
        self.ledger
            .record(now, ElementKind::Pseudonym, mail.to.local_part.as_str(), ctx.tx());
        self.ledger
            .record(now, ElementKind::Pseudonym, to.local_part.as_str(), ctx.tx());
        mail.to = to;
        mail.from = RelayAddress::new(proxy.as_str(), domain);
        mail.hop_trace.push("SB".into());
        let signed = self.sign(&mail);
        ctx.send(idp.to_string(), Message::MailRelay(signed));
        Ok(())
    }

    fn on_link_request(&mut self, env: &SimEnvelope, msg: &SignedMessage, ctx: &mut Ctx) -> Result<(), FlowError> {
        let sender = verify_direct(msg, &self.registry, Role::Sp)?;
        let body: LinkRequestBody = msg.open()?;
        let (tid1, owner) = self.pseudonyms.resolve_tid2(&body.tid2)?;
        if owner != sender {
            return Err(FlowError::UnknownTid);
        }
        if body.peer_sp == sender {
            return Err(FlowError::SameSp);
        }
        match self.registry.entity(&body.peer_sp) {
            Some(d) if d.role == Role::Sp => {}
            _ => return Err(FlowError::UnknownEntity(body.peer_sp.to_string())),
        }
        let target = ConsentTarget::Link {
            sp_a: sender.clone(),
            sp_b: body.peer_sp.clone(),
        };
        self.consent
            .check_and_consume(&tid1, &target, &BTreeSet::new(), ctx.now())?;
        let (ab, _) = self.pseudonyms.derive_link_pair(&tid1, &sender, &body.peer_sp)?;
        let tag = link_tag(sender.as_str(), body.peer_sp.as_str());
        let now = ctx.now();
        self.ledger
            .record(now, ElementKind::SpIdentity, sender.as_str(), ctx.tx());
        self.ledger
            .record(now, ElementKind::SpIdentity, body.peer_sp.as_str(), ctx.tx());
        self.ledger
            .record_about(now, ElementKind::Pseudonym, ab.value.as_str(), ctx.tx(), tag);
        ctx.send(
            env.from.clone(),
            Message::LinkGranted {
                request_id: body.request_id,
                tid2: body.tid2,
                tid3: ab.value,
            },
        );
        Ok(())
    }

    fn on_convert_link(&mut self, env: &SimEnvelope, msg: &SignedMessage, ctx: &mut Ctx) -> Result<(), FlowError> {
        let caller = verify_direct(msg, &self.registry, Role::Sp)?;
        let body: ConvertLinkBody = msg.open()?;
        let tid2 = self.pseudonyms.convert_link(&body.tid3, &caller)?.value;
        let (a, b) = self
            .pseudonyms
            .link_ends(&body.tid3)
            .map(|(a, b)| (a.clone(), b.clone()))
            .ok_or(FlowError::UnknownTid)?;
        self.ledger.record_about(
            ctx.now(),
            ElementKind::Pseudonym,
            tid2.as_str(),
            ctx.tx(),
            link_tag(a.as_str(), b.as_str()),
        );
        ctx.send(
            env.from.clone(),
            Message::LinkConverted {
                request_id: body.request_id,
                tid3: body.tid3,
                tid2,
            },
        );
        Ok(())
    }

    fn on_token_request(&mut self, env: &SimEnvelope, msg: &SignedMessage, ctx: &mut Ctx) -> Result<(), FlowError> {
        let body: TokenRequestBody = msg.open()?;
        let cert = &body.rst.short_term_cert;
        let vk = cert.verify_key.ok_or(FlowError::AuthnFailed)?;
        if !msg.verify_with_key(&vk) {
            return Err(FlowError::AuthnFailed);
        }
        validate_cert(cert, &self.trust_root()?, ctx.now())?;
        self.require_idp(&body.rst.idp)?;
        let proxy = self.registry.lookup_proxy(&body.applies_to)?.clone();
        self.fresh_request(&body.rst.request_id)?;
        self.observe_group(ctx, &body.applies_to, &proxy);
        self.ledger
            .record(ctx.now(), ElementKind::EncKeyPublic, cert.public_key.to_b64(), ctx.tx());
        let confirmation_key = match body.rst.confirmation {
            Confirmation::HolderOfKey => Some(vk),
            Confirmation::Bearer => None,
        };
        self.forwarded.insert(
            body.rst.request_id.clone(),
            Forwarded {
                member: body.applies_to.clone(),
                proxy: proxy.clone(),
                idp: body.rst.idp.clone(),
                ws: Some(WsRequest {
                    client: env.from.clone(),
                    confirmation: body.rst.confirmation,
                    confirmation_key,
                }),
            },
        );
        let idp = body.rst.idp.clone();
        let proxied = ProxiedRstBody {
            requester: proxy,
            rst: body.rst,
        };
        let signed = self.sign(&proxied);
        ctx.send(idp.to_string(), Message::ProxiedRst(signed));
        Ok(())
    }

    fn on_rst_response(&mut self, msg: &SignedMessage, ctx: &mut Ctx) -> Result<(), FlowError> {
        let (assertion, fwd) = self.accept_assertion(msg, ctx)?;
        let ws = fwd.ws.ok_or(FlowError::UnknownCorrelation)?;
        let tid2 = self.pseudonyms.derive_tid2(&assertion.subject_tid, &fwd.member)?.value;
        self.ledger
            .record(ctx.now(), ElementKind::Pseudonym, tid2.as_str(), ctx.tx());
        let token = SecurityToken {
            token_id: assertion.assertion_id,
            issuer: self.id.clone(),
            subject_tid: tid2,
            audience: fwd.member,
            issue_instant: assertion.issue_instant,
            in_response_to: assertion.in_response_to.clone(),
            confirmation: ws.confirmation,
            confirmation_key: ws.confirmation_key,
            encrypted_attributes: assertion.encrypted_attributes,
            payload_issuer: assertion.payload_issuer,
            payload_signature: assertion.payload_signature,
        };
        let signed = self.sign(&token);
        ctx.send(
            ws.client,
            Message::TokenResponse {
                request_id: assertion.in_response_to,
                token: signed,
            },
        );
        Ok(())
    }
}

impl Actor for ServiceBroker {
    actor_plumbing!();

    fn handle(&mut self, env: &SimEnvelope, ctx: &mut Ctx) -> Result<(), FlowError> {
        match &env.payload {
            Message::AuthnRequest(msg) => self.on_authn_request(env, msg, ctx),
            Message::ConsentQuery(msg) => self.on_consent_query(env, msg, ctx),
            Message::Response(msg) => self.on_response(env, msg, ctx),
            Message::ConsentStart {
                subject,
                idp,
                mode,
                attributes,
            } => self.on_consent_start(env, subject, idp, *mode, attributes, ctx),
            Message::IdentityStatement(msg) => self.on_identity_statement(env, msg, ctx),
            Message::MailSubmit(msg) => self.on_mail_submit(msg, ctx),
            Message::LinkRequest(msg) => self.on_link_request(env, msg, ctx),
            Message::ConvertLink(msg) => self.on_convert_link(env, msg, ctx),
            Message::TokenRequest(msg) => self.on_token_request(env, msg, ctx),
            Message::RstResponse(msg) => self.on_rst_response(msg, ctx),
            other => Err(FlowError::Unexpected(other.kind().into())),
        }
    }
}
