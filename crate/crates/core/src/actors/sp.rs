use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand_chacha::ChaCha20Rng;

use crate::crypto::{
    decrypt_payload, fingerprint, generate_onetime_keypair, open_with_content_key, sign_message,
    validate_cert, verify_signature, ContentKey, EncryptedPayload, EnrollmentKey,
    EncryptionSecretKey, OneTimeCertificate, OnetimeKeypair, Serial, SignatureBytes,
    SignedMessage, SigningKey, CertRequest,
};
use crate::error::FlowError;
use crate::federation::{EntityId, FederationRegistry, GroupStatus, NameIdPolicy, Role};
use crate::idmap::TidValue;
use crate::message::{
    payload_tbs, AssertionEnvelope, AuthnRequestBody, Control, ConvertLinkBody, LinkRequestBody,
    Message,
};
use crate::messaging::{RelayAddress, RelayedMessage};
use crate::observe::{link_tag, ElementKind, ObservationLedger};
use crate::sim::{Actor, Ctx, Outcome, SimEnvelope};
use crate::wstrust::{Confirmation, SecurityToken};
use crate::{Attributes, SimTime};

use super::{actor_plumbing, new_token, sb_id, verify_direct};

struct CertPending {
    ua: String,
    idp: EntityId,
    keypair: OnetimeKeypair,
}

struct Outstanding {
    secret: EncryptionSecretKey,
    ua: String,
}

struct LinkOut {
    peer: EntityId,
    payload: String,
    reply: Option<String>,
}

struct LinkIn {
    from: EntityId,
    payload: String,
    reply: Option<String>,
}

/// A federation member SP. Speaks to the broker under its group's proxy id
/// and only ever learns TID2s.
pub struct ServiceProvider {
    ledger: ObservationLedger,
    id: EntityId,
    registry: Arc<FederationRegistry>,
    signing: SigningKey,
    enrollment: EnrollmentKey,
    rng: ChaCha20Rng,
    discovery: BTreeMap<String, String>,
    cert_pending: BTreeMap<String, CertPending>,
    outstanding: BTreeMap<String, Outstanding>,
    consumed: BTreeSet<String>,
    spent_serials: BTreeSet<Serial>,
    last_cert: Option<(OnetimeKeypair, OneTimeCertificate)>,
    reuse_cert: bool,
    claim_proxy: Option<EntityId>,
    sessions: BTreeMap<TidValue, Attributes>,
    links_out: BTreeMap<String, LinkOut>,
    links_in: BTreeMap<String, LinkIn>,
}

impl ServiceProvider {
    pub fn new(
        id: &EntityId,
        registry: Arc<FederationRegistry>,
        signing: SigningKey,
        enrollment: EnrollmentKey,
        rng: ChaCha20Rng,
    ) -> Self {
        let mut ledger = ObservationLedger::new(id.as_str(), "SP");
        ledger.record(0, ElementKind::SpIdentity, id.as_str(), None);
        let required = registry
            .entity(id)
            .and_then(|d| d.required_attributes.clone())
            .unwrap_or_default();
        for name in required {
            ledger.record_about(0, ElementKind::AttributeName, name, None, id.as_str());
        }
        Self {
            ledger,
            id: id.clone(),
            registry,
            signing,
            enrollment,
            rng,
            discovery: BTreeMap::new(),
            cert_pending: BTreeMap::new(),
            outstanding: BTreeMap::new(),
            consumed: BTreeSet::new(),
            spent_serials: BTreeSet::new(),
            last_cert: None,
            reuse_cert: false,
            claim_proxy: None,
            sessions: BTreeMap::new(),
            links_out: BTreeMap::new(),
            links_in: BTreeMap::new(),
        }
    }

    /// Established sessions by TID2.
    pub fn sessions(&self) -> &BTreeMap<TidValue, Attributes> {
        &self.sessions
    }

    fn proxy(&self) -> Result<EntityId, FlowError> {
        match self.registry.group_of(&self.id) {
            Some(g) if g.status == GroupStatus::Grouped => Ok(g.proxy_id.clone()),
            _ => Err(FlowError::Ungrouped),
        }
    }

    fn fresh(&self, issued: SimTime, now: SimTime) -> Result<(), FlowError> {
        if now.saturating_sub(issued) > self.registry.policy.assertion_freshness {
            return Err(FlowError::StaleAssertion);
        }
        Ok(())
    }

    fn replay_guard(&mut self, id: &str) -> Result<(), FlowError> {
        if !self.consumed.insert(id.to_string()) {
            return Err(FlowError::ReplayDetected);
        }
        Ok(())
    }

    fn check_payload_signature(
        &self,
        issuer: &EntityId,
        in_response_to: &str,
        payload: &EncryptedPayload,
        sig: &SignatureBytes,
    ) -> Result<(), FlowError> {
        let key = match self.registry.entity(issuer) {
            Some(d) if d.role == Role::Idp => d.static_signing_key,
            _ => return Err(FlowError::BadSignature),
        };
        if !verify_signature(&key, &payload_tbs(in_response_to, payload), sig) {
            return Err(FlowError::BadSignature);
        }
        Ok(())
    }

    fn observe_session(&mut self, ctx: &Ctx, subject: &TidValue, attrs: &Attributes) {
        let now = ctx.now();
        self.ledger
            .record(now, ElementKind::Pseudonym, subject.as_str(), ctx.tx());
        for (name, value) in attrs {
            self.ledger.record_about(
                now,
                ElementKind::AttributeName,
                name.as_str(),
                ctx.tx(),
                self.id.as_str(),
            );
            self.ledger.record_about(
                now,
                ElementKind::AttributeValue,
                value.as_str(),
                ctx.tx(),
                self.id.as_str(),
            );
        }
    }

    fn on_sso_start(&mut self, env: &SimEnvelope, ctx: &mut Ctx) -> Result<(), FlowError> {
        let proxy = self.proxy()?;
        let ds = self
            .registry
            .with_role(Role::Discovery)
            .next()
            .map(|d| d.entity_id.clone())
            .ok_or_else(|| FlowError::UnknownEntity("discovery service".into()))?;
        let required = self
            .registry
            .release_policy(&proxy)
            .cloned()
            .unwrap_or_default();
        let session = new_token(&mut self.rng, "session");
        self.discovery.insert(session.clone(), env.from.clone());
        let request = Message::DiscoveryRequest {
            session,
            return_to: self.id.clone(),
            proxy,
            required_attributes: required,
        };
        ctx.send(
            env.from.clone(),
            Message::Redirect {
                to: ds.to_string(),
                message: Box::new(request),
            },
        );
        Ok(())
    }

    fn on_discovery_response(&mut self, session: &str, idp: &EntityId, ctx: &mut Ctx) -> Result<(), FlowError> {
        let ua = self
            .discovery
            .remove(session)
            .ok_or(FlowError::UnknownCorrelation)?;
        if self.reuse_cert {
            if let Some((keypair, cert)) = self.last_cert.clone() {
                return self.send_authn_request(ctx, ua, idp.clone(), keypair, cert);
            }
        }
        let keypair = generate_onetime_keypair(&mut self.rng);
        let now = ctx.now();
        self.ledger
            .record(now, ElementKind::EncKeyPrivate, fingerprint(&keypair.public.0), ctx.tx());
        self.ledger
            .record(now, ElementKind::EncKeyPublic, keypair.public.to_b64(), ctx.tx());
        let nonce = new_token(&mut self.rng, "nonce");
        let request = CertRequest::new(&self.enrollment, keypair.public, None);
        self.cert_pending.insert(
            nonce.clone(),
            CertPending {
                ua,
                idp: idp.clone(),
                keypair,
            },
        );
        let ca = self
            .registry
            .ca()
            .ok_or_else(|| FlowError::UnknownEntity("certificate authority".into()))?
            .entity_id
            .to_string();
        ctx.send(ca, Message::CertIssue { nonce, request });
        Ok(())
    }

    fn send_authn_request(
        &mut self,
        ctx: &mut Ctx,
        ua: String,
        idp: EntityId,
        keypair: OnetimeKeypair,
        cert: OneTimeCertificate,
    ) -> Result<(), FlowError> {
        if !self.spent_serials.insert(cert.serial) {
            return Err(FlowError::CertReuse);
        }
        let proxy = match &self.claim_proxy {
            Some(p) => p.clone(),
            None => self.proxy()?,
        };
        let nameid_policy = self
            .registry
            .entity(&self.id)
            .and_then(|d| d.nameid_policy)
            .unwrap_or(NameIdPolicy::Targeted);
        let nonce = new_token(&mut self.rng, "relay");
        let body = AuthnRequestBody {
            request_id: new_token(&mut self.rng, "authn"),
            issuer: proxy.clone(),
            destination: sb_id(&self.registry),
            onetime_cert: cert.clone(),
            nameid_policy,
            relay_token: format!("{idp}#{nonce}"),
            issue_instant: ctx.now(),
        };
        self.outstanding.insert(
            body.request_id.clone(),
            Outstanding {
                secret: keypair.secret.clone(),
                ua: ua.clone(),
            },
        );
        self.last_cert = Some((keypair, cert));
        let signed = sign_message(&body, &proxy, &self.signing);
        ctx.send(
            ua,
            Message::Redirect {
                to: sb_id(&self.registry).to_string(),
                message: Box::new(Message::AuthnRequest(signed)),
            },
        );
        Ok(())
    }

    fn on_cert_issued(&mut self, nonce: &str, cert: &OneTimeCertificate, ctx: &mut Ctx) -> Result<(), FlowError> {
        let pending = self
            .cert_pending
            .remove(nonce)
            .ok_or(FlowError::UnknownCorrelation)?;
        let root = self
            .registry
            .ca_trust_root
            .ok_or(FlowError::CertIssuanceFailed)?;
        validate_cert(cert, &root, ctx.now())?;
        if cert.public_key != pending.keypair.public {
            return Err(FlowError::CertIssuanceFailed);
        }
        self.send_authn_request(ctx, pending.ua, pending.idp, pending.keypair, cert.clone())
    }

    fn on_response(&mut self, msg: &SignedMessage, ctx: &mut Ctx) -> Result<(), FlowError> {
        verify_direct(msg, &self.registry, Role::Sb)?;
        let assertion: AssertionEnvelope = msg.open()?;
        if assertion.audience != self.id {
            return Err(FlowError::AudienceMismatch);
        }
        self.replay_guard(&assertion.assertion_id)?;
        let pending = self
            .outstanding
            .remove(&assertion.in_response_to)
            .ok_or(FlowError::UnpairedResponse)?;
        self.fresh(assertion.issue_instant, ctx.now())?;
        self.check_payload_signature(
            &assertion.payload_issuer,
            &assertion.in_response_to,
            &assertion.encrypted_attributes,
            &assertion.payload_signature,
        )?;
        let attrs = decrypt_payload(&assertion.encrypted_attributes, &pending.secret)?;
        self.observe_session(ctx, &assertion.subject_tid, &attrs);
        self.sessions
            .insert(assertion.subject_tid.clone(), attrs.clone());
        ctx.outcome(Outcome::SessionEstablished {
            tx: ctx.tx_owned(),
            sp: self.id.clone(),
            subject: assertion.subject_tid.clone(),
            assertion_id: assertion.assertion_id,
            attributes: attrs,
        });
        ctx.send(
            pending.ua,
            Message::LoginComplete {
                subject: assertion.subject_tid,
            },
        );
        Ok(())
    }

    fn send_mail(&mut self, to_tid2: &TidValue, subject: &str, body: &str, ctx: &mut Ctx) -> Result<(), FlowError> {
        let sb = sb_id(&self.registry);
        let domain = self
            .registry
            .entity(&sb)
            .and_then(|d| d.endpoint("mail"))
            .ok_or(FlowError::WrongDomainForHop)?;
        let mail = RelayedMessage {
            to: RelayAddress::new(to_tid2.as_str(), domain),
            from: RelayAddress::new("service", self.id.as_str()),
            subject: subject.to_string(),
            body: body.to_string(),
            hop_trace: vec!["SP".into()],
        };
        let signed = sign_message(&mail, &self.id, &self.signing);
        ctx.send(sb.to_string(), Message::MailSubmit(signed));
        Ok(())
    }

    fn request_link(
        &mut self,
        tid2: &TidValue,
        peer: &EntityId,
        payload: &str,
        reply: Option<String>,
        ctx: &mut Ctx,
    ) {
        let body = LinkRequestBody {
            request_id: new_token(&mut self.rng, "link"),
            tid2: tid2.clone(),
            peer_sp: peer.clone(),
        };
        self.links_out.insert(
            body.request_id.clone(),
            LinkOut {
                peer: peer.clone(),
                payload: payload.to_string(),
                reply,
            },
        );
        let signed = sign_message(&body, &self.id, &self.signing);
        ctx.send(sb_id(&self.registry).to_string(), Message::LinkRequest(signed));
    }

    fn on_link_granted(&mut self, request_id: &str, tid2: &TidValue, tid3: &TidValue, ctx: &mut Ctx) -> Result<(), FlowError> {
        let out = self
            .links_out
            .remove(request_id)
            .ok_or(FlowError::UnknownCorrelation)?;
        self.ledger.record_about(
            ctx.now(),
            ElementKind::Pseudonym,
            tid3.as_str(),
            ctx.tx(),
            link_tag(self.id.as_str(), out.peer.as_str()),
        );
        ctx.outcome(Outcome::LinkGranted {
            tx: ctx.tx_owned(),
            sp: self.id.clone(),
            tid2: tid2.clone(),
            tid3: tid3.clone(),
        });
        ctx.send(
            out.peer.to_string(),
            Message::LinkMessage {
                tid3: tid3.clone(),
                payload: out.payload,
                reply: out.reply,
            },
        );
        Ok(())
    }

    fn on_link_message(
        &mut self,
        env: &SimEnvelope,
        tid3: &TidValue,
        payload: &str,
        reply: &Option<String>,
        ctx: &mut Ctx,
    ) -> Result<(), FlowError> {
        let from = EntityId::new(env.from.clone());
        match self.registry.entity(&from) {
            Some(d) if d.role == Role::Sp => {}
            _ => return Err(FlowError::UnknownEntity(env.from.clone())),
        }
        let tag = link_tag(self.id.as_str(), from.as_str());
        let now = ctx.now();
        self.ledger
            .record_about(now, ElementKind::SpIdentity, from.as_str(), ctx.tx(), tag.clone());
        self.ledger
            .record_about(now, ElementKind::Pseudonym, tid3.as_str(), ctx.tx(), tag);
        let body = ConvertLinkBody {
            request_id: new_token(&mut self.rng, "convert"),
            tid3: tid3.clone(),
        };
        self.links_in.insert(
            body.request_id.clone(),
            LinkIn {
                from,
                payload: payload.to_string(),
                reply: reply.clone(),
            },
        );
        let signed = sign_message(&body, &self.id, &self.signing);
        ctx.send(sb_id(&self.registry).to_string(), Message::ConvertLink(signed));
        Ok(())
    }

    fn on_link_converted(&mut self, request_id: &str, tid3: &TidValue, tid2: &TidValue, ctx: &mut Ctx) -> Result<(), FlowError> {
        let link = self
            .links_in
            .remove(request_id)
            .ok_or(FlowError::UnknownCorrelation)?;
        self.ledger
            .record(ctx.now(), ElementKind::Pseudonym, tid2.as_str(), ctx.tx());
        ctx.outcome(Outcome::LinkDelivered {
            tx: ctx.tx_owned(),
            sp: self.id.clone(),
            tid2: tid2.clone(),
            tid3: tid3.clone(),
            payload: link.payload,
        });
        if let Some(reply) = link.reply {
            self.request_link(tid2, &link.from, &reply, None, ctx);
        }
        Ok(())
    }

    fn on_ws_invoke(
        &mut self,
        env: &SimEnvelope,
        token: &SignedMessage,
        content_key: &ContentKey,
        body: &str,
        body_signature: &Option<SignatureBytes>,
        ctx: &mut Ctx,
    ) -> Result<(), FlowError> {
        verify_direct(token, &self.registry, Role::Sb)?;
        let token: SecurityToken = token.open()?;
        if token.audience != self.id {
            return Err(FlowError::AudienceMismatch);
        }
        self.replay_guard(&token.token_id)?;
        self.fresh(token.issue_instant, ctx.now())?;
        if token.confirmation == Confirmation::HolderOfKey {
            let confirmed = match (&token.confirmation_key, body_signature) {
                (Some(key), Some(sig)) => verify_signature(key, body.as_bytes(), sig),
                _ => false,
            };
            if !confirmed {
                return Err(FlowError::KeyConfirmationFailed);
            }
        }
        self.check_payload_signature(
            &token.payload_issuer,
            &token.in_response_to,
            &token.encrypted_attributes,
            &token.payload_signature,
        )?;
        let attrs = open_with_content_key(&token.encrypted_attributes, content_key)?;
        self.observe_session(ctx, &token.subject_tid, &attrs);
        self.sessions.insert(token.subject_tid.clone(), attrs.clone());
        ctx.outcome(Outcome::WsCompleted {
            tx: ctx.tx_owned(),
            sp: self.id.clone(),
            subject: token.subject_tid,
            token_id: token.token_id.clone(),
            attributes: attrs,
        });
        ctx.send(
            env.from.clone(),
            Message::WsResult {
                token_id: token.token_id,
                status: "ok".into(),
            },
        );
        Ok(())
    }
}

impl Actor for ServiceProvider {
    actor_plumbing!();

    fn handle(&mut self, env: &SimEnvelope, ctx: &mut Ctx) -> Result<(), FlowError> {
        match &env.payload {
            Message::SsoStart => self.on_sso_start(env, ctx),
            Message::DiscoveryResponse { session, idp } => self.on_discovery_response(session, idp, ctx),
            Message::CertIssued { nonce, cert } => self.on_cert_issued(nonce, cert, ctx),
            Message::CertDenied { nonce } => {
                self.cert_pending.remove(nonce);
                Err(FlowError::CertIssuanceFailed)
            }
            Message::Response(msg) => self.on_response(msg, ctx),
            Message::Control(Control::SendMail { to_tid2, subject, body }) => {
                self.send_mail(to_tid2, subject, body, ctx)
            }
            Message::Control(Control::Link {
                tid2,
                peer_sp,
                payload,
                reply,
            }) => {
                self.request_link(tid2, peer_sp, payload, reply.clone(), ctx);
                Ok(())
            }
            Message::Control(Control::SpFaults { reuse_cert, claim_proxy }) => {
                self.reuse_cert = *reuse_cert;
                self.claim_proxy = claim_proxy.clone();
                Ok(())
            }
            Message::LinkGranted {
                request_id,
                tid2,
                tid3,
            } => self.on_link_granted(request_id, tid2, tid3, ctx),
            Message::LinkMessage { tid3, payload, reply } => {
                self.on_link_message(env, tid3, payload, reply, ctx)
            }
            Message::LinkConverted {
                request_id,
                tid3,
                tid2,
            } => self.on_link_converted(request_id, tid3, tid2, ctx),
            Message::WsInvoke {
                token,
                content_key,
                body,
                body_signature,
            } => self.on_ws_invoke(env, token, content_key, body, body_signature, ctx),
            other => Err(FlowError::Unexpected(other.kind().into())),
        }
    }
}
