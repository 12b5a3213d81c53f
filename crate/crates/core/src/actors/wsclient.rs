use std::collections::BTreeMap;
use std::sync::Arc;

use rand_chacha::ChaCha20Rng;

use crate::crypto::{
    derive_content_key, generate_onetime_keypair, sign_message, CertRequest, ContentKey,
    EnrollmentKey, OnetimeKeypair, PayloadScheme, SigningKey,
};
use crate::error::FlowError;
use crate::federation::{EntityId, FederationRegistry};
use crate::message::{Control, Message};
use crate::observe::ObservationLedger;
use crate::sim::{Actor, Ctx, SimEnvelope};
use crate::wstrust::{seal_credentials, Confirmation, Rst, SecurityToken, TokenRequestBody, TOKEN_TYPE_SAML2};

use super::{actor_plumbing, new_token, sb_id};

struct Exchange {
    sp: EntityId,
    confirmation: Confirmation,
    swap_key: bool,
    present_to: Option<EntityId>,
    keypair: OnetimeKeypair,
    short_term: SigningKey,
}

/// An active requestor acting for one principal: obtains a short-term
/// certificate, asks the broker for a token and presents it to the SP.
pub struct WsClient {
    ledger: ObservationLedger,
    registry: Arc<FederationRegistry>,
    enrollment: EnrollmentKey,
    username: String,
    password: String,
    home_idp: EntityId,
    client_addr: String,
    rng: ChaCha20Rng,
    awaiting_cert: BTreeMap<String, Exchange>,
    awaiting_token: BTreeMap<String, Exchange>,
}

impl WsClient {
    pub fn actor_id(principal: &str) -> String {
        format!("ws.{principal}")
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        principal: &str,
        password: &str,
        home_idp: EntityId,
        client_addr: &str,
        registry: Arc<FederationRegistry>,
        enrollment: EnrollmentKey,
        rng: ChaCha20Rng,
    ) -> Self {
        Self {
            ledger: ObservationLedger::new(Self::actor_id(principal), "CLIENT"),
            registry,
            enrollment,
            username: principal.to_string(),
            password: password.to_string(),
            home_idp,
            client_addr: client_addr.to_string(),
            rng,
            awaiting_cert: BTreeMap::new(),
            awaiting_token: BTreeMap::new(),
        }
    }

    /// Password presented in subsequent token requests.
    pub fn set_password(&mut self, password: &str) {
        self.password = password.to_string();
    }
}

impl Actor for WsClient {
    actor_plumbing!();

    fn handle(&mut self, env: &SimEnvelope, ctx: &mut Ctx) -> Result<(), FlowError> {
        match &env.payload {
            Message::Control(Control::StartWsTrust {
                sp,
                confirmation,
                swap_key,
                present_to,
            }) => {
                let keypair = generate_onetime_keypair(&mut self.rng);
                let short_term = SigningKey::generate(&mut self.rng);
                let nonce = new_token(&mut self.rng, "nonce");
                let request =
                    CertRequest::new(&self.enrollment, keypair.public, Some(short_term.verifying_key()));
                self.awaiting_cert.insert(
                    nonce.clone(),
                    Exchange {
                        sp: sp.clone(),
                        confirmation: *confirmation,
                        swap_key: *swap_key,
                        present_to: present_to.clone(),
                        keypair,
                        short_term,
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
            Message::CertIssued { nonce, cert } => {
                let exchange = self
                    .awaiting_cert
                    .remove(nonce)
                    .ok_or(FlowError::UnknownCorrelation)?;
                let idp_key = self
                    .registry
                    .entity(&self.home_idp)
                    .and_then(|d| d.static_encryption_key)
                    .ok_or_else(|| FlowError::UnknownEntity(self.home_idp.to_string()))?;
                let rst = Rst {
                    request_id: new_token(&mut self.rng, "rst"),
                    short_term_cert: cert.clone(),
                    token_type: TOKEN_TYPE_SAML2.into(),
                    idp: self.home_idp.clone(),
                    credentials: seal_credentials(&self.username, &self.password, &idp_key, &mut self.rng),
                    confirmation: exchange.confirmation,
                };
                let body = TokenRequestBody {
                    applies_to: exchange.sp.clone(),
                    rst,
                };
                let signer = EntityId::new(self.ledger.owner.clone());
                let signed = sign_message(&body, &signer, &exchange.short_term);
                self.awaiting_token.insert(body.rst.request_id.clone(), exchange);
                let addr = self.client_addr.clone();
                ctx.send_from_client(sb_id(&self.registry).to_string(), Message::TokenRequest(signed), &addr);
                Ok(())
            }
            Message::CertDenied { nonce } => {
                self.awaiting_cert.remove(nonce);
                Err(FlowError::CertIssuanceFailed)
            }
            Message::TokenResponse { request_id, token } => {
                let exchange = self
                    .awaiting_token
                    .remove(request_id)
                    .ok_or(FlowError::UnknownCorrelation)?;
                let parsed: SecurityToken = token.open()?;
                let content_key = match parsed.encrypted_attributes.scheme {
                    PayloadScheme::Plaintext => ContentKey([0; 44]),
                    _ => derive_content_key(&parsed.encrypted_attributes, &exchange.keypair.secret)?,
                };
                let body = format!("invoke:{}", parsed.token_id);
                let body_signature = match exchange.confirmation {
                    Confirmation::HolderOfKey if exchange.swap_key => {
                        Some(SigningKey::generate(&mut self.rng).sign(body.as_bytes()))
                    }
                    Confirmation::HolderOfKey => Some(exchange.short_term.sign(body.as_bytes())),
                    Confirmation::Bearer => None,
                };
                let to = exchange.present_to.unwrap_or(exchange.sp);
                let addr = self.client_addr.clone();
                ctx.send_from_client(
                    to.to_string(),
                    Message::WsInvoke {
                        token: token.clone(),
                        content_key,
                        body,
                        body_signature,
                    },
                    &addr,
                );
                Ok(())
            }
            Message::WsResult { .. } => Ok(()),
            other => Err(FlowError::Unexpected(other.kind().into())),
        }
    }
}
