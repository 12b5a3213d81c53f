use crate::error::FlowError;
use crate::federation::EntityId;
use crate::message::{Control, Message};
use crate::observe::ObservationLedger;
use crate::sim::{Actor, Ctx, SimEnvelope};

use super::actor_plumbing;

/// The principal's browser. Forwards redirects, answers discovery and login
/// prompts, and is the only source of client addresses.
pub struct UserAgent {
    ledger: ObservationLedger,
    username: String,
    password: String,
    password_override: Option<String>,
    home_domain: String,
    home_idp: EntityId,
    sb: EntityId,
    client_addr: String,
}

impl UserAgent {
    pub fn actor_id(principal: &str) -> String {
        format!("ua.{principal}")
    }

    pub fn new(
        principal: &str,
        password: &str,
        home_domain: &str,
        home_idp: EntityId,
        sb: EntityId,
        client_addr: &str,
    ) -> Self {
        Self {
            ledger: ObservationLedger::new(Self::actor_id(principal), "UA"),
            username: principal.to_string(),
            password: password.to_string(),
            password_override: None,
            home_domain: home_domain.to_string(),
            home_idp,
            sb,
            client_addr: client_addr.to_string(),
        }
    }

    pub fn client_addr(&self) -> &str {
        &self.client_addr
    }
}

impl Actor for UserAgent {
    actor_plumbing!();

    fn handle(&mut self, env: &SimEnvelope, ctx: &mut Ctx) -> Result<(), FlowError> {
        let addr = self.client_addr.clone();
        match &env.payload {
            Message::Control(Control::StartWebSso { sp, password_override }) => {
                self.password_override = password_override.clone();
                ctx.send_from_client(sp.as_str(), Message::SsoStart, &addr);
            }
            Message::Control(Control::StartConsent { subject, mode, attributes }) => {
                self.password_override = None;
                let start = Message::ConsentStart {
                    subject: subject.clone(),
                    idp: self.home_idp.clone(),
                    mode: *mode,
                    attributes: attributes.clone(),
                };
                ctx.send_from_client(self.sb.as_str(), start, &addr);
            }
            Message::Redirect { to, message } => {
                ctx.send_from_client(to.clone(), (**message).clone(), &addr);
            }
            Message::DiscoveryPrompt { session } => {
                let select = Message::DiscoverySelect {
                    session: session.clone(),
                    hint: self.home_domain.clone(),
                };
                ctx.send_from_client(env.from.clone(), select, &addr);
            }
            Message::LoginPrompt { request_id } => {
                let password = self
                    .password_override
                    .take()
                    .unwrap_or_else(|| self.password.clone());
                let creds = Message::Credentials {
                    request_id: request_id.clone(),
                    username: self.username.clone(),
                    password,
                };
                ctx.send_from_client(env.from.clone(), creds, &addr);
            }
            Message::LoginComplete { .. } | Message::ConsentGranted { .. } => {}
            other => return Err(FlowError::Unexpected(other.kind().into())),
        }
        Ok(())
    }
}
