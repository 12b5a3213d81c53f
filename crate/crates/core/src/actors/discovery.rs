use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::FlowError;
use crate::federation::{EntityId, FederationRegistry, Role};
use crate::message::Message;
use crate::observe::{ElementKind, ObservationLedger};
use crate::sim::{Actor, Ctx, SimEnvelope};

use super::actor_plumbing;

/// The IdP whose `home_domain` endpoint equals `hint`.
pub fn discover_idp(registry: &FederationRegistry, hint: &str) -> Result<EntityId, FlowError> {
    registry
        .with_role(Role::Idp)
        .find(|d| d.endpoint("home_domain") == Some(hint))
        .map(|d| d.entity_id.clone())
        .ok_or(FlowError::UnknownPrincipalHint)
}

/// Centralized discovery. Learns which SP is asking and the group's
/// attribute characteristics, never who the principal is.
pub struct DiscoveryService {
    ledger: ObservationLedger,
    registry: Arc<FederationRegistry>,
    sessions: BTreeMap<String, EntityId>,
}

impl DiscoveryService {
    pub fn new(id: &EntityId, registry: Arc<FederationRegistry>) -> Self {
        Self {
            ledger: ObservationLedger::new(id.as_str(), "DISCOVERY"),
            registry,
            sessions: BTreeMap::new(),
        }
    }
}

impl Actor for DiscoveryService {
    actor_plumbing!();

    fn handle(&mut self, env: &SimEnvelope, ctx: &mut Ctx) -> Result<(), FlowError> {
        let now = ctx.now();
        match &env.payload {
            Message::DiscoveryRequest {
                session,
                return_to,
                proxy,
                required_attributes,
            } => {
                self.ledger
                    .record(now, ElementKind::SpIdentity, return_to.as_str(), ctx.tx());
                for name in required_attributes {
                    self.ledger.record_about(
                        now,
                        ElementKind::AttributeName,
                        name.as_str(),
                        ctx.tx(),
                        proxy.as_str(),
                    );
                }
                self.sessions.insert(session.clone(), return_to.clone());
                let prompt = Message::DiscoveryPrompt {
                    session: session.clone(),
                };
                ctx.send(env.from.clone(), prompt);
            }
            Message::DiscoverySelect { session, hint } => {
                let return_to = self
                    .sessions
                    .remove(session)
                    .ok_or(FlowError::UnknownCorrelation)?;
                let idp = discover_idp(&self.registry, hint)?;
                let response = Message::DiscoveryResponse {
                    session: session.clone(),
                    idp,
                };
                ctx.send(
                    env.from.clone(),
                    Message::Redirect {
                        to: return_to.to_string(),
                        message: Box::new(response),
                    },
                );
            }
            other => return Err(FlowError::Unexpected(other.kind().into())),
        }
        Ok(())
    }
}
