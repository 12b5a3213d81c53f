//! Actor state machines for every federation role.
//!
//! Browser redirects are modelled as [`Message::Redirect`](crate::message::Message::Redirect)
//! envelopes sent to the principal's [`UserAgent`], which forwards them with
//! its client address attached. Back-channel calls (CA issuance, consent
//! queries, WS-Trust proxying, mail relay) go direct and carry no client
//! address.

pub mod ca;
pub mod discovery;
pub mod idp;
pub mod mailbox;
pub mod sb;
pub mod sp;
pub mod ua;
pub mod wsclient;

pub use ca::CaActor;
pub use discovery::{discover_idp, DiscoveryService};
pub use idp::{reference_id_for, IdentityProvider, PrincipalRecord};
pub use mailbox::{mailbox_id, Mailbox};
pub use sb::ServiceBroker;
pub use sp::ServiceProvider;
pub use ua::UserAgent;
pub use wsclient::WsClient;

use rand::RngCore;

use crate::crypto::{verify_message, SignedMessage};
use crate::error::FlowError;
use crate::federation::{EntityId, FederationRegistry, Role};

/// Fresh opaque token such as a request or assertion id.
pub(crate) fn new_token(rng: &mut dyn RngCore, prefix: &str) -> String {
    let mut b = [0u8; 12];
    rng.fill_bytes(&mut b);
    format!("{prefix}-{}", hex::encode(b))
}

/// Verify `msg` and require that the key belongs to an entity of `role`
/// named directly (not through a proxy).
pub(crate) fn verify_direct(
    msg: &SignedMessage,
    registry: &FederationRegistry,
    role: Role,
) -> Result<EntityId, FlowError> {
    let signer = verify_message(msg, registry)?;
    match registry.entity(&signer) {
        Some(d) if d.role == role && signer == msg.signer_id => Ok(signer),
        _ => Err(FlowError::BadSignature),
    }
}

pub(crate) fn sb_id(registry: &FederationRegistry) -> EntityId {
    registry
        .sb()
        .expect("a built federation has a service broker")
        .entity_id
        .clone()
}

macro_rules! actor_plumbing {
    () => {
        fn id(&self) -> &str {
            &self.ledger.owner
        }
        fn ledger(&self) -> &$crate::observe::ObservationLedger {
            &self.ledger
        }
        fn ledger_mut(&mut self) -> &mut $crate::observe::ObservationLedger {
            &mut self.ledger
        }
        fn as_any(&self) -> &dyn std::any::Any {
            self
        }
        fn as_any_mut(&mut self) -> &mut dyn std::any::Any {
            self
        }
    };
}
pub(crate) use actor_plumbing;
