use std::collections::BTreeMap;

use crate::error::FlowError;
use crate::message::Message;
use crate::messaging::RelayedMessage;
use crate::observe::{ElementKind, ObservationLedger};
use crate::sim::{Actor, Ctx, Outcome, SimEnvelope};

use super::actor_plumbing;

pub fn mailbox_id(domain: &str) -> String {
    format!("mailbox.{domain}")
}

/// Final delivery point for one mail domain.
pub struct Mailbox {
    ledger: ObservationLedger,
    domain: String,
    boxes: BTreeMap<String, Vec<RelayedMessage>>,
}

impl Mailbox {
    pub fn new(domain: &str) -> Self {
        Self {
            ledger: ObservationLedger::new(mailbox_id(domain), "MAILBOX"),
            domain: domain.to_string(),
            boxes: BTreeMap::new(),
        }
    }

    pub fn messages_for(&self, address: &str) -> &[RelayedMessage] {
        self.boxes.get(address).map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Actor for Mailbox {
    actor_plumbing!();

    fn handle(&mut self, env: &SimEnvelope, ctx: &mut Ctx) -> Result<(), FlowError> {
        let Message::MailDeliver(msg) = &env.payload else {
            return Err(FlowError::Unexpected(env.payload.kind().into()));
        };
        if msg.to.domain != self.domain {
            return Err(FlowError::WrongDomainForHop);
        }
        let mut msg = msg.clone();
        msg.hop_trace.push("MAILBOX".into());
        let address = msg.to.to_string();
        self.ledger
            .record(ctx.now(), ElementKind::UserIdentity, address.clone(), ctx.tx());
        ctx.outcome(Outcome::MailDelivered {
            tx: ctx.tx_owned(),
            mailbox: self.ledger.owner.clone(),
            address: address.clone(),
            hop_trace: msg.hop_trace.clone(),
            subject: msg.subject.clone(),
        });
        self.boxes.entry(address).or_default().push(msg);
        Ok(())
    }
}
