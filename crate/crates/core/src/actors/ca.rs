use rand_chacha::ChaCha20Rng;

use crate::crypto::{fingerprint, CertificateAuthority, EnrollmentKey, IssuanceRecord, SigningKey};
use crate::error::FlowError;
use crate::federation::EntityId;
use crate::message::Message;
use crate::observe::{ElementKind, ObservationLedger};
use crate::sim::{Actor, Ctx, SimEnvelope};

use super::actor_plumbing;

/// Issues one-time certificates to anonymous but enrolled requesters.
///
/// The requester's transport address is not recorded: the CA answers on the
/// channel the request came in on and keeps only the issuance log.
pub struct CaActor {
    ledger: ObservationLedger,
    ca: CertificateAuthority,
    rng: ChaCha20Rng,
}

impl CaActor {
    pub fn new(
        id: &EntityId,
        signing: SigningKey,
        enrollment: EnrollmentKey,
        validity: u64,
        rng: ChaCha20Rng,
    ) -> Self {
        let ca = CertificateAuthority::new(signing, enrollment, validity);
        let mut ledger = ObservationLedger::new(id.as_str(), "CA");
        ledger.record(0, ElementKind::SigningRoot, fingerprint(&ca.trust_root().0), None);
        Self { ledger, ca, rng }
    }

    pub fn issuance_log(&self) -> &[IssuanceRecord] {
        self.ca.issuance_log()
    }
}

impl Actor for CaActor {
    actor_plumbing!();

    fn handle(&mut self, env: &SimEnvelope, ctx: &mut Ctx) -> Result<(), FlowError> {
        let Message::CertIssue { nonce, request } = &env.payload else {
            return Err(FlowError::Unexpected(env.payload.kind().into()));
        };
        match self.ca.issue(request, ctx.now(), &mut self.rng) {
            Ok(cert) => {
                // Deliberately untagged: nothing at the CA ties a key to a flow.
                self.ledger
                    .record(ctx.now(), ElementKind::EncKeyPublic, cert.public_key.to_b64(), None);
                let issued = Message::CertIssued {
                    nonce: nonce.clone(),
                    cert,
                };
                ctx.send(env.from.clone(), issued);
                Ok(())
            }
            Err(e) => {
                ctx.send(env.from.clone(), Message::CertDenied { nonce: nonce.clone() });
                Err(e.into())
            }
        }
    }
}
