use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use super::{ReplayTarget, Scenario, Step};
use crate::actors::{
    reference_id_for, CaActor, DiscoveryService, IdentityProvider, Mailbox,
    PrincipalRecord, ServiceBroker, ServiceProvider, UserAgent, WsClient,
};
use crate::audit::{run_audit, AuditError, AuditInput, AuditReport, TxInfo};
use crate::consent::{ConsentStore, StateLock};
use crate::crypto::{HybridCipher, NullCipher, PayloadCipher};
use crate::error::ConfigError;
use crate::federation::{EntityId, Federation, FederationRegistry, Role};
use crate::idmap::TidValue;
use crate::message::{ConsentSubject, Control, Message};
use crate::sim::{actor_rng, Outcome, SimConfig, SimError, Simulation};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overrides the scenario's seed.
    pub seed: Option<u64>,
    pub stress: bool,
    /// Overrides the federation's minimum proxy-group size.
    pub min_group_size: Option<usize>,
    /// Consent store loaded before and saved after the run.
    pub state_dir: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("state directory: {0}")]
    State(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

/// How one scripted step went.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepResult {
    pub index: usize,
    pub kind: &'static str,
    /// Per transaction: `ok`, a rejection code, or `incomplete`.
    pub observed: Vec<(String, String)>,
    pub expect: Option<String>,
}

impl StepResult {
    pub fn ok(&self) -> bool {
        match &self.expect {
            None => true,
            Some(e) => !self.observed.is_empty() && self.observed.iter().all(|(_, o)| o == e),
        }
    }

    /// Observed results collapsed to `result xN` runs.
    pub fn observed_summary(&self) -> String {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for (_, o) in &self.observed {
            *counts.entry(o).or_default() += 1;
        }
        if counts.is_empty() {
            return "ok".into();
        }
        counts
            .iter()
            .map(|(o, n)| if *n == 1 { o.to_string() } else { format!("{o} x{n}") })
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn render(&self) -> String {
        format!(
            "{:<9} {:<14} observed={} expect={} {}",
            format!("step[{}]", self.index),
            self.kind,
            self.observed_summary(),
            self.expect.as_deref().unwrap_or("-"),
            if self.ok() { "OK" } else { "MISMATCH" },
        )
    }
}

pub struct RunOutput {
    pub scenario: Scenario,
    pub seed: u64,
    pub federation: Federation,
    pub sim: Simulation,
    pub input: AuditInput,
    pub report: AuditReport,
    pub steps: Vec<StepResult>,
}

impl RunOutput {
    pub fn script_ok(&self) -> bool {
        self.steps.iter().all(StepResult::ok)
    }

    pub fn passed(&self) -> bool {
        self.report.passed() && self.script_ok()
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{} script={} steps={}",
            self.report.summary_line(),
            if self.script_ok() { "OK" } else { "FAIL" },
            self.steps.len()
        )
    }

    pub fn outcomes_for<'a>(&'a self, txs: &'a BTreeSet<String>) -> impl Iterator<Item = &'a Outcome> {
        self.sim
            .outcomes()
            .filter(move |o| o.tx().is_some_and(|t| txs.contains(t)))
    }
}

/// Whether `o` is the outcome that completes a step of kind `kind`.
fn completes(kind: &str, o: &Outcome) -> bool {
    matches!(
        (kind, o),
        ("websso", Outcome::SessionEstablished { .. })
            | ("wstrust", Outcome::WsCompleted { .. })
            | ("consent-grant", Outcome::ConsentRecorded { .. })
            | ("consent-revoke", Outcome::ConsentRevoked { .. })
            | ("send-message", Outcome::MailDelivered { .. })
            | ("link", Outcome::LinkDelivered { .. })
            | ("replay", Outcome::SessionEstablished { .. } | Outcome::WsCompleted { .. })
    )
}

struct Runner<'a> {
    scenario: &'a Scenario,
    registry: Arc<FederationRegistry>,
    sim: Simulation,
    stress: bool,
    txs: Vec<TxInfo>,
    /// Latest TID2 for each (principal, SP), learned from session outcomes.
    tid2: BTreeMap<(String, EntityId), TidValue>,
    last_record: Option<u64>,
}

fn sp_cipher(disabled: bool) -> Box<dyn PayloadCipher> {
    if disabled {
        Box::new(NullCipher)
    } else {
        Box::new(HybridCipher)
    }
}

fn populate(sim: &mut Simulation, scenario: &Scenario, fed: &Federation, seed: u64, store: ConsentStore) {
    let registry = Arc::new(fed.registry.clone());
    let by_idp = scenario.principals_at();
    let sb = registry.sb().expect("validated federation").entity_id.clone();
    let mut store = Some(store);
    for desc in registry.entities.values() {
        let id = &desc.entity_id;
        let keys = &fed.keys[id];
        let rng = actor_rng(seed, id.as_str());
        match desc.role {
            Role::Idp => {
                let principals = by_idp
                    .get(id)
                    .into_iter()
                    .flatten()
                    .map(|p| PrincipalRecord {
                        principal_id: p.id.clone(),
                        reference_id: reference_id_for(fed.seed, id, &p.id),
                        password: p.password.clone(),
                        email: p.email.clone(),
                        attributes: p.attributes.clone(),
                    })
                    .collect();
                sim.add_actor(Box::new(IdentityProvider::new(
                    id,
                    registry.clone(),
                    keys.signing.clone(),
                    keys.encryption.clone().expect("IdPs have encryption keys"),
                    keys.derivation.clone().expect("IdPs have derivation keys"),
                    principals,
                    fed.attribute_sources.get(id).cloned().unwrap_or_default(),
                    sp_cipher(scenario.faults.disable_encryption),
                    rng,
                )));
            }
            Role::Sb => sim.add_actor(Box::new(ServiceBroker::new(
                id,
                registry.clone(),
                keys.signing.clone(),
                keys.derivation.clone().expect("the SB has a derivation key"),
                store.take().unwrap_or_default(),
                rng,
            ))),
            Role::Ca => sim.add_actor(Box::new(CaActor::new(
                id,
                keys.signing.clone(),
                fed.enrollment.clone(),
                registry.policy.onetime_cert_validity,
                rng,
            ))),
            Role::Sp => sim.add_actor(Box::new(ServiceProvider::new(
                id,
                registry.clone(),
                keys.signing.clone(),
                fed.enrollment.clone(),
                rng,
            ))),
            Role::Discovery => sim.add_actor(Box::new(DiscoveryService::new(id, registry.clone()))),
            // Consent lives in the broker; a separate consent entity is metadata only.
            Role::Consent => {}
        }
    }
    let mut domains = BTreeSet::new();
    for p in &scenario.principals {
        let home_domain = registry
            .entity(&p.home_idp)
            .and_then(|d| d.endpoint("home_domain"))
            .expect("validated principal");
        sim.add_actor(Box::new(UserAgent::new(
            &p.id,
            &p.password,
            home_domain,
            p.home_idp.clone(),
            sb.clone(),
            &p.client_addr,
        )));
        let ws_id = WsClient::actor_id(&p.id);
        sim.add_actor(Box::new(WsClient::new(
            &p.id,
            &p.password,
            p.home_idp.clone(),
            &p.client_addr,
            registry.clone(),
            fed.enrollment.clone(),
            actor_rng(seed, &ws_id),
        )));
        domains.insert(p.email_domain().to_string());
    }
    for d in domains {
        sim.add_actor(Box::new(Mailbox::new(&d)));
    }
}

impl Runner<'_> {
    fn drain(&mut self) -> Result<(), SimError> {
        if self.stress {
            self.sim.run_stress()?;
        } else {
            self.sim.run_until_quiescent()?;
        }
        Ok(())
    }

    fn open_tx(&mut self, index: usize, sub: Option<usize>, kind: &str, principal: Option<&str>, sp: Option<&EntityId>) -> String {
        let tx = match sub {
            None => format!("tx-{:03}", index + 1),
            Some(k) => format!("tx-{:03}.{:03}", index + 1, k + 1),
        };
        self.txs.push(TxInfo {
            tx: tx.clone(),
            step: kind.to_string(),
            principal: principal.map(str::to_string),
            sp: sp.cloned(),
        });
        tx
    }

    fn sb(&mut self) -> &mut ServiceBroker {
        let id = self.registry.sb().expect("validated federation").entity_id.to_string();
        self.sim.actor_as_mut::<ServiceBroker>(&id).expect("broker actor")
    }

    fn tid2_for(&self, principal: &str, sp: &EntityId) -> Option<TidValue> {
        self.tid2.get(&(principal.to_string(), sp.clone())).cloned()
    }

    fn run_step(&mut self, index: usize, step: &Step) -> Result<Vec<String>, SimError> {
        let kind = step.label();
        let mut opened = Vec::new();
        match step {
            Step::Websso { principal, sp, password } => {
                let tx = self.open_tx(index, None, kind, Some(principal), Some(sp));
                let start = Control::StartWebSso {
                    sp: sp.clone(),
                    password_override: password.clone(),
                };
                self.sim
                    .inject(&UserAgent::actor_id(principal), Message::Control(start), Some(tx.clone()));
                opened.push(tx);
                self.drain()?;
            }
            Step::Wstrust { principal, sp, confirmation, swap_key, present_to, password } => {
                let tx = self.open_tx(index, None, kind, Some(principal), Some(sp));
                let ws = WsClient::actor_id(principal);
                let real = self.scenario.principal(principal).expect("validated").password.clone();
                if let Some(pw) = password {
                    self.sim.actor_as_mut::<WsClient>(&ws).expect("ws client").set_password(pw);
                }
                let start = Control::StartWsTrust {
                    sp: sp.clone(),
                    confirmation: *confirmation,
                    swap_key: *swap_key,
                    present_to: present_to.clone(),
                };
                self.sim.inject(&ws, Message::Control(start), Some(tx.clone()));
                opened.push(tx);
                self.drain()?;
                self.sim.actor_as_mut::<WsClient>(&ws).expect("ws client").set_password(&real);
            }
            Step::ConsentGrant { principal, sp, link, mode, attributes } => {
                let subject = match (sp, link) {
                    (Some(sp), _) => ConsentSubject::Sp { sp: sp.clone() },
                    (None, Some([a, b])) => ConsentSubject::Link { sp_a: a.clone(), sp_b: b.clone() },
                    (None, None) => unreachable!("validated"),
                };
                let tx = self.open_tx(index, None, kind, Some(principal), sp.as_ref());
                let start = Control::StartConsent {
                    subject,
                    mode: *mode,
                    attributes: attributes.clone(),
                };
                self.sim
                    .inject(&UserAgent::actor_id(principal), Message::Control(start), Some(tx.clone()));
                opened.push(tx);
                self.drain()?;
            }
            Step::ConsentRevoke { record } => {
                let tx = self.open_tx(index, None, kind, None, None);
                let now = self.sim.now();
                let target = record.or(self.last_record);
                let result = match target {
                    Some(id) => self.sb().consent_store_mut().revoke_consent(id, now).map(|r| r.id).map_err(|e| {
                        let flow: crate::FlowError = e.clone().into();
                        (flow.code().to_string(), e.to_string())
                    }),
                    None => Err(("UnknownRecord".to_string(), "no consent granted yet".to_string())),
                };
                let sb = self.registry.sb().expect("validated").entity_id.to_string();
                self.sim.record_outcome(match result {
                    Ok(record_id) => Outcome::ConsentRevoked { tx: Some(tx.clone()), record_id },
                    Err((code, detail)) => Outcome::Rejected { tx: Some(tx.clone()), actor: sb, code, detail },
                });
                opened.push(tx);
            }
            Step::SendMessage { principal, sp, subject, body, count } => {
                let tid2 = self.tid2_for(principal, sp);
                for k in 0..*count {
                    let tx = self.open_tx(index, Some(k), kind, Some(principal), Some(sp));
                    match &tid2 {
                        Some(t) => {
                            let ctl = Control::SendMail {
                                to_tid2: t.clone(),
                                subject: format!("{subject} #{}", k + 1),
                                body: body.clone(),
                            };
                            self.sim.inject(sp.as_str(), Message::Control(ctl), Some(tx.clone()));
                        }
                        None => self.no_session(&tx, principal, sp),
                    }
                    opened.push(tx);
                }
                self.drain()?;
            }
            Step::Link { principal, sp, peer, payload, reply } => {
                let tx = self.open_tx(index, None, kind, Some(principal), Some(sp));
                match self.tid2_for(principal, sp) {
                    Some(t) => {
                        let ctl = Control::Link {
                            tid2: t,
                            peer_sp: peer.clone(),
                            payload: payload.clone(),
                            reply: reply.clone(),
                        };
                        self.sim.inject(sp.as_str(), Message::Control(ctl), Some(tx.clone()));
                    }
                    None => self.no_session(&tx, principal, sp),
                }
                opened.push(tx);
                self.drain()?;
            }
            Step::Replay { target, sp, trials } => {
                let candidates: Vec<_> = self
                    .sim
                    .delivered()
                    .filter(|env| {
                        let to = EntityId::new(env.to.clone());
                        let is_sp = self.registry.entity(&to).is_some_and(|d| d.role == Role::Sp);
                        let wanted = match target {
                            ReplayTarget::Assertion => matches!(env.payload, Message::Response(_)),
                            ReplayTarget::Token => matches!(env.payload, Message::WsInvoke { .. }),
                        };
                        is_sp && wanted && sp.as_ref().is_none_or(|s| *s == to)
                    })
                    .cloned()
                    .collect();
                for k in 0..*trials {
                    let victim = candidates.get(k % candidates.len().max(1)).map(|e| EntityId::new(e.to.clone()));
                    let tx = self.open_tx(index, Some(k), kind, None, victim.as_ref());
                    if let Some(env) = candidates.get(k % candidates.len().max(1)) {
                        self.sim.reinject(env, Some(tx.clone()));
                    }
                    opened.push(tx);
                }
                self.drain()?;
            }
            Step::SpFaults { sp, reuse_cert, claim_proxy_of } => {
                let claim_proxy = claim_proxy_of
                    .as_ref()
                    .and_then(|other| self.registry.group_of(other))
                    .map(|g| g.proxy_id.clone());
                let ctl = Control::SpFaults {
                    reuse_cert: *reuse_cert,
                    claim_proxy,
                };
                self.sim.inject(sp.as_str(), Message::Control(ctl), None);
                self.drain()?;
            }
            Step::Advance { seconds } => self.sim.advance(*seconds),
        }
        Ok(opened)
    }

    fn no_session(&mut self, tx: &str, principal: &str, sp: &EntityId) {
        self.sim.record_outcome(Outcome::Rejected {
            tx: Some(tx.to_string()),
            actor: crate::sim::HARNESS.to_string(),
            code: "NoSession".into(),
            detail: format!("no session for {principal} at {sp} earlier in the run"),
        });
    }

    fn learn(&mut self, opened: &[String]) {
        let by_tx: BTreeMap<&str, &TxInfo> = self.txs.iter().map(|t| (t.tx.as_str(), t)).collect();
        for o in self.sim.outcomes() {
            let Some(tx) = o.tx().filter(|t| opened.iter().any(|x| x == t)) else {
                continue;
            };
            match o {
                Outcome::SessionEstablished { sp, subject, .. } => {
                    if let Some(p) = by_tx.get(tx).and_then(|t| t.principal.as_ref()) {
                        self.tid2.insert((p.clone(), sp.clone()), subject.clone());
                    }
                }
                Outcome::ConsentRecorded { record_id, .. } => self.last_record = Some(*record_id),
                _ => {}
            }
        }
    }

    fn observe(&self, kind: &str, opened: &[String]) -> Vec<(String, String)> {
        opened
            .iter()
            .map(|tx| {
                let outcomes: Vec<&Outcome> = self.sim.outcomes().filter(|o| o.tx() == Some(tx)).collect();
                let result = if let Some(code) = outcomes.iter().find_map(|o| o.rejection_code()) {
                    code.to_string()
                } else if outcomes.iter().any(|o| completes(kind, o)) {
                    "ok".to_string()
                } else {
                    "incomplete".to_string()
                };
                (tx.clone(), result)
            })
            .collect()
    }
}

/// Load, run and audit a scenario. Writes nothing except the consent store
/// in `state_dir`; see [`RunOutput::write`] for the transcript directory.
pub fn run_scenario(path: &Path, opts: &RunOptions) -> Result<RunOutput, RunError> {
    let scenario = Scenario::load(path)?;
    let fed = scenario.build(opts.min_group_size)?;
    let seed = opts.seed.unwrap_or(scenario.seed);

    let lock = match &opts.state_dir {
        Some(dir) => Some(StateLock::acquire(dir).map_err(|e| RunError::State(e.to_string()))?),
        None => None,
    };
    let store = match &opts.state_dir {
        Some(dir) => ConsentStore::load(dir).map_err(|e| RunError::State(format!("{}: {e}", dir.display())))?,
        None => ConsentStore::new(),
    };

    let mut sim = Simulation::new(SimConfig {
        seed,
        ..SimConfig::default()
    });
    populate(&mut sim, &scenario, &fed, seed, store);

    let mut runner = Runner {
        scenario: &scenario,
        registry: Arc::new(fed.registry.clone()),
        sim,
        stress: opts.stress,
        txs: Vec::new(),
        tid2: BTreeMap::new(),
        last_record: None,
    };
    let mut steps = Vec::new();
    for (i, spec) in scenario.steps.iter().enumerate() {
        let opened = runner.run_step(i, &spec.action)?;
        runner.learn(&opened);
        steps.push(StepResult {
            index: i,
            kind: spec.action.label(),
            observed: runner.observe(spec.action.label(), &opened),
            expect: spec.expect.clone(),
        });
    }

    if let Some(dir) = &opts.state_dir {
        runner
            .sb()
            .consent_store()
            .save(dir)
            .map_err(|e| RunError::State(format!("{}: {e}", dir.display())))?;
    }
    drop(lock);

    let Runner { sim, txs, .. } = runner;
    let input = AuditInput {
        label: format!("{} seed={}", scenario.name, seed),
        registry: fed.registry.clone(),
        ledgers: sim.ledgers(),
        outcomes: sim.outcomes().cloned().collect(),
        txs,
    };
    let report = run_audit(&input)?;
    Ok(RunOutput {
        scenario,
        seed,
        federation: fed,
        sim,
        input,
        report,
        steps,
    })
}
