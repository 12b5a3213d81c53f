//! Discrete-event message bus.
//!
//! Envelopes are delivered in `(deliver_at, seq)` order. `seq` is assigned at
//! send time, so delivery between any pair of actors is FIFO and the whole
//! schedule is a function of the injected messages and the seed.
//!
//! Stress mode runs every actor on its own thread instead. Causality is
//! preserved, interleaving across independent actors is not.

use std::any::Any;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::FlowError;
use crate::federation::EntityId;
use crate::idmap::TidValue;
use crate::message::Message;
use crate::observe::{ElementKind, ObservationLedger};
use crate::{Attributes, SimTime};

pub const HARNESS: &str = "harness";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEnvelope {
    pub seq: u64,
    pub sent_at: SimTime,
    pub deliver_at: SimTime,
    pub from: String,
    pub to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_addr: Option<String>,
    /// Harness correlation label. Actors pass it along but never act on it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx: Option<String>,
    pub payload: Message,
}

/// Harness-visible results. Not part of any actor's observations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum Outcome {
    SessionEstablished {
        tx: Option<String>,
        sp: EntityId,
        subject: TidValue,
        assertion_id: String,
        attributes: Attributes,
    },
    Rejected {
        tx: Option<String>,
        actor: String,
        code: String,
        detail: String,
    },
    Released {
        tx: Option<String>,
        idp: EntityId,
        proxy: EntityId,
        names: BTreeSet<String>,
        sources: BTreeSet<String>,
        consent_record: Option<u64>,
    },
    ConsentRecorded {
        tx: Option<String>,
        record_id: u64,
        target: String,
    },
    ConsentRevoked {
        tx: Option<String>,
        record_id: u64,
    },
    MailDelivered {
        tx: Option<String>,
        mailbox: String,
        address: String,
        hop_trace: Vec<String>,
        subject: String,
    },
    LinkGranted {
        tx: Option<String>,
        sp: EntityId,
        tid2: TidValue,
        tid3: TidValue,
    },
    LinkDelivered {
        tx: Option<String>,
        sp: EntityId,
        tid2: TidValue,
        tid3: TidValue,
        payload: String,
    },
    WsCompleted {
        tx: Option<String>,
        sp: EntityId,
        subject: TidValue,
        token_id: String,
        attributes: Attributes,
    },
}

impl Outcome {
    pub fn tx(&self) -> Option<&str> {
        use Outcome::*;
        match self {
            SessionEstablished { tx, .. }
            | Rejected { tx, .. }
            | Released { tx, .. }
            | ConsentRecorded { tx, .. }
            | ConsentRevoked { tx, .. }
            | MailDelivered { tx, .. }
            | LinkGranted { tx, .. }
            | LinkDelivered { tx, .. }
            | WsCompleted { tx, .. } => tx.as_deref(),
        }
    }

    pub fn rejection_code(&self) -> Option<&str> {
        match self {
            Outcome::Rejected { code, .. } => Some(code),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "kebab-case")]
#[allow(clippy::large_enum_variant)] // almost every entry is a delivery
pub enum TranscriptEntry {
    Deliver(SimEnvelope),
    Drop { seq: u64, time: SimTime },
    Outcome { time: SimTime, outcome: Outcome },
}

struct Outgoing {
    to: String,
    payload: Message,
    client_addr: Option<String>,
}

/// What a handler may do besides mutating its own state.
pub struct Ctx {
    now: SimTime,
    tx: Option<String>,
    out: Vec<Outgoing>,
    outcomes: Vec<Outcome>,
}

impl Ctx {
    fn new(now: SimTime, tx: Option<String>) -> Self {
        Self {
            now,
            tx,
            out: Vec::new(),
            outcomes: Vec::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn tx(&self) -> Option<&str> {
        self.tx.as_deref()
    }

    pub fn tx_owned(&self) -> Option<String> {
        self.tx.clone()
    }

    pub fn send(&mut self, to: impl Into<String>, payload: Message) {
        self.out.push(Outgoing {
            to: to.into(),
            payload,
            client_addr: None,
        });
    }

    /// Front-channel send: the receiver sees `client_addr`.
    pub fn send_from_client(&mut self, to: impl Into<String>, payload: Message, client_addr: &str) {
        self.out.push(Outgoing {
            to: to.into(),
            payload,
            client_addr: Some(client_addr.to_string()),
        });
    }

    pub fn outcome(&mut self, outcome: Outcome) {
        self.outcomes.push(outcome);
    }
}

/// An actor processes one envelope at a time and touches nothing but its
/// own state and the context.
pub trait Actor: Send {
    fn id(&self) -> &str;
    fn ledger(&self) -> &ObservationLedger;
    fn ledger_mut(&mut self) -> &mut ObservationLedger;
    fn handle(&mut self, env: &SimEnvelope, ctx: &mut Ctx) -> Result<(), FlowError>;
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

/// Per-actor RNG for one run: `ChaCha20(SHA-256(run_seed || actor_id))`.
pub fn actor_rng(run_seed: u64, actor_id: &str) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(b"pefim-actor-rng-v1");
    h.update(run_seed.to_be_bytes());
    h.update(actor_id.as_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub latency: SimTime,
    /// Extra delay drawn uniformly from `0..=jitter`.
    pub jitter: SimTime,
    /// Probability of dropping an actor-to-actor envelope. Harness
    /// injections are never dropped.
    pub loss_rate: f64,
    /// Deliveries allowed per call to [`Simulation::run_until_quiescent`].
    pub step_budget: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            latency: 1,
            jitter: 0,
            loss_rate: 0.0,
            step_budget: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("step budget exhausted after {steps} deliveries with {pending} envelopes pending")]
    LivelockDetected { steps: usize, pending: usize },
}

pub struct Simulation {
    config: SimConfig,
    actors: BTreeMap<String, Box<dyn Actor>>,
    queue: BinaryHeap<Reverse<(SimTime, u64)>>,
    pending: BTreeMap<u64, SimEnvelope>,
    last_delivery: BTreeMap<(String, String), SimTime>,
    now: SimTime,
    next_seq: u64,
    steps: usize,
    rng: ChaCha20Rng,
    transcript: Vec<TranscriptEntry>,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Self {
        let rng = actor_rng(config.seed, "sim-transport");
        Self {
            config,
            actors: BTreeMap::new(),
            queue: BinaryHeap::new(),
            pending: BTreeMap::new(),
            last_delivery: BTreeMap::new(),
            now: 0,
            next_seq: 0,
            steps: 0,
            rng,
            transcript: Vec::new(),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn add_actor(&mut self, actor: Box<dyn Actor>) {
        self.actors.insert(actor.id().to_string(), actor);
    }

    pub fn actor(&self, id: &str) -> Option<&dyn Actor> {
        self.actors.get(id).map(|a| a.as_ref())
    }

    pub fn actor_as<T: 'static>(&self, id: &str) -> Option<&T> {
        self.actors.get(id)?.as_any().downcast_ref()
    }

    pub fn actor_as_mut<T: 'static>(&mut self, id: &str) -> Option<&mut T> {
        self.actors.get_mut(id)?.as_any_mut().downcast_mut()
    }

    pub fn actor_ids(&self) -> impl Iterator<Item = &str> {
        self.actors.keys().map(String::as_str)
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn advance(&mut self, dt: SimTime) {
        self.now += dt;
    }

    /// Total deliveries so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn outcomes(&self) -> impl Iterator<Item = &Outcome> {
        self.transcript.iter().filter_map(|e| match e {
            TranscriptEntry::Outcome { outcome, .. } => Some(outcome),
            _ => None,
        })
    }

    pub fn delivered(&self) -> impl Iterator<Item = &SimEnvelope> {
        self.transcript.iter().filter_map(|e| match e {
            TranscriptEntry::Deliver(env) => Some(env),
            _ => None,
        })
    }

    pub fn ledgers(&self) -> Vec<ObservationLedger> {
        self.actors.values().map(|a| a.ledger().clone()).collect()
    }

    pub fn inject(&mut self, to: &str, payload: Message, tx: Option<String>) -> u64 {
        self.enqueue(HARNESS.to_string(), to.to_string(), payload, None, tx, self.now)
    }

    /// Re-send a previously delivered envelope unchanged, as an attacker
    /// replaying captured traffic would. `tx` relabels it for the harness.
    pub fn reinject(&mut self, env: &SimEnvelope, tx: Option<String>) -> u64 {
        self.enqueue(
            env.from.clone(),
            env.to.clone(),
            env.payload.clone(),
            env.client_addr.clone(),
            tx,
            self.now,
        )
    }

    /// Log an outcome produced by the harness itself, such as an operator
    /// action on the consent store.
    pub fn record_outcome(&mut self, outcome: Outcome) {
        self.transcript.push(TranscriptEntry::Outcome {
            time: self.now,
            outcome,
        });
    }

    fn enqueue(
        &mut self,
        from: String,
        to: String,
        payload: Message,
        client_addr: Option<String>,
        tx: Option<String>,
        sent_at: SimTime,
    ) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        let jitter = if self.config.jitter > 0 {
            self.rng.gen_range(0..=self.config.jitter)
        } else {
            0
        };
        let key = (from.clone(), to.clone());
        let floor = self.last_delivery.get(&key).copied().unwrap_or(0);
        let deliver_at = (sent_at + self.config.latency + jitter).max(floor);
        self.last_delivery.insert(key, deliver_at);
        self.queue.push(Reverse((deliver_at, seq)));
        self.pending.insert(
            seq,
            SimEnvelope {
                seq,
                sent_at,
                deliver_at,
                from,
                to,
                client_addr,
                tx,
                payload,
            },
        );
        seq
    }

    pub fn run_until_quiescent(&mut self) -> Result<usize, SimError> {
        let mut steps = 0;
        while let Some(Reverse((_, seq))) = self.queue.pop() {
            if steps >= self.config.step_budget {
                self.queue.push(Reverse((self.pending[&seq].deliver_at, seq)));
                return Err(SimError::LivelockDetected {
                    steps,
                    pending: self.pending.len(),
                });
            }
            let env = self.pending.remove(&seq).expect("queued envelopes are pending");
            steps += 1;
            self.steps += 1;
            self.now = self.now.max(env.deliver_at);
            if env.from != HARNESS
                && self.config.loss_rate > 0.0
                && self.rng.gen_bool(self.config.loss_rate)
            {
                self.transcript.push(TranscriptEntry::Drop {
                    seq,
                    time: self.now,
                });
                continue;
            }
            self.transcript.push(TranscriptEntry::Deliver(env.clone()));
            let now = self.now;
            let (outcomes, out) = match self.actors.get_mut(&env.to) {
                Some(actor) => deliver(actor.as_mut(), &env, now),
                None => (vec![unknown_destination(&env)], Vec::new()),
            };
            for outcome in outcomes {
                self.transcript.push(TranscriptEntry::Outcome { time: now, outcome });
            }
            for o in out {
                self.enqueue(env.to.clone(), o.to, o.payload, o.client_addr, env.tx.clone(), now);
            }
        }
        Ok(steps)
    }

    /// Drain the queue with one thread per actor.
    pub fn run_stress(&mut self) -> Result<usize, SimError> {
        let latency = self.config.latency;
        let budget = self.config.step_budget;
        let initial: Vec<SimEnvelope> = std::mem::take(&mut self.pending).into_values().collect();
        self.queue.clear();
        let in_flight = AtomicUsize::new(initial.len());
        let steps = AtomicUsize::new(0);
        let overrun = AtomicBool::new(false);
        let seq = AtomicU64::new(self.next_seq);
        let max_time = AtomicU64::new(self.now);
        let log = Mutex::new(Vec::new());
        let (router_tx, router_rx) = mpsc::channel::<SimEnvelope>();

        std::thread::scope(|scope| {
            let mut inboxes: BTreeMap<String, mpsc::Sender<SimEnvelope>> = BTreeMap::new();
            for (id, actor) in self.actors.iter_mut() {
                let (tx, rx) = mpsc::channel::<SimEnvelope>();
                inboxes.insert(id.clone(), tx);
                let router = router_tx.clone();
                let (in_flight, steps, overrun, seq, max_time, log) =
                    (&in_flight, &steps, &overrun, &seq, &max_time, &log);
                scope.spawn(move || {
                    for env in rx {
                        if steps.fetch_add(1, Ordering::SeqCst) >= budget {
                            overrun.store(true, Ordering::SeqCst);
                            in_flight.fetch_sub(1, Ordering::SeqCst);
                            continue;
                        }
                        let now = env.deliver_at;
                        max_time.fetch_max(now, Ordering::SeqCst);
                        let (outcomes, out) = deliver(actor.as_mut(), &env, now);
                        {
                            let mut log = log.lock().expect("log lock");
                            log.push(TranscriptEntry::Deliver(env.clone()));
                            for outcome in outcomes {
                                log.push(TranscriptEntry::Outcome { time: now, outcome });
                            }
                        }
                        for o in out {
                            in_flight.fetch_add(1, Ordering::SeqCst);
                            let next = SimEnvelope {
                                seq: seq.fetch_add(1, Ordering::SeqCst),
                                sent_at: now,
                                deliver_at: now + latency,
                                from: env.to.clone(),
                                to: o.to,
                                client_addr: o.client_addr,
                                tx: env.tx.clone(),
                                payload: o.payload,
                            };
                            let _ = router.send(next);
                        }
                        in_flight.fetch_sub(1, Ordering::SeqCst);
                    }
                });
            }
            drop(router_tx);
            let route = |env: SimEnvelope| match inboxes.get(&env.to) {
                Some(inbox) => {
                    let _ = inbox.send(env);
                }
                None => {
                    let mut log = log.lock().expect("log lock");
                    log.push(TranscriptEntry::Deliver(env.clone()));
                    log.push(TranscriptEntry::Outcome {
                        time: env.deliver_at,
                        outcome: unknown_destination(&env),
                    });
                    in_flight.fetch_sub(1, Ordering::SeqCst);
                }
            };
            for env in initial {
                route(env);
            }
            loop {
                match router_rx.recv_timeout(Duration::from_millis(1)) {
                    Ok(env) => route(env),
                    Err(_) if in_flight.load(Ordering::SeqCst) == 0 => break,
                    Err(_) => {}
                }
            }
            drop(inboxes);
        });

        self.next_seq = seq.into_inner();
        self.now = max_time.into_inner();
        let steps = steps.into_inner().min(budget);
        self.steps += steps;
        self.transcript.extend(log.into_inner().expect("log lock"));
        if overrun.into_inner() {
            return Err(SimError::LivelockDetected { steps, pending: 0 });
        }
        Ok(steps)
    }
}

fn unknown_destination(env: &SimEnvelope) -> Outcome {
    Outcome::Rejected {
        tx: env.tx.clone(),
        actor: env.to.clone(),
        code: "UnknownEntity".into(),
        detail: format!("no actor {:?}", env.to),
    }
}

fn deliver(actor: &mut dyn Actor, env: &SimEnvelope, now: SimTime) -> (Vec<Outcome>, Vec<Outgoing>) {
    if let Some(addr) = &env.client_addr {
        actor
            .ledger_mut()
            .record(now, ElementKind::ClientAddr, addr.clone(), env.tx.as_deref());
    }
    let mut ctx = Ctx::new(now, env.tx.clone());
    let result = actor.handle(env, &mut ctx);
    let mut outcomes = ctx.outcomes;
    if let Err(e) = result {
        outcomes.push(Outcome::Rejected {
            tx: env.tx.clone(),
            actor: actor.id().to_string(),
            code: e.code().to_string(),
            detail: e.to_string(),
        });
    }
    (outcomes, ctx.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Bounces a counter below 1000 back and forth until it reaches zero.
    struct Pinger {
        id: String,
        peer: String,
        ledger: ObservationLedger,
        seen: Vec<u64>,
    }

    impl Actor for Pinger {
        fn id(&self) -> &str {
            &self.id
        }
        fn ledger(&self) -> &ObservationLedger {
            &self.ledger
        }
        fn ledger_mut(&mut self) -> &mut ObservationLedger {
            &mut self.ledger
        }
        fn handle(&mut self, env: &SimEnvelope, ctx: &mut Ctx) -> Result<(), FlowError> {
            if let Message::ConsentGranted { record_id } = env.payload {
                self.seen.push(record_id);
                if record_id > 0 && record_id < 1000 {
                    ctx.send(self.peer.clone(), Message::ConsentGranted { record_id: record_id - 1 });
                }
                Ok(())
            } else {
                Err(FlowError::Unexpected(env.payload.kind().into()))
            }
        }
        fn as_any(&self) -> &dyn Any {
            self
        }
        fn as_any_mut(&mut self) -> &mut dyn Any {
            self
        }
    }

    fn pair(config: SimConfig) -> Simulation {
        let mut sim = Simulation::new(config);
        for (a, b) in [("a", "b"), ("b", "a")] {
            sim.add_actor(Box::new(Pinger {
                id: a.into(),
                peer: b.into(),
                ledger: ObservationLedger::new(a, "TEST"),
                seen: vec![],
            }));
        }
        sim
    }

    fn render(sim: &Simulation) -> String {
        serde_json::to_string(sim.transcript()).unwrap()
    }

    #[test]
    fn same_seed_same_transcript() {
        let run = || {
            let mut sim = pair(SimConfig { seed: 3, jitter: 4, ..SimConfig::default() });
            sim.inject("a", Message::ConsentGranted { record_id: 10 }, Some("t1".into()));
            sim.inject("b", Message::ConsentGranted { record_id: 5 }, Some("t2".into()));
            sim.run_until_quiescent().unwrap();
            render(&sim)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_budget_with_pending_is_livelock() {
        let mut sim = pair(SimConfig { step_budget: 0, ..SimConfig::default() });
        sim.inject("a", Message::ConsentGranted { record_id: 1 }, None);
        assert!(matches!(
            sim.run_until_quiescent(),
            Err(SimError::LivelockDetected { steps: 0, pending: 1 })
        ));
    }

    #[test]
    fn fifo_per_pair_under_jitter() {
        let mut sim = pair(SimConfig { seed: 9, jitter: 10, ..SimConfig::default() });
        for i in 0..20 {
            sim.inject("a", Message::ConsentGranted { record_id: 1000 + i }, None);
        }
        sim.run_until_quiescent().unwrap();
        let order: Vec<u64> = sim.actor_as::<Pinger>("a").unwrap().seen.clone();
        assert_eq!(order, (1000..1020).collect::<Vec<_>>());
    }

    #[test]
    fn unknown_destination_is_rejected() {
        let mut sim = pair(SimConfig::default());
        sim.inject("nobody", Message::SsoStart, Some("t".into()));
        sim.run_until_quiescent().unwrap();
        assert_eq!(sim.outcomes().next().unwrap().rejection_code(), Some("UnknownEntity"));
    }

    #[test]
    fn stress_mode_reaches_the_same_end_state() {
        let mut sim = pair(SimConfig::default());
        sim.inject("a", Message::ConsentGranted { record_id: 50 }, None);
        let steps = sim.run_stress().unwrap();
        assert_eq!(steps, 51);
        let a = sim.actor_as::<Pinger>("a").unwrap().seen.len();
        let b = sim.actor_as::<Pinger>("b").unwrap().seen.len();
        assert_eq!(a + b, 51);
    }

    #[test]
    fn client_addr_lands_in_receiver_ledger() {
        let mut sim = pair(SimConfig::default());
        sim.enqueue("ua".into(), "a".into(), Message::ConsentGranted { record_id: 0 }, Some("198.51.100.4".into()), None, 0);
        sim.run_until_quiescent().unwrap();
        let l = sim.actor("a").unwrap().ledger();
        assert_eq!(l.of_kind(ElementKind::ClientAddr).next().unwrap().value, "198.51.100.4");
    }
}
