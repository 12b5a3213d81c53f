//! Requirement predicates over ledgers, outcomes and the registry.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::federation::{EntityId, FederationRegistry};
use crate::idmap::TidValue;
use crate::observe::{is_link_tag, ElementKind, LedgerEvent, ObservationLedger};
use crate::sim::Outcome;

use super::AuditInput;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pass,
    /// Holds, but the configuration gives little protection.
    Weak,
    Fail,
    NotApplicable,
}

impl Verdict {
    pub fn label(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Weak => "WEAK",
            Verdict::Fail => "FAIL",
            Verdict::NotApplicable => "N/A",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequirementResult {
    pub id: String,
    pub title: String,
    pub verdict: Verdict,
    /// The predicate that was evaluated.
    pub predicate: String,
    /// Ledger event references (`owner#seq`), outcome references or counts.
    pub evidence: Vec<String>,
}

fn result(id: &str, title: &str, predicate: &str, verdict: Verdict, evidence: Vec<String>) -> RequirementResult {
    RequirementResult {
        id: id.into(),
        title: title.into(),
        verdict,
        predicate: predicate.into(),
        evidence,
    }
}

fn cite(ledger: &ObservationLedger, e: &LedgerEvent) -> String {
    format!("{}#{} {}={}", ledger.owner, e.seq, e.kind.label(), e.value)
}

fn ledgers_of<'a>(input: &'a AuditInput, role: &'a str) -> impl Iterator<Item = &'a ObservationLedger> {
    input.ledgers.iter().filter(move |l| l.role == role)
}

/// Codes that mean a request never got past authentication.
const AUTHN_GATE_CODES: [&str; 5] = [
    "AuthnFailed",
    "BadSignature",
    "UnknownSigner",
    "UnknownGroupMember",
    "InvalidCert",
];

pub fn check_all(input: &AuditInput) -> Vec<RequirementResult> {
    vec![
        r1(input),
        r2(input),
        r3(input),
        r4(input),
        r5(input),
        r6(input),
        r7(input),
        r8(input),
        r9(),
        r10(input),
    ]
}

fn is_proxy_or_sb(registry: &FederationRegistry, v: &str) -> bool {
    let id = EntityId::new(v);
    registry.is_proxy(&id) || registry.sb().is_some_and(|d| d.entity_id == id)
}

fn r1(input: &AuditInput) -> RequirementResult {
    let reg = &input.registry;
    let mut violations = Vec::new();
    let mut used = BTreeSet::new();
    let mut checked = 0usize;
    for l in ledgers_of(input, "IDP") {
        for e in l.of_kind(ElementKind::SpIdentity) {
            checked += 1;
            if is_proxy_or_sb(reg, &e.value) {
                if reg.is_proxy(&EntityId::new(e.value.as_str())) {
                    used.insert(e.value.clone());
                }
            } else {
                violations.push(cite(l, e));
            }
        }
    }
    let predicate = "IdP SP_IDENTITY values are proxy or broker ids";
    if !violations.is_empty() {
        return result("R1", "observability", predicate, Verdict::Fail, violations);
    }
    let thin: Vec<String> = used
        .iter()
        .filter_map(|p| reg.group(&EntityId::new(p.as_str())))
        .filter(|g| g.member_sp_ids.len() < 2)
        .map(|g| {
            format!(
                "proxy {} has a single member; the IdP can map it to one SP",
                g.proxy_id
            )
        })
        .collect();
    if !thin.is_empty() {
        return result("R1", "observability", predicate, Verdict::Weak, thin);
    }
    result(
        "R1",
        "observability",
        predicate,
        Verdict::Pass,
        vec![format!("{checked} SP_IDENTITY events at IdPs, {} proxies used", used.len())],
    )
}

fn identifier_values(l: &ObservationLedger) -> BTreeSet<&str> {
    l.events()
        .iter()
        .filter(|e| matches!(e.kind, ElementKind::Pseudonym | ElementKind::UserIdentity))
        .filter(|e| !is_link_tag(e.about.as_deref()))
        .map(|e| e.value.as_str())
        .collect()
}

fn r2(input: &AuditInput) -> RequirementResult {
    let predicate = "per principal TID2s differ across SPs; SP identifier sets pairwise disjoint";
    let mut evidence = Vec::new();
    let mut failed = false;

    let principal_of: BTreeMap<&str, &str> = input
        .txs
        .iter()
        .filter_map(|t| Some((t.tx.as_str(), t.principal.as_deref()?)))
        .collect();
    let mut per_principal: BTreeMap<&str, BTreeMap<&EntityId, BTreeSet<&TidValue>>> = BTreeMap::new();
    for o in &input.outcomes {
        let (tx, sp, subject) = match o {
            Outcome::SessionEstablished { tx, sp, subject, .. }
            | Outcome::WsCompleted { tx, sp, subject, .. } => (tx, sp, subject),
            _ => continue,
        };
        let Some(p) = tx.as_deref().and_then(|t| principal_of.get(t)) else {
            continue;
        };
        per_principal
            .entry(p)
            .or_default()
            .entry(sp)
            .or_default()
            .insert(subject);
    }
    let mut pairs = 0usize;
    for (p, by_sp) in &per_principal {
        let sps: Vec<_> = by_sp.iter().collect();
        for (i, (a, ta)) in sps.iter().enumerate() {
            for (b, tb) in &sps[i + 1..] {
                pairs += 1;
                if !ta.is_disjoint(tb) {
                    failed = true;
                    evidence.push(format!("principal {p}: {a} and {b} share a TID2"));
                }
            }
        }
    }

    let sps: Vec<_> = ledgers_of(input, "SP").collect();
    for (i, a) in sps.iter().enumerate() {
        let ia = identifier_values(a);
        for b in &sps[i + 1..] {
            for shared in ia.intersection(&identifier_values(b)) {
                failed = true;
                evidence.push(format!("{} and {} both observed {shared}", a.owner, b.owner));
            }
        }
    }
    if failed {
        return result("R2", "linkability", predicate, Verdict::Fail, evidence);
    }
    result(
        "R2",
        "linkability",
        predicate,
        Verdict::Pass,
        vec![format!(
            "{pairs} principal SP pairs compared, {} SP ledgers pairwise disjoint",
            sps.len()
        )],
    )
}

/// Every attribute value any IdP or SP observed.
fn attribute_universe(input: &AuditInput) -> BTreeSet<&str> {
    input
        .ledgers
        .iter()
        .filter(|l| l.role == "IDP" || l.role == "SP")
        .flat_map(|l| l.of_kind(ElementKind::AttributeValue))
        .map(|e| e.value.as_str())
        .filter(|v| !v.is_empty())
        .collect()
}

fn r3(input: &AuditInput) -> RequirementResult {
    let predicate = "no broker or CA ledger event contains a known attribute value";
    let universe = attribute_universe(input);
    let mut evidence = Vec::new();
    let mut scanned = 0usize;
    for l in input.ledgers.iter().filter(|l| l.role == "SB" || l.role == "CA") {
        for e in l.events() {
            scanned += 1;
            let about = e.about.as_deref().unwrap_or("");
            if e.kind == ElementKind::AttributeValue {
                evidence.push(cite(l, e));
            } else if let Some(v) = universe
                .iter()
                .find(|v| e.value.contains(**v) || about.contains(**v))
            {
                evidence.push(format!("{} contains {v:?}", cite(l, e)));
            }
        }
    }
    if !evidence.is_empty() {
        return result("R3", "aggregation", predicate, Verdict::Fail, evidence);
    }
    result(
        "R3",
        "aggregation",
        predicate,
        Verdict::Pass,
        vec![format!(
            "{scanned} events scanned against {} attribute values",
            universe.len()
        )],
    )
}

fn r4(input: &AuditInput) -> RequirementResult {
    let predicate = "a release drawing on two or more sources reaches the SP complete";
    let mut evidence = Vec::new();
    let mut failed = false;
    for o in &input.outcomes {
        let Outcome::Released { tx, names, sources, .. } = o else {
            continue;
        };
        if sources.len() < 2 {
            continue;
        }
        let delivered = input.outcomes.iter().any(|d| match d {
            Outcome::SessionEstablished { tx: t, attributes, .. }
            | Outcome::WsCompleted { tx: t, attributes, .. } => {
                t == tx && attributes.keys().cloned().collect::<BTreeSet<_>>() == *names
            }
            _ => false,
        });
        let label = tx.as_deref().unwrap_or("-");
        if delivered {
            evidence.push(format!("tx {label}: {} sources, {} names delivered", sources.len(), names.len()));
        } else {
            failed = true;
            evidence.push(format!("tx {label}: multi-source release not delivered"));
        }
    }
    let verdict = match (evidence.is_empty(), failed) {
        (true, _) => Verdict::NotApplicable,
        (false, true) => Verdict::Fail,
        (false, false) => Verdict::Pass,
    };
    if verdict == Verdict::NotApplicable {
        evidence.push("no release drew on more than one attribute source".into());
    }
    result("R4", "authorized aggregation", predicate, verdict, evidence)
}

fn r5(input: &AuditInput) -> RequirementResult {
    let predicate = "requests failing authentication never reach the attribute store";
    let gated: BTreeSet<&str> = input
        .outcomes
        .iter()
        .filter(|o| o.rejection_code().is_some_and(|c| AUTHN_GATE_CODES.contains(&c)))
        .filter_map(|o| o.tx())
        .collect();
    let mut evidence = Vec::new();
    let mut failed = false;
    for tx in &gated {
        for l in ledgers_of(input, "IDP") {
            for e in l
                .of_kind(ElementKind::AttributeValue)
                .filter(|e| e.tx.as_deref() == Some(*tx))
            {
                failed = true;
                evidence.push(format!("tx {tx}: {}", cite(l, e)));
            }
        }
        if input
            .outcomes
            .iter()
            .any(|o| matches!(o, Outcome::Released { .. }) && o.tx() == Some(*tx))
        {
            failed = true;
            evidence.push(format!("tx {tx}: attributes released after an authentication failure"));
        }
    }
    if failed {
        return result("R5", "polling", predicate, Verdict::Fail, evidence);
    }
    let evidence = if gated.is_empty() {
        vec!["no authentication failures occurred; every release followed a verified login".into()]
    } else {
        gated
            .iter()
            .map(|tx| format!("tx {tx}: rejected at the gate, no attribute access"))
            .collect()
    };
    result("R5", "polling", predicate, Verdict::Pass, evidence)
}

fn r6(input: &AuditInput) -> RequirementResult {
    let predicate = "every assertion and token id is consumed at most once";
    let mut seen: BTreeMap<(&EntityId, &str), usize> = BTreeMap::new();
    for o in &input.outcomes {
        match o {
            Outcome::SessionEstablished { sp, assertion_id: id, .. }
            | Outcome::WsCompleted { sp, token_id: id, .. } => {
                *seen.entry((sp, id.as_str())).or_default() += 1;
            }
            _ => {}
        }
    }
    let dupes: Vec<String> = seen
        .iter()
        .filter(|(_, n)| **n > 1)
        .map(|((sp, id), n)| format!("{sp} accepted {id} {n} times"))
        .collect();
    if !dupes.is_empty() {
        return result("R6", "replay", predicate, Verdict::Fail, dupes);
    }
    let replays: Vec<String> = input
        .outcomes
        .iter()
        .filter_map(|o| match o {
            Outcome::Rejected { tx, actor, code, .. } if code == "ReplayDetected" => {
                Some(format!("tx {}: {actor} rejected a replay", tx.as_deref().unwrap_or("-")))
            }
            _ => None,
        })
        .collect();
    let mut evidence = vec![format!("{} single-use consumptions", seen.len())];
    evidence.extend(replays);
    result("R6", "replay", predicate, Verdict::Pass, evidence)
}

fn r7(input: &AuditInput) -> RequirementResult {
    let predicate = "every release carries a consent record";
    if !input.registry.policy.consent_gated() {
        return result(
            "R7",
            "consent",
            predicate,
            Verdict::NotApplicable,
            vec!["consent is settled out of band".into()],
        );
    }
    let mut evidence = Vec::new();
    let mut failed = false;
    for o in &input.outcomes {
        if let Outcome::Released { tx, consent_record, .. } = o {
            let label = tx.as_deref().unwrap_or("-");
            match consent_record {
                Some(r) => evidence.push(format!("tx {label}: consent record {r}")),
                None => {
                    failed = true;
                    evidence.push(format!("tx {label}: released without consent"));
                }
            }
        }
    }
    let denied = input
        .outcomes
        .iter()
        .filter(|o| {
            o.rejection_code()
                .is_some_and(|c| c == "ConsentMissing" || c == "AttributeSetExceedsConsent")
        })
        .count();
    evidence.push(format!("{denied} releases refused for lack of consent"));
    let verdict = if failed { Verdict::Fail } else { Verdict::Pass };
    result("R7", "consent", predicate, verdict, evidence)
}

fn r8(input: &AuditInput) -> RequirementResult {
    let predicate = "CA ledgers hold no attributes, pseudonyms, user identities or client addresses";
    let forbidden = [
        ElementKind::AttributeName,
        ElementKind::AttributeValue,
        ElementKind::Pseudonym,
        ElementKind::UserIdentity,
        ElementKind::ClientAddr,
        ElementKind::SpIdentity,
    ];
    let mut evidence = Vec::new();
    let mut events = 0usize;
    for l in ledgers_of(input, "CA") {
        for e in l.events() {
            events += 1;
            if forbidden.contains(&e.kind) {
                evidence.push(cite(l, e));
            }
        }
    }
    if !evidence.is_empty() {
        return result("R8", "trust roots", predicate, Verdict::Fail, evidence);
    }
    result(
        "R8",
        "trust roots",
        predicate,
        Verdict::Pass,
        vec![format!("{events} CA events, all signing root or certified public keys")],
    )
}

fn r9() -> RequirementResult {
    result(
        "R9",
        "compatibility",
        "not machine-checkable",
        Verdict::NotApplicable,
        vec!["see README: protocol mapping".into()],
    )
}

fn r10(input: &AuditInput) -> RequirementResult {
    let predicate = "released attribute names are within the proxy's release policy";
    let mut evidence = Vec::new();
    let mut failed = false;
    for o in &input.outcomes {
        let Outcome::Released { tx, proxy, names, .. } = o else {
            continue;
        };
        let policy = input.registry.release_policy(proxy).cloned().unwrap_or_default();
        let extra: Vec<_> = names.difference(&policy).cloned().collect();
        let label = tx.as_deref().unwrap_or("-");
        if extra.is_empty() {
            evidence.push(format!("tx {label}: {} names within policy of {proxy}", names.len()));
        } else {
            failed = true;
            evidence.push(format!("tx {label}: {} outside policy of {proxy}", extra.join(",")));
        }
    }
    if evidence.is_empty() {
        evidence.push("no releases".into());
    }
    let verdict = if failed { Verdict::Fail } else { Verdict::Pass };
    result("R10", "minimization", predicate, verdict, evidence)
}
