//! Observation ledgers: what each actor could have seen.
//!
//! Actors record every data element they process. The audit works from these
//! records only, so a missing record is an instrumentation bug, not a privacy
//! win.

use serde::{Deserialize, Serialize};

use crate::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ElementKind {
    ClientAddr,
    SpIdentity,
    UserIdentity,
    Pseudonym,
    /// Public half of an SP one-time or WS short-term key.
    EncKeyPublic,
    /// Private half of an SP one-time key. The value is a fingerprint.
    EncKeyPrivate,
    AttributeName,
    AttributeValue,
    /// Possession of the CA signing key.
    SigningRoot,
}

impl ElementKind {
    pub const ALL: [ElementKind; 9] = [
        ElementKind::ClientAddr,
        ElementKind::SpIdentity,
        ElementKind::UserIdentity,
        ElementKind::Pseudonym,
        ElementKind::EncKeyPublic,
        ElementKind::EncKeyPrivate,
        ElementKind::AttributeName,
        ElementKind::AttributeValue,
        ElementKind::SigningRoot,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ElementKind::ClientAddr => "CLIENT_ADDR",
            ElementKind::SpIdentity => "SP_IDENTITY",
            ElementKind::UserIdentity => "USER_IDENTITY",
            ElementKind::Pseudonym => "PSEUDONYM",
            ElementKind::EncKeyPublic => "ENC_KEY_PUBLIC",
            ElementKind::EncKeyPrivate => "ENC_KEY_PRIVATE",
            ElementKind::AttributeName => "ATTRIBUTE_NAME",
            ElementKind::AttributeValue => "ATTRIBUTE_VALUE",
            ElementKind::SigningRoot => "SIGNING_ROOT",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub seq: u64,
    pub time: SimTime,
    pub kind: ElementKind,
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx: Option<String>,
    /// What the element was observed in relation to: a proxy id for grouped
    /// attribute names, `link:<a>|<b>` for consented link material.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub about: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationLedger {
    pub owner: String,
    pub role: String,
    events: Vec<LedgerEvent>,
}

impl ObservationLedger {
    pub fn new(owner: impl Into<String>, role: impl Into<String>) -> Self {
        Self {
            owner: owner.into(),
            role: role.into(),
            events: Vec::new(),
        }
    }

    pub fn record(
        &mut self,
        time: SimTime,
        kind: ElementKind,
        value: impl Into<String>,
        tx: Option<&str>,
    ) {
        self.push(time, kind, value.into(), tx, None);
    }

    pub fn record_about(
        &mut self,
        time: SimTime,
        kind: ElementKind,
        value: impl Into<String>,
        tx: Option<&str>,
        about: impl Into<String>,
    ) {
        self.push(time, kind, value.into(), tx, Some(about.into()));
    }

    fn push(
        &mut self,
        time: SimTime,
        kind: ElementKind,
        value: String,
        tx: Option<&str>,
        about: Option<String>,
    ) {
        let seq = self.events.len() as u64;
        self.events.push(LedgerEvent {
            seq,
            time,
            kind,
            value,
            tx: tx.map(str::to_string),
            about,
        });
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    pub fn of_kind(&self, kind: ElementKind) -> impl Iterator<Item = &LedgerEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn has(&self, kind: ElementKind) -> bool {
        self.of_kind(kind).next().is_some()
    }
}

/// Order-independent tag for material shared under a link consent.
pub fn link_tag(a: &str, b: &str) -> String {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    format!("link:{lo}|{hi}")
}

pub fn is_link_tag(about: Option<&str>) -> bool {
    about.is_some_and(|a| a.starts_with("link:"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_only_sequence() {
        let mut l = ObservationLedger::new("sb.tld", "SB");
        l.record(1, ElementKind::ClientAddr, "203.0.113.9", Some("t1"));
        l.record_about(2, ElementKind::AttributeName, "mail", None, "proxy-1");
        let seqs: Vec<u64> = l.events().iter().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![0, 1]);
        assert!(l.has(ElementKind::AttributeName));
        assert!(!l.has(ElementKind::AttributeValue));
    }

    #[test]
    fn wire_labels_match_serde() {
        for k in ElementKind::ALL {
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.label()));
        }
    }
}
