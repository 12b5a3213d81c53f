//! Targeted identifiers.
//!
//! Each tier is a keyed one-way function of the tier below it:
//!
//! | tier | parent        | scope        | issuer |
//! |------|---------------|--------------|--------|
//! | TID1 | reference id  | `[SB]`       | IdP    |
//! | TID2 | TID1          | `[SP]`       | SB     |
//! | TID3 | TID1          | `[SPa, SPb]` | SB     |
//!
//! The function is HMAC-SHA256 over
//! `"pefim-tid-v1" || tier || lp(parent) || u32be(n) || lp(scope_1) .. lp(scope_n)`
//! where `lp(x) = u32be(len(x)) || x`. Output is rendered as 64 lowercase hex
//! digits.
//!
//! Reversal goes through the issuer's [`MappingTable`], which is only
//! reachable through the issuer's own state.

use std::collections::BTreeMap;
use std::fmt;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::federation::EntityId;

pub const TID_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Tier {
    Tid1,
    Tid2,
    Tid3,
}

impl Tier {
    fn tag(self) -> u8 {
        match self {
            Tier::Tid1 => 1,
            Tier::Tid2 => 2,
            Tier::Tid3 => 3,
        }
    }

    fn scope_len(self) -> usize {
        match self {
            Tier::Tid1 | Tier::Tid2 => 1,
            Tier::Tid3 => 2,
        }
    }
}

/// Lowercase hex rendering of a 32-byte PRF output.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TidValue(String);

impl TidValue {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Accepts exactly 64 lowercase hex digits.
    pub fn parse(s: &str) -> Option<Self> {
        let ok = s.len() == 2 * TID_LEN
            && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        ok.then(|| Self(s.to_string()))
    }
}

impl fmt::Debug for TidValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tid({}..)", &self.0[..self.0.len().min(12)])
    }
}

impl fmt::Display for TidValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetedId {
    pub value: TidValue,
    pub tier: Tier,
    pub scope: Vec<EntityId>,
}

/// The IdP-internal persistent handle for a principal. Never leaves the IdP.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceId {
    pub value: String,
    pub principal_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TidError {
    #[error("parent id is empty")]
    EmptyParent,
    #[error("scope length does not match tier")]
    ScopeMismatch,
    #[error("value was never issued by this owner")]
    UnknownTid,
    #[error("TID1 was never issued to this broker")]
    UnknownTid1,
    #[error("link ends are the same SP")]
    SameSp,
    #[error("caller is not the target of this link")]
    NotLinkTarget,
}

#[derive(Clone)]
pub struct DerivationKey(pub [u8; 32]);

impl fmt::Debug for DerivationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DerivationKey([REDACTED])")
    }
}

fn lp(mac: &mut Hmac<Sha256>, bytes: &[u8]) {
    mac.update(&(bytes.len() as u32).to_be_bytes());
    mac.update(bytes);
}

/// The bare one-way function. Does not record anything.
pub fn tid_value(
    key: &DerivationKey,
    parent: &str,
    scope: &[EntityId],
    tier: Tier,
) -> Result<TidValue, TidError> {
    if parent.is_empty() {
        return Err(TidError::EmptyParent);
    }
    if scope.len() != tier.scope_len() || scope.iter().any(|s| s.as_str().is_empty()) {
        return Err(TidError::ScopeMismatch);
    }
    let mut mac = Hmac::<Sha256>::new_from_slice(&key.0).expect("HMAC takes any key length");
    mac.update(b"pefim-tid-v1");
    mac.update(&[tier.tag()]);
    lp(&mut mac, parent.as_bytes());
    mac.update(&(scope.len() as u32).to_be_bytes());
    for item in scope {
        lp(&mut mac, item.as_str().as_bytes());
    }
    Ok(TidValue(hex::encode(mac.finalize().into_bytes())))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub parent: String,
    pub tier: Tier,
    pub scope: Vec<EntityId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingTable {
    pub owner: EntityId,
    entries: BTreeMap<TidValue, MappingEntry>,
}

impl MappingTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, value: &TidValue) -> Option<&MappingEntry> {
        self.entries.get(value)
    }
}

/// Derivation key plus mapping table of one issuing entity.
#[derive(Debug, Clone)]
pub struct TidIssuer {
    key: DerivationKey,
    table: MappingTable,
}

impl TidIssuer {
    pub fn new(owner: EntityId, key: DerivationKey) -> Self {
        Self {
            key,
            table: MappingTable {
                owner,
                entries: BTreeMap::new(),
            },
        }
    }

    pub fn owner(&self) -> &EntityId {
        &self.table.owner
    }

    /// Derive and record. Recording the same value twice is a no-op.
    pub fn derive_tid(
        &mut self,
        parent: &str,
        scope: &[EntityId],
        tier: Tier,
    ) -> Result<TargetedId, TidError> {
        let value = tid_value(&self.key, parent, scope, tier)?;
        self.table
            .entries
            .entry(value.clone())
            .or_insert_with(|| MappingEntry {
                parent: parent.to_string(),
                tier,
                scope: scope.to_vec(),
            });
        Ok(TargetedId {
            value,
            tier,
            scope: scope.to_vec(),
        })
    }

    pub fn resolve_tid(&self, value: &TidValue) -> Result<&str, TidError> {
        self.table
            .entries
            .get(value)
            .map(|e| e.parent.as_str())
            .ok_or(TidError::UnknownTid)
    }

    pub fn entry(&self, value: &TidValue) -> Option<&MappingEntry> {
        self.table.entry(value)
    }

    pub fn table(&self) -> &MappingTable {
        &self.table
    }
}

/// Where a TID1 seen by the broker came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tid1Origin {
    pub idp: EntityId,
}

/// The broker's pseudonym state: the TID1s it has been issued and the
/// TID2/TID3 values it has derived from them.
///
/// There is no operation that removes a TID3.
#[derive(Debug, Clone)]
pub struct SbPseudonyms {
    issuer: TidIssuer,
    tid1s: BTreeMap<TidValue, Tid1Origin>,
}

impl SbPseudonyms {
    pub fn new(sb: EntityId, key: DerivationKey) -> Self {
        Self {
            issuer: TidIssuer::new(sb, key),
            tid1s: BTreeMap::new(),
        }
    }

    pub fn accept_tid1(&mut self, tid1: TidValue, idp: EntityId) {
        self.tid1s.entry(tid1).or_insert(Tid1Origin { idp });
    }

    pub fn tid1_origin(&self, tid1: &TidValue) -> Option<&Tid1Origin> {
        self.tid1s.get(tid1)
    }

    pub fn derive_tid2(&mut self, tid1: &TidValue, sp: &EntityId) -> Result<TargetedId, TidError> {
        if !self.tid1s.contains_key(tid1) {
            return Err(TidError::UnknownTid1);
        }
        self.issuer
            .derive_tid(tid1.as_str(), std::slice::from_ref(sp), Tier::Tid2)
    }

    /// `(tid2's parent TID1, the SP it is scoped to)`.
    pub fn resolve_tid2(&self, tid2: &TidValue) -> Result<(TidValue, EntityId), TidError> {
        match self.issuer.entry(tid2) {
            Some(e) if e.tier == Tier::Tid2 => {
                Ok((TidValue(e.parent.clone()), e.scope[0].clone()))
            }
            _ => Err(TidError::UnknownTid),
        }
    }

    /// Directed link ids `(TID3(a, b), TID3(b, a))`. Stable across calls.
    pub fn derive_link_pair(
        &mut self,
        tid1: &TidValue,
        sp_a: &EntityId,
        sp_b: &EntityId,
    ) -> Result<(TargetedId, TargetedId), TidError> {
        if sp_a == sp_b {
            return Err(TidError::SameSp);
        }
        if !self.tid1s.contains_key(tid1) {
            return Err(TidError::UnknownTid1);
        }
        let ab = self
            .issuer
            .derive_tid(tid1.as_str(), &[sp_a.clone(), sp_b.clone()], Tier::Tid3)?;
        let ba = self
            .issuer
            .derive_tid(tid1.as_str(), &[sp_b.clone(), sp_a.clone()], Tier::Tid3)?;
        Ok((ab, ba))
    }

    /// `TID3(a, b)` turned into `TID2(b)`; only `b` may ask.
    pub fn convert_link(
        &mut self,
        tid3: &TidValue,
        caller: &EntityId,
    ) -> Result<TargetedId, TidError> {
        let entry = match self.issuer.entry(tid3) {
            Some(e) if e.tier == Tier::Tid3 => e.clone(),
            _ => return Err(TidError::UnknownTid),
        };
        if &entry.scope[1] != caller {
            return Err(TidError::NotLinkTarget);
        }
        self.issuer
            .derive_tid(&entry.parent, std::slice::from_ref(caller), Tier::Tid2)
    }

    pub fn link_ends(&self, tid3: &TidValue) -> Option<(&EntityId, &EntityId)> {
        match self.issuer.entry(tid3) {
            Some(e) if e.tier == Tier::Tid3 => Some((&e.scope[0], &e.scope[1])),
            _ => None,
        }
    }

    pub fn issuer(&self) -> &TidIssuer {
        &self.issuer
    }
}

/// Designated opener: re-identify a TID2 using both the broker's and the
/// IdP's private state. Neither state alone suffices.
pub fn open_identity(
    sb: &SbPseudonyms,
    idp: &TidIssuer,
    tid2: &TidValue,
) -> Result<String, TidError> {
    let (tid1, _) = sb.resolve_tid2(tid2)?;
    idp.resolve_tid(&tid1).map(str::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(xs: &[&str]) -> Vec<EntityId> {
        xs.iter().map(|s| EntityId::from(*s)).collect()
    }

    fn key(b: u8) -> DerivationKey {
        DerivationKey([b; 32])
    }

    #[test]
    fn deterministic() {
        let a = tid_value(&key(1), "ref-1", &ids(&["sb.tld"]), Tier::Tid1).unwrap();
        let b = tid_value(&key(1), "ref-1", &ids(&["sb.tld"]), Tier::Tid1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.as_str().len(), 64);
    }

    #[test]
    fn scope_is_ordered() {
        let ab = tid_value(&key(1), "t1", &ids(&["a.tld", "b.tld"]), Tier::Tid3).unwrap();
        let ba = tid_value(&key(1), "t1", &ids(&["b.tld", "a.tld"]), Tier::Tid3).unwrap();
        assert_ne!(ab, ba);
    }

    #[test]
    fn tier_separates_same_inputs() {
        let t1 = tid_value(&key(1), "p", &ids(&["x.tld"]), Tier::Tid1).unwrap();
        let t2 = tid_value(&key(1), "p", &ids(&["x.tld"]), Tier::Tid2).unwrap();
        assert_ne!(t1, t2);
    }

    #[test]
    fn argument_errors() {
        assert_eq!(
            tid_value(&key(1), "", &ids(&["x.tld"]), Tier::Tid1),
            Err(TidError::EmptyParent)
        );
        assert_eq!(
            tid_value(&key(1), "p", &ids(&["x.tld"]), Tier::Tid3),
            Err(TidError::ScopeMismatch)
        );
        assert_eq!(
            tid_value(&key(1), "p", &[], Tier::Tid2),
            Err(TidError::ScopeMismatch)
        );
    }

    #[test]
    fn resolve_round_trip_and_foreign_owner() {
        let mut a = TidIssuer::new("idp-a.tld".into(), key(1));
        let b = TidIssuer::new("idp-b.tld".into(), key(2));
        let t = a.derive_tid("ref-7", &ids(&["sb.tld"]), Tier::Tid1).unwrap();
        assert_eq!(a.resolve_tid(&t.value), Ok("ref-7"));
        assert_eq!(b.resolve_tid(&t.value), Err(TidError::UnknownTid));
    }

    #[test]
    fn link_pair_permanent_and_distinct() {
        let mut sb = SbPseudonyms::new("sb.tld".into(), key(9));
        let tid1 = tid_value(&key(1), "ref", &ids(&["sb.tld"]), Tier::Tid1).unwrap();
        let (a, b): (EntityId, EntityId) = ("sp1.tld".into(), "sp2.tld".into());
        assert_eq!(
            sb.derive_link_pair(&tid1, &a, &b).unwrap_err(),
            TidError::UnknownTid1
        );
        sb.accept_tid1(tid1.clone(), "idp.tld".into());
        let first = sb.derive_link_pair(&tid1, &a, &b).unwrap();
        let second = sb.derive_link_pair(&tid1, &a, &b).unwrap();
        assert_eq!(first, second);
        let t2a = sb.derive_tid2(&tid1, &a).unwrap().value;
        let t2b = sb.derive_tid2(&tid1, &b).unwrap().value;
        let all = [&first.0.value, &first.1.value, &t2a, &t2b];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
        assert_eq!(sb.derive_link_pair(&tid1, &a, &a).unwrap_err(), TidError::SameSp);
    }

    #[test]
    fn only_link_target_converts() {
        let mut sb = SbPseudonyms::new("sb.tld".into(), key(9));
        let tid1 = tid_value(&key(1), "ref", &ids(&["sb.tld"]), Tier::Tid1).unwrap();
        sb.accept_tid1(tid1.clone(), "idp.tld".into());
        let (a, b): (EntityId, EntityId) = ("sp1.tld".into(), "sp2.tld".into());
        let (ab, _) = sb.derive_link_pair(&tid1, &a, &b).unwrap();
        assert_eq!(sb.convert_link(&ab.value, &a).unwrap_err(), TidError::NotLinkTarget);
        let converted = sb.convert_link(&ab.value, &b).unwrap();
        assert_eq!(converted.value, sb.derive_tid2(&tid1, &b).unwrap().value);
    }

    #[test]
    fn opener_needs_both_tables() {
        let mut idp = TidIssuer::new("idp.tld".into(), key(1));
        let mut sb = SbPseudonyms::new("sb.tld".into(), key(2));
        let tid1 = idp.derive_tid("ref-42", &ids(&["sb.tld"]), Tier::Tid1).unwrap().value;
        sb.accept_tid1(tid1.clone(), "idp.tld".into());
        let tid2 = sb.derive_tid2(&tid1, &"sp.tld".into()).unwrap().value;
        assert_eq!(open_identity(&sb, &idp, &tid2).unwrap(), "ref-42");
        let other_idp = TidIssuer::new("idp.tld".into(), key(1));
        assert_eq!(open_identity(&sb, &other_idp, &tid2), Err(TidError::UnknownTid));
    }
}
