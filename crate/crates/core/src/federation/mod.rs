//! Static federation configuration: entity metadata, SP proxy groups and the
//! registry that ties them together.
//!
//! The registry is built once (register every entity, then [`FederationRegistry::group_sps`])
//! and treated as read-only afterwards. Mutating operations consume the
//! registry and return the new value.

pub mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{EncryptionPublicKey, VerifyingKeyBytes};

pub use config::{EntityKeys, Federation, FederationConfig};

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(String);

impl EntityId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for EntityId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

impl AsRef<str> for EntityId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Idp,
    Sp,
    Sb,
    Ca,
    Discovery,
    Consent,
}

impl Role {
    pub fn label(self) -> &'static str {
        match self {
            Role::Idp => "IDP",
            Role::Sp => "SP",
            Role::Sb => "SB",
            Role::Ca => "CA",
            Role::Discovery => "DISCOVERY",
            Role::Consent => "CONSENT",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NameIdPolicy {
    Targeted,
    Temporary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsentMode {
    OutOfBand,
    UpFront,
    Transactional,
}

impl ConsentMode {
    pub fn label(self) -> &'static str {
        match self {
            ConsentMode::OutOfBand => "out-of-band",
            ConsentMode::UpFront => "up-front",
            ConsentMode::Transactional => "transactional",
        }
    }
}

impl std::str::FromStr for ConsentMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "out-of-band" => Ok(Self::OutOfBand),
            "up-front" => Ok(Self::UpFront),
            "transactional" => Ok(Self::Transactional),
            other => Err(format!(
                "unknown consent mode {other:?} (expected out-of-band, up-front or transactional)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityDescriptor {
    pub entity_id: EntityId,
    pub role: Role,
    pub static_signing_key: VerifyingKeyBytes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_encryption_key: Option<EncryptionPublicKey>,
    #[serde(default)]
    pub endpoints: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_attributes: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nameid_policy: Option<NameIdPolicy>,
    #[serde(default)]
    pub bindings: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum DescriptorViolation {
    #[error("entity_id is empty")]
    EmptyEntityId,
    #[error("SP descriptor lacks required_attributes")]
    SpMissingRequiredAttributes,
    #[error("SP descriptor lacks nameid_policy")]
    SpMissingNameIdPolicy,
    #[error("required_attributes/nameid_policy are only meaningful for SPs")]
    SpFieldsOnNonSp,
    #[error("the CA must not expose transaction endpoints")]
    CaWithEndpoints,
    #[error("static encryption keys are only published for IdPs and the SB")]
    EncryptionKeyNotAllowed,
    #[error("a federation has exactly one CA")]
    SecondCertificateAuthority,
    #[error("a federation has exactly one service broker")]
    SecondServiceBroker,
    #[error("the CA and the SB must not share key material")]
    SharedKeyMaterial,
}

impl EntityDescriptor {
    pub fn validate(&self) -> Result<(), DescriptorViolation> {
        use DescriptorViolation::*;
        if self.entity_id.as_str().is_empty() {
            return Err(EmptyEntityId);
        }
        match self.role {
            Role::Sp => {
                if self.required_attributes.is_none() {
                    return Err(SpMissingRequiredAttributes);
                }
                if self.nameid_policy.is_none() {
                    return Err(SpMissingNameIdPolicy);
                }
            }
            _ => {
                if self.required_attributes.is_some() || self.nameid_policy.is_some() {
                    return Err(SpFieldsOnNonSp);
                }
            }
        }
        if self.role == Role::Ca && !self.endpoints.is_empty() {
            return Err(CaWithEndpoints);
        }
        if self.static_encryption_key.is_some() && !matches!(self.role, Role::Idp | Role::Sb) {
            return Err(EncryptionKeyNotAllowed);
        }
        Ok(())
    }

    pub fn characteristics(&self) -> Option<Characteristics> {
        Some(Characteristics {
            required_attributes: self.required_attributes.clone()?,
            nameid_policy: self.nameid_policy?,
            bindings: self.bindings.clone(),
        })
    }

    pub fn endpoint(&self, name: &str) -> Option<&str> {
        self.endpoints.get(name).map(String::as_str)
    }
}

/// What an SP looks like from the outside: SPs that agree on all three parts
/// are interchangeable towards an IdP.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Characteristics {
    pub required_attributes: BTreeSet<String>,
    pub nameid_policy: NameIdPolicy,
    pub bindings: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum GroupStatus {
    Grouped,
    /// Too few members to hide among; members are excluded from flows.
    Ungrouped,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpProxyGroup {
    pub proxy_id: EntityId,
    pub characteristics: Characteristics,
    pub member_sp_ids: BTreeSet<EntityId>,
    pub status: GroupStatus,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FederationPolicy {
    pub min_group_size: usize,
    /// Lifetime of one-time certificates, simulated seconds.
    pub onetime_cert_validity: u64,
    /// Maximum age of an assertion at the consumer, simulated seconds.
    pub assertion_freshness: u64,
    pub consent_mode_default: ConsentMode,
    pub attribute_release_policy: BTreeMap<EntityId, BTreeSet<String>>,
}

impl Default for FederationPolicy {
    fn default() -> Self {
        Self {
            min_group_size: 2,
            onetime_cert_validity: 300,
            assertion_freshness: 120,
            consent_mode_default: ConsentMode::UpFront,
            attribute_release_policy: BTreeMap::new(),
        }
    }
}

impl FederationPolicy {
    /// Whether an IdP must see a consent voucher before releasing attributes.
    /// Out-of-band consent is settled outside any flow.
    pub fn consent_gated(&self) -> bool {
        self.consent_mode_default != ConsentMode::OutOfBand
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FederationError {
    #[error("entity {0} is already registered")]
    DuplicateEntity(EntityId),
    #[error("invalid descriptor for {entity:?}: {violation}")]
    InvalidDescriptor {
        entity: EntityId,
        violation: DescriptorViolation,
    },
    #[error("unknown entity {0}")]
    UnknownEntity(EntityId),
    #[error("entity {0} is not a service provider")]
    NotAnSp(EntityId),
    #[error("service provider {0} has no proxy group large enough to hide in")]
    Ungrouped(EntityId),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FederationRegistry {
    pub entities: BTreeMap<EntityId, EntityDescriptor>,
    pub groups: BTreeMap<EntityId, SpProxyGroup>,
    pub ca_trust_root: Option<VerifyingKeyBytes>,
    pub policy: FederationPolicy,
    /// Seed for proxy id generation. Grouping is a function of the entity
    /// set and this seed only.
    pub grouping_seed: u64,
}

impl FederationRegistry {
    pub fn new(policy: FederationPolicy, grouping_seed: u64) -> Self {
        Self {
            entities: BTreeMap::new(),
            groups: BTreeMap::new(),
            ca_trust_root: None,
            policy,
            grouping_seed,
        }
    }

    pub fn register_entity(mut self, desc: EntityDescriptor) -> Result<Self, FederationError> {
        let invalid = |violation| FederationError::InvalidDescriptor {
            entity: desc.entity_id.clone(),
            violation,
        };
        desc.validate().map_err(invalid)?;
        if self.entities.contains_key(&desc.entity_id) {
            return Err(FederationError::DuplicateEntity(desc.entity_id));
        }
        match desc.role {
            Role::Ca => {
                if self.ca().is_some() {
                    return Err(invalid(DescriptorViolation::SecondCertificateAuthority));
                }
                if self
                    .sb()
                    .is_some_and(|sb| sb.static_signing_key == desc.static_signing_key)
                {
                    return Err(invalid(DescriptorViolation::SharedKeyMaterial));
                }
                self.ca_trust_root = Some(desc.static_signing_key);
            }
            Role::Sb => {
                if self.sb().is_some() {
                    return Err(invalid(DescriptorViolation::SecondServiceBroker));
                }
                if self.ca_trust_root == Some(desc.static_signing_key) {
                    return Err(invalid(DescriptorViolation::SharedKeyMaterial));
                }
            }
            _ => {}
        }
        self.entities.insert(desc.entity_id.clone(), desc);
        Ok(self)
    }

    /// Partition SPs by characteristics and assign each partition a fresh
    /// opaque proxy id. Partitions below `min_group_size` are kept but
    /// flagged [`GroupStatus::Ungrouped`].
    pub fn group_sps(mut self) -> Self {
        let mut partitions: BTreeMap<Characteristics, BTreeSet<EntityId>> = BTreeMap::new();
        for desc in self.entities.values().filter(|d| d.role == Role::Sp) {
            if let Some(c) = desc.characteristics() {
                partitions.entry(c).or_default().insert(desc.entity_id.clone());
            }
        }
        let mut rng = ChaCha20Rng::seed_from_u64(self.grouping_seed);
        let reserved: Vec<&str> = self.entities.keys().map(EntityId::as_str).collect();
        let mut groups = BTreeMap::new();
        let mut release = BTreeMap::new();
        for (characteristics, members) in partitions {
            let proxy_id = loop {
                let candidate = fresh_proxy_id(&mut rng);
                if !reserved.iter().any(|id| candidate.contains(id))
                    && !groups.contains_key(&EntityId::new(candidate.clone()))
                {
                    break EntityId::new(candidate);
                }
            };
            let status = if members.len() >= self.policy.min_group_size {
                GroupStatus::Grouped
            } else {
                GroupStatus::Ungrouped
            };
            release.insert(proxy_id.clone(), characteristics.required_attributes.clone());
            groups.insert(
                proxy_id.clone(),
                SpProxyGroup {
                    proxy_id,
                    characteristics,
                    member_sp_ids: members,
                    status,
                },
            );
        }
        self.groups = groups;
        self.policy.attribute_release_policy = release;
        self
    }

    pub fn lookup_proxy(&self, sp_id: &EntityId) -> Result<&EntityId, FederationError> {
        let desc = self
            .entity(sp_id)
            .ok_or_else(|| FederationError::UnknownEntity(sp_id.clone()))?;
        if desc.role != Role::Sp {
            return Err(FederationError::NotAnSp(sp_id.clone()));
        }
        match self.group_of(sp_id) {
            Some(g) if g.status == GroupStatus::Grouped => Ok(&g.proxy_id),
            _ => Err(FederationError::Ungrouped(sp_id.clone())),
        }
    }

    pub fn entity(&self, id: &EntityId) -> Option<&EntityDescriptor> {
        self.entities.get(id)
    }

    pub fn group(&self, proxy_id: &EntityId) -> Option<&SpProxyGroup> {
        self.groups.get(proxy_id)
    }

    pub fn group_of(&self, sp_id: &EntityId) -> Option<&SpProxyGroup> {
        self.groups.values().find(|g| g.member_sp_ids.contains(sp_id))
    }

    pub fn is_proxy(&self, id: &EntityId) -> bool {
        self.groups.contains_key(id)
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &EntityDescriptor> {
        self.entities.values().filter(move |d| d.role == role)
    }

    pub fn sb(&self) -> Option<&EntityDescriptor> {
        self.with_role(Role::Sb).next()
    }

    pub fn ca(&self) -> Option<&EntityDescriptor> {
        self.with_role(Role::Ca).next()
    }

    pub fn release_policy(&self, proxy_id: &EntityId) -> Option<&BTreeSet<String>> {
        self.policy.attribute_release_policy.get(proxy_id)
    }

    /// Canonical serialization: stable field order, sorted maps.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }
}

fn fresh_proxy_id(rng: &mut ChaCha20Rng) -> String {
    let mut b = [0u8; 10];
    rng.fill_bytes(&mut b);
    format!("proxy-{}", hex::encode(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SigningKey;

    fn key(n: u8) -> VerifyingKeyBytes {
        SigningKey::from_seed([n; 32]).verifying_key()
    }

    fn sp(id: &str, attrs: &[&str], n: u8) -> EntityDescriptor {
        EntityDescriptor {
            entity_id: id.into(),
            role: Role::Sp,
            static_signing_key: key(n),
            static_encryption_key: None,
            endpoints: BTreeMap::from([("acs".into(), format!("https://{id}/acs"))]),
            required_attributes: Some(attrs.iter().map(|s| s.to_string()).collect()),
            nameid_policy: Some(NameIdPolicy::Targeted),
            bindings: vec!["http-post".into()],
        }
    }

    fn other(id: &str, role: Role, n: u8) -> EntityDescriptor {
        EntityDescriptor {
            entity_id: id.into(),
            role,
            static_signing_key: key(n),
            static_encryption_key: None,
            endpoints: BTreeMap::new(),
            required_attributes: None,
            nameid_policy: None,
            bindings: vec![],
        }
    }

    fn empty() -> FederationRegistry {
        FederationRegistry::new(FederationPolicy::default(), 99)
    }

    #[test]
    fn register_into_empty_registry() {
        let reg = empty().register_entity(other("idp.homeorg.tld", Role::Idp, 1)).unwrap();
        assert_eq!(reg.entities.len(), 1);
        assert!(reg.groups.is_empty());
    }

    #[test]
    fn duplicate_entity_rejected() {
        let reg = empty().register_entity(other("idp.homeorg.tld", Role::Idp, 1)).unwrap();
        let err = reg
            .register_entity(other("idp.homeorg.tld", Role::Idp, 2))
            .unwrap_err();
        assert_eq!(err, FederationError::DuplicateEntity("idp.homeorg.tld".into()));
    }

    #[test]
    fn descriptor_invariant_table() {
        use DescriptorViolation::*;
        let mut no_attrs = sp("a.sp.tld", &[], 1);
        no_attrs.required_attributes = None;
        let mut no_policy = sp("b.sp.tld", &[], 1);
        no_policy.nameid_policy = None;
        let mut idp_with_attrs = other("idp.tld", Role::Idp, 1);
        idp_with_attrs.required_attributes = Some(BTreeSet::new());
        let mut ca_with_endpoint = other("ca.tld", Role::Ca, 1);
        ca_with_endpoint.endpoints.insert("sso".into(), "x".into());
        let mut sp_with_enc = sp("c.sp.tld", &["mail"], 1);
        sp_with_enc.static_encryption_key = Some(crate::crypto::EncryptionPublicKey([1; 32]));
        let table: Vec<(EntityDescriptor, Result<(), DescriptorViolation>)> = vec![
            (other("", Role::Idp, 1), Err(EmptyEntityId)),
            (no_attrs, Err(SpMissingRequiredAttributes)),
            (no_policy, Err(SpMissingNameIdPolicy)),
            (idp_with_attrs, Err(SpFieldsOnNonSp)),
            (ca_with_endpoint, Err(CaWithEndpoints)),
            (sp_with_enc, Err(EncryptionKeyNotAllowed)),
            (sp("ok.sp.tld", &["mail"], 1), Ok(())),
            (other("ca.tld", Role::Ca, 1), Ok(())),
        ];
        for (desc, expected) in table {
            assert_eq!(desc.validate(), expected, "{:?}", desc.entity_id);
            let res = empty().register_entity(desc.clone());
            match expected {
                Ok(()) => assert!(res.is_ok()),
                Err(v) => assert_eq!(
                    res.unwrap_err(),
                    FederationError::InvalidDescriptor {
                        entity: desc.entity_id.clone(),
                        violation: v
                    }
                ),
            }
        }
    }

    #[test]
    fn ca_and_sb_must_not_share_keys() {
        let reg = empty().register_entity(other("ca.tld", Role::Ca, 5)).unwrap();
        let err = reg.register_entity(other("sb.tld", Role::Sb, 5)).unwrap_err();
        assert!(matches!(
            err,
            FederationError::InvalidDescriptor {
                violation: DescriptorViolation::SharedKeyMaterial,
                ..
            }
        ));
    }

    #[test]
    fn three_identical_sps_share_one_proxy() {
        let mut reg = empty();
        for (i, id) in ["a.sp.tld", "b.sp.tld", "c.sp.tld"].iter().enumerate() {
            reg = reg.register_entity(sp(id, &["mail", "name"], i as u8 + 1)).unwrap();
        }
        let reg = reg.group_sps();
        assert_eq!(reg.groups.len(), 1);
        let g = reg.groups.values().next().unwrap();
        assert_eq!(g.member_sp_ids.len(), 3);
        assert_eq!(g.status, GroupStatus::Grouped);
        for id in ["a.sp.tld", "b.sp.tld", "c.sp.tld"] {
            assert_eq!(reg.lookup_proxy(&id.into()).unwrap(), &g.proxy_id);
        }
        assert_eq!(
            reg.release_policy(&g.proxy_id).unwrap(),
            &g.characteristics.required_attributes
        );
    }

    #[test]
    fn single_sp_is_ungrouped() {
        let reg = empty()
            .register_entity(sp("lonely.sp.tld", &["mail"], 1))
            .unwrap()
            .group_sps();
        assert_eq!(reg.groups.len(), 1);
        assert_eq!(reg.groups.values().next().unwrap().status, GroupStatus::Ungrouped);
        assert_eq!(
            reg.lookup_proxy(&"lonely.sp.tld".into()),
            Err(FederationError::Ungrouped("lonely.sp.tld".into()))
        );
    }

    #[test]
    fn no_sps_no_groups() {
        let reg = empty()
            .register_entity(other("idp.tld", Role::Idp, 1))
            .unwrap()
            .group_sps();
        assert!(reg.groups.is_empty());
        assert_eq!(
            reg.lookup_proxy(&"nobody.tld".into()),
            Err(FederationError::UnknownEntity("nobody.tld".into()))
        );
        assert_eq!(
            reg.lookup_proxy(&"idp.tld".into()),
            Err(FederationError::NotAnSp("idp.tld".into()))
        );
    }

    #[test]
    fn grouping_is_deterministic_and_opaque() {
        let build = || {
            let mut reg = empty();
            let specs: [(&str, &[&str]); 5] = [
                ("a.sp.tld", &["mail"]),
                ("b.sp.tld", &["mail"]),
                ("c.sp.tld", &["name"]),
                ("d.sp.tld", &["name"]),
                ("e.sp.tld", &["age"]),
            ];
            for (i, (id, attrs)) in specs.iter().enumerate() {
                reg = reg.register_entity(sp(id, attrs, i as u8 + 1)).unwrap();
            }
            reg.group_sps()
        };
        let a = build();
        let b = build();
        assert_eq!(a, b);
        assert_eq!(a.canonical_json(), b.canonical_json());
        let mut seen = BTreeSet::new();
        for g in a.groups.values() {
            for m in &g.member_sp_ids {
                assert!(!g.proxy_id.as_str().contains(m.as_str()));
                assert!(seen.insert(m.clone()), "{m} grouped twice");
            }
        }
        assert_eq!(seen.len(), 5);
    }
}
