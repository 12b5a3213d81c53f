//! Federation files.
//!
//! ```toml
//! [federation]
//! seed = 42                       # static keys and proxy ids derive from it
//! min_group_size = 2
//! onetime_cert_validity = 300
//! assertion_freshness = 120
//! consent_mode_default = "up-front"
//!
//! [[entity]]
//! id = "idp.homeorg.tld"
//! role = "idp"
//! endpoints = { sso = "https://idp.homeorg.tld/sso", mail = "mail.idp.homeorg.tld", home_domain = "homeorg.tld" }
//! attribute_sources = { directory = ["givenName", "mail"], registrar = ["affiliation"] }
//!
//! [[entity]]
//! id = "sp1.shop.tld"
//! role = "sp"
//! required_attributes = ["givenName", "mail"]
//! nameid_policy = "targeted"
//! bindings = ["http-post"]
//! ```
//!
//! Private keys never appear in the file. Each entity's keys are derived from
//! `seed` and its id, so separate runs over the same file agree on them.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;

use super::{
    ConsentMode, EntityDescriptor, EntityId, FederationError, FederationPolicy,
    FederationRegistry, NameIdPolicy, Role,
};
use crate::crypto::{derive_static_seed, EncryptionSecretKey, EnrollmentKey, SigningKey};
use crate::error::ConfigError;
use crate::idmap::DerivationKey;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub federation: FederationSection,
    #[serde(default, rename = "entity")]
    pub entities: Vec<EntityConfig>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub seed: u64,
    #[serde(default = "default_min_group")]
    pub min_group_size: usize,
    #[serde(default = "default_validity")]
    pub onetime_cert_validity: u64,
    #[serde(default = "default_freshness")]
    pub assertion_freshness: u64,
    #[serde(default = "default_mode")]
    pub consent_mode_default: ConsentMode,
}

fn default_min_group() -> usize {
    2
}
fn default_validity() -> u64 {
    300
}
fn default_freshness() -> u64 {
    120
}
fn default_mode() -> ConsentMode {
    ConsentMode::UpFront
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityConfig {
    pub id: String,
    pub role: Role,
    #[serde(default)]
    pub endpoints: BTreeMap<String, String>,
    #[serde(default)]
    pub required_attributes: Option<BTreeSet<String>>,
    #[serde(default)]
    pub nameid_policy: Option<NameIdPolicy>,
    #[serde(default)]
    pub bindings: Vec<String>,
    /// IdP only: attribute source name to the attributes it supplies.
    #[serde(default)]
    pub attribute_sources: BTreeMap<String, BTreeSet<String>>,
}

/// Private key material for one entity, handed to its actor at startup.
#[derive(Clone, Debug)]
pub struct EntityKeys {
    pub signing: SigningKey,
    pub encryption: Option<EncryptionSecretKey>,
    pub derivation: Option<DerivationKey>,
}

/// A built federation: the public registry plus everything actors need
/// privately.
#[derive(Clone, Debug)]
pub struct Federation {
    pub seed: u64,
    pub registry: FederationRegistry,
    pub keys: BTreeMap<EntityId, EntityKeys>,
    pub enrollment: EnrollmentKey,
    pub attribute_sources: BTreeMap<EntityId, BTreeMap<String, BTreeSet<String>>>,
}

impl FederationConfig {
    pub fn from_toml_str(src: &str, path: &str) -> Result<Self, ConfigError> {
        toml::from_str(src).map_err(|e| ConfigError::Syntax {
            path: path.to_string(),
            message: e.to_string(),
        })
    }

    pub fn build(&self) -> Result<Federation, ConfigError> {
        let f = &self.federation;
        if f.min_group_size < 1 {
            return Err(ConfigError::field(
                "federation.min_group_size",
                "must be at least 1",
            ));
        }
        let policy = FederationPolicy {
            min_group_size: f.min_group_size,
            onetime_cert_validity: f.onetime_cert_validity,
            assertion_freshness: f.assertion_freshness,
            consent_mode_default: f.consent_mode_default,
            attribute_release_policy: BTreeMap::new(),
        };
        let mut registry = FederationRegistry::new(policy, f.seed);
        let mut keys = BTreeMap::new();
        let mut sources = BTreeMap::new();
        for (i, e) in self.entities.iter().enumerate() {
            let field = |name: &str| format!("entity[{i}].{name}");
            let id = EntityId::new(e.id.clone());
            if !e.attribute_sources.is_empty() && e.role != Role::Idp {
                return Err(ConfigError::field(
                    field("attribute_sources"),
                    "only identity providers have attribute sources",
                ));
            }
            let signing = SigningKey::from_seed(derive_static_seed(f.seed, &e.id, "signing"));
            let brokered = matches!(e.role, Role::Idp | Role::Sb);
            let encryption = brokered.then(|| {
                EncryptionSecretKey::from_seed(derive_static_seed(f.seed, &e.id, "encryption"))
            });
            let derivation =
                brokered.then(|| DerivationKey(derive_static_seed(f.seed, &e.id, "tid-derivation")));
            let desc = EntityDescriptor {
                entity_id: id.clone(),
                role: e.role,
                static_signing_key: signing.verifying_key(),
                static_encryption_key: encryption.as_ref().map(EncryptionSecretKey::public_key),
                endpoints: e.endpoints.clone(),
                required_attributes: e.required_attributes.clone(),
                nameid_policy: e.nameid_policy,
                bindings: e.bindings.clone(),
            };
            registry = registry.register_entity(desc).map_err(|err| match err {
                FederationError::DuplicateEntity(_) => {
                    ConfigError::field(field("id"), format!("duplicate entity id {:?}", e.id))
                }
                FederationError::InvalidDescriptor { violation, .. } => {
                    ConfigError::field(format!("entity[{i}] ({})", e.id), violation.to_string())
                }
                other => ConfigError::field(format!("entity[{i}]"), other.to_string()),
            })?;
            if e.role == Role::Idp {
                sources.insert(id.clone(), e.attribute_sources.clone());
            }
            keys.insert(
                id,
                EntityKeys {
                    signing,
                    encryption,
                    derivation,
                },
            );
        }
        for role in [Role::Sb, Role::Ca] {
            if registry.with_role(role).next().is_none() {
                return Err(ConfigError::field(
                    "entity",
                    format!("federation needs one entity with role {:?}", role.label().to_lowercase()),
                ));
            }
        }
        Ok(Federation {
            seed: f.seed,
            registry: registry.group_sps(),
            keys,
            enrollment: EnrollmentKey(derive_static_seed(f.seed, "federation", "enrollment")),
            attribute_sources: sources,
        })
    }
}
