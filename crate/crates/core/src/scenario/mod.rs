//! Scenario files, the runner and transcript directories.
//!
//! ```toml
//! name = "websso_basic"
//! federation = "federation.toml"   # relative to this file
//! seed = 7
//!
//! [faults]
//! disable_encryption = false
//!
//! [[principal]]
//! id = "alice"
//! home_idp = "idp.northuni.tld"
//! password = "alice-pw"
//! email = "alice@northuni.tld"
//! client_addr = "198.51.100.11"
//! attributes = { givenName = "Alicja", mail = "alice@northuni.tld" }
//!
//! [[step]]
//! kind = "consent-grant"
//! principal = "alice"
//! sp = "sp1.shop.tld"
//! expect = "ok"
//!
//! [[step]]
//! kind = "websso"
//! principal = "alice"
//! sp = "sp1.shop.tld"
//! expect = "ok"
//! ```
//!
//! `expect` is `"ok"` or a rejection code such as `"ConsentMissing"`. A step
//! without `expect` is run but not checked.

mod output;
mod runner;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::actors::reference_id_for;
use crate::error::ConfigError;
use crate::federation::{ConsentMode, EntityId, Federation, FederationConfig, Role};
use crate::idmap::{tid_value, Tier, TidValue};
use crate::wstrust::Confirmation;
use crate::Attributes;

pub use output::{load_audit_input, TranscriptError, TranscriptFile};
pub use runner::{run_scenario, RunError, RunOptions, RunOutput, StepResult};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    federation: PathBuf,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    faults: Faults,
    #[serde(default, rename = "principal")]
    principals: Vec<PrincipalSpec>,
    #[serde(default, rename = "step")]
    steps: Vec<StepSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Faults {
    /// IdPs release attribute statements in the clear.
    #[serde(default)]
    pub disable_encryption: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrincipalSpec {
    pub id: String,
    pub home_idp: EntityId,
    pub password: String,
    pub email: String,
    pub client_addr: String,
    #[serde(default)]
    pub attributes: Attributes,
}

impl PrincipalSpec {
    pub fn email_domain(&self) -> &str {
        self.email.rsplit_once('@').map(|(_, d)| d).unwrap_or("")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct StepSpec {
    #[serde(flatten)]
    pub action: Step,
    #[serde(default)]
    pub expect: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplayTarget {
    /// The last hop of a WebSSO response, user agent to SP.
    Assertion,
    /// A WS invocation carrying a security token.
    Token,
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Step {
    Websso {
        principal: String,
        sp: EntityId,
        #[serde(default)]
        password: Option<String>,
    },
    Wstrust {
        principal: String,
        sp: EntityId,
        #[serde(default = "default_confirmation")]
        confirmation: Confirmation,
        #[serde(default)]
        swap_key: bool,
        #[serde(default)]
        present_to: Option<EntityId>,
        #[serde(default)]
        password: Option<String>,
    },
    ConsentGrant {
        principal: String,
        #[serde(default)]
        sp: Option<EntityId>,
        #[serde(default)]
        link: Option<[EntityId; 2]>,
        #[serde(default)]
        mode: Option<ConsentMode>,
        #[serde(default)]
        attributes: Option<BTreeSet<String>>,
    },
    ConsentRevoke {
        /// Defaults to the record granted most recently in this run.
        #[serde(default)]
        record: Option<u64>,
    },
    SendMessage {
        principal: String,
        sp: EntityId,
        subject: String,
        body: String,
        #[serde(default = "one")]
        count: usize,
    },
    Link {
        principal: String,
        sp: EntityId,
        peer: EntityId,
        payload: String,
        #[serde(default)]
        reply: Option<String>,
    },
    Replay {
        target: ReplayTarget,
        #[serde(default)]
        sp: Option<EntityId>,
        #[serde(default = "one")]
        trials: usize,
    },
    SpFaults {
        sp: EntityId,
        #[serde(default)]
        reuse_cert: bool,
        #[serde(default)]
        claim_proxy_of: Option<EntityId>,
    },
    Advance {
        seconds: u64,
    },
}

fn default_confirmation() -> Confirmation {
    Confirmation::HolderOfKey
}

fn one() -> usize {
    1
}

impl Step {
    pub fn label(&self) -> &'static str {
        match self {
            Step::Websso { .. } => "websso",
            Step::Wstrust { .. } => "wstrust",
            Step::ConsentGrant { .. } => "consent-grant",
            Step::ConsentRevoke { .. } => "consent-revoke",
            Step::SendMessage { .. } => "send-message",
            Step::Link { .. } => "link",
            Step::Replay { .. } => "replay",
            Step::SpFaults { .. } => "sp-faults",
            Step::Advance { .. } => "advance",
        }
    }
}

/// A parsed scenario together with its federation file.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub path: PathBuf,
    pub federation_path: PathBuf,
    pub federation: FederationConfig,
    pub seed: u64,
    pub faults: Faults,
    pub principals: Vec<PrincipalSpec>,
    pub steps: Vec<StepSpec>,
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = read(path)?;
        let file: ScenarioFile = toml::from_str(&src).map_err(|e| ConfigError::Syntax {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let federation_path = path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&file.federation);
        let federation = FederationConfig::from_toml_str(
            &read(&federation_path)?,
            &federation_path.display().to_string(),
        )?;
        Ok(Self {
            name: file.name,
            path: path.to_path_buf(),
            federation_path,
            federation,
            seed: file.seed,
            faults: file.faults,
            principals: file.principals,
            steps: file.steps,
        })
    }

    /// Build the federation and check that every reference resolves.
    pub fn build(&self, min_group_size: Option<usize>) -> Result<Federation, ConfigError> {
        let mut config = self.federation.clone();
        if let Some(n) = min_group_size {
            config.federation.min_group_size = n;
        }
        let fed = config.build()?;
        self.validate(&fed)?;
        Ok(fed)
    }

    fn validate(&self, fed: &Federation) -> Result<(), ConfigError> {
        let reg = &fed.registry;
        let has_role = |id: &EntityId, role: Role| reg.entity(id).is_some_and(|d| d.role == role);

        let mut ids = BTreeSet::new();
        for (i, p) in self.principals.iter().enumerate() {
            let field = |name: &str| format!("principal[{i}].{name}");
            if p.id.is_empty() || !p.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
                return Err(ConfigError::field(field("id"), "must be non-empty and use [A-Za-z0-9._-]"));
            }
            if !ids.insert(p.id.as_str()) {
                return Err(ConfigError::field(field("id"), format!("duplicate principal {:?}", p.id)));
            }
            if !has_role(&p.home_idp, Role::Idp) {
                return Err(ConfigError::field(
                    field("home_idp"),
                    format!("unknown identity provider {:?}", p.home_idp.as_str()),
                ));
            }
            if reg.entity(&p.home_idp).and_then(|d| d.endpoint("home_domain")).is_none() {
                return Err(ConfigError::field(
                    field("home_idp"),
                    format!("{} has no home_domain endpoint for discovery", p.home_idp),
                ));
            }
            if p.email_domain().is_empty() || p.email.starts_with('@') {
                return Err(ConfigError::field(field("email"), "expected local@domain"));
            }
            if p.client_addr.is_empty() {
                return Err(ConfigError::field(field("client_addr"), "must not be empty"));
            }
        }
        if self.steps.is_empty() {
            return Err(ConfigError::field("step", "scenario has no steps"));
        }

        for (i, s) in self.steps.iter().enumerate() {
            let field = |name: &str| format!("step[{i}].{name}");
            let principal = |p: &str| {
                if ids.contains(p) {
                    Ok(())
                } else {
                    Err(ConfigError::field(field("principal"), format!("unknown principal {p:?}")))
                }
            };
            let sp = |name: &str, id: &EntityId| {
                if has_role(id, Role::Sp) {
                    Ok(())
                } else {
                    Err(ConfigError::field(
                        field(name),
                        format!("unknown service provider {:?}", id.as_str()),
                    ))
                }
            };
            match &s.action {
                Step::Websso { principal: p, sp: target, .. } => {
                    principal(p)?;
                    sp("sp", target)?;
                }
                Step::Wstrust { principal: p, sp: target, present_to, .. } => {
                    principal(p)?;
                    sp("sp", target)?;
                    if let Some(t) = present_to {
                        sp("present_to", t)?;
                    }
                }
                Step::ConsentGrant { principal: p, sp: target, link, .. } => {
                    principal(p)?;
                    match (target, link) {
                        (Some(t), None) => sp("sp", t)?,
                        (None, Some([a, b])) => {
                            sp("link[0]", a)?;
                            sp("link[1]", b)?;
                        }
                        _ => {
                            return Err(ConfigError::field(
                                field("sp"),
                                "exactly one of sp and link is required",
                            ))
                        }
                    }
                }
                Step::ConsentRevoke { .. } | Step::Advance { .. } => {}
                Step::SendMessage { principal: p, sp: target, count, .. } => {
                    principal(p)?;
                    sp("sp", target)?;
                    if *count == 0 {
                        return Err(ConfigError::field(field("count"), "must be at least 1"));
                    }
                }
                Step::Link { principal: p, sp: target, peer, .. } => {
                    principal(p)?;
                    sp("sp", target)?;
                    sp("peer", peer)?;
                }
                Step::Replay { sp: target, trials, .. } => {
                    if let Some(t) = target {
                        sp("sp", t)?;
                    }
                    if *trials == 0 {
                        return Err(ConfigError::field(field("trials"), "must be at least 1"));
                    }
                }
                Step::SpFaults { sp: target, claim_proxy_of, .. } => {
                    sp("sp", target)?;
                    if let Some(t) = claim_proxy_of {
                        sp("claim_proxy_of", t)?;
                    }
                }
            }
            if let Some(e) = &s.expect {
                if e.is_empty() || !e.chars().all(|c| c.is_ascii_alphanumeric()) {
                    return Err(ConfigError::field(field("expect"), "expected \"ok\" or a rejection code"));
                }
            }
        }
        Ok(())
    }

    /// Principals grouped by home IdP.
    pub fn principals_at(&self) -> BTreeMap<&EntityId, Vec<&PrincipalSpec>> {
        let mut out: BTreeMap<&EntityId, Vec<&PrincipalSpec>> = BTreeMap::new();
        for p in &self.principals {
            out.entry(&p.home_idp).or_default().push(p);
        }
        out
    }

    pub fn principal(&self, id: &str) -> Option<&PrincipalSpec> {
        self.principals.iter().find(|p| p.id == id)
    }
}

/// The TID1 the broker keys `p`'s consent records by. Lets an operator
/// grant consent between runs without a login flow.
pub fn principal_key(fed: &Federation, p: &PrincipalSpec) -> TidValue {
    let sb = fed.registry.sb().expect("built federation").entity_id.clone();
    let key = fed.keys[&p.home_idp]
        .derivation
        .as_ref()
        .expect("identity providers have derivation keys");
    let refid = reference_id_for(fed.seed, &p.home_idp, &p.id);
    tid_value(key, &refid, &[sb], Tier::Tid1).expect("non-empty reference id and scope")
}
