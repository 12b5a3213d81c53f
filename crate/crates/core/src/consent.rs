//! Consent records held by the broker, keyed by TID1.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::federation::ConsentMode;
use crate::federation::{EntityId, FederationRegistry, Role};
use crate::idmap::TidValue;
use crate::SimTime;

pub const STORE_FILE: &str = "consent_store.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "UPPERCASE")]
pub enum ConsentTarget {
    Proxy { proxy_id: EntityId },
    Link { sp_a: EntityId, sp_b: EntityId },
}

impl ConsentTarget {
    pub fn is_link(&self) -> bool {
        matches!(self, ConsentTarget::Link { .. })
    }

    /// Link consent is symmetric: it covers both directed TID3s.
    fn covers(&self, other: &ConsentTarget) -> bool {
        match (self, other) {
            (ConsentTarget::Link { sp_a, sp_b }, ConsentTarget::Link { sp_a: a, sp_b: b }) => {
                (sp_a == a && sp_b == b) || (sp_a == b && sp_b == a)
            }
            _ => self == other,
        }
    }
}

impl fmt::Display for ConsentTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConsentTarget::Proxy { proxy_id } => write!(f, "{proxy_id}"),
            ConsentTarget::Link { sp_a, sp_b } => write!(f, "LINK({sp_a},{sp_b})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentRecord {
    pub id: u64,
    pub principal_key: TidValue,
    pub target: ConsentTarget,
    pub attributes: BTreeSet<String>,
    pub mode: ConsentMode,
    pub granted_at: SimTime,
    #[serde(default)]
    pub revoked_at: Option<SimTime>,
    /// Set when a transactional record has been spent.
    #[serde(default)]
    pub consumed_at: Option<SimTime>,
}

impl ConsentRecord {
    pub fn is_active(&self) -> bool {
        self.revoked_at.is_none() && self.consumed_at.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConsentError {
    #[error("consent target {0} is not known to the registry")]
    UnknownTarget(String),
    #[error("no active consent covers this release")]
    ConsentMissing,
    #[error("requested attributes exceed the consented set")]
    AttributeSetExceedsConsent,
    #[error("no consent record with id {0}")]
    UnknownRecord(u64),
    #[error("record {0} is a link consent and cannot be revoked")]
    LinkIrrevocable(u64),
}

/// Proof handed to the IdP that a release is covered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentToken {
    pub record_id: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentStore {
    next_id: u64,
    records: Vec<ConsentRecord>,
}

impl ConsentStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn grant_consent(
        &mut self,
        registry: &FederationRegistry,
        principal_key: TidValue,
        target: ConsentTarget,
        attributes: BTreeSet<String>,
        mode: ConsentMode,
        now: SimTime,
    ) -> Result<&ConsentRecord, ConsentError> {
        let known = match &target {
            ConsentTarget::Proxy { proxy_id } => registry.is_proxy(proxy_id),
            ConsentTarget::Link { sp_a, sp_b } => {
                let is_sp = |id: &EntityId| registry.entity(id).is_some_and(|d| d.role == Role::Sp);
                sp_a != sp_b && is_sp(sp_a) && is_sp(sp_b)
            }
        };
        if !known {
            return Err(ConsentError::UnknownTarget(target.to_string()));
        }
        let attributes = if target.is_link() {
            BTreeSet::new()
        } else {
            attributes
        };
        self.next_id += 1;
        self.records.push(ConsentRecord {
            id: self.next_id,
            principal_key,
            target,
            attributes,
            mode,
            granted_at: now,
            revoked_at: None,
            consumed_at: None,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    /// Find an active record covering `requested` and spend it if it is
    /// transactional. Up-front and out-of-band records are reusable.
    pub fn check_and_consume(
        &mut self,
        principal_key: &TidValue,
        target: &ConsentTarget,
        requested: &BTreeSet<String>,
        now: SimTime,
    ) -> Result<ConsentToken, ConsentError> {
        let mut saw_active = false;
        for r in self.records.iter_mut() {
            if &r.principal_key != principal_key || !r.target.covers(target) || !r.is_active() {
                continue;
            }
            saw_active = true;
            if target.is_link() || requested.is_subset(&r.attributes) {
                if r.mode == ConsentMode::Transactional {
                    r.consumed_at = Some(now);
                }
                return Ok(ConsentToken { record_id: r.id });
            }
        }
        if saw_active {
            Err(ConsentError::AttributeSetExceedsConsent)
        } else {
            Err(ConsentError::ConsentMissing)
        }
    }

    pub fn list_consents(&self, principal_key: &TidValue) -> Vec<&ConsentRecord> {
        self.records
            .iter()
            .filter(|r| &r.principal_key == principal_key)
            .collect()
    }

    pub fn records(&self) -> &[ConsentRecord] {
        &self.records
    }

    pub fn revoke_consent(&mut self, record_id: u64, now: SimTime) -> Result<&ConsentRecord, ConsentError> {
        let r = self
            .records
            .iter_mut()
            .find(|r| r.id == record_id)
            .ok_or(ConsentError::UnknownRecord(record_id))?;
        if r.target.is_link() {
            return Err(ConsentError::LinkIrrevocable(record_id));
        }
        if r.revoked_at.is_none() {
            r.revoked_at = Some(now);
        }
        Ok(r)
    }

    pub fn load(dir: &Path) -> io::Result<Self> {
        let path = dir.join(STORE_FILE);
        match fs::read_to_string(&path) {
            Ok(s) => serde_json::from_str(&s).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(e),
        }
    }

    pub fn save(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!("{STORE_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(self).expect("store serializes"))?;
        fs::rename(tmp, dir.join(STORE_FILE))
    }
}

/// Exclusive hold on a state directory for the lifetime of the value.
#[derive(Debug)]
pub struct StateLock {
    path: PathBuf,
}

impl StateLock {
    pub fn acquire(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == io::ErrorKind::AlreadyExists {
                    io::Error::new(
                        io::ErrorKind::WouldBlock,
                        format!("state directory {} is locked by another invocation", dir.display()),
                    )
                } else {
                    e
                }
            })?;
        Ok(Self { path })
    }
}

impl Drop for StateLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
