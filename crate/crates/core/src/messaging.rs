//! Pseudonymous mail relay.
//!
//! An SP writes to `<TID2>@<sb mail domain>`. The broker rewrites that to
//! `<TID1>@<idp mail domain>`, the IdP rewrites it to the principal's real
//! address, and only that last hop ever carries the real address.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::federation::EntityId;
use crate::idmap::{SbPseudonyms, TidIssuer, TidValue};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelayAddress {
    pub local_part: String,
    pub domain: String,
}

impl RelayAddress {
    pub fn new(local_part: impl Into<String>, domain: impl Into<String>) -> Self {
        Self {
            local_part: local_part.into(),
            domain: domain.into(),
        }
    }
}

impl fmt::Display for RelayAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.local_part, self.domain)
    }
}

impl FromStr for RelayAddress {
    type Err = RewriteError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('@') {
            Some((l, d)) if !l.is_empty() && !d.is_empty() && !d.contains('@') => {
                Ok(Self::new(l, d))
            }
            _ => Err(RewriteError::BadAddress(s.to_string())),
        }
    }
}

impl Serialize for RelayAddress {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RelayAddress {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayedMessage {
    pub to: RelayAddress,
    pub from: RelayAddress,
    pub subject: String,
    pub body: String,
    /// Role labels of the hops the message has passed, in order.
    pub hop_trace: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewriteError {
    #[error("local part {0:?} cannot be resolved at this hop")]
    UnresolvableLocalPart(String),
    #[error("{hop} does not serve domain {domain:?}")]
    WrongDomainForHop { hop: String, domain: String },
    #[error("not an address: {0:?}")]
    BadAddress(String),
}

fn check_domain(hop: &str, served: &str, addr: &RelayAddress) -> Result<TidValue, RewriteError> {
    if addr.domain != served {
        return Err(RewriteError::WrongDomainForHop {
            hop: hop.to_string(),
            domain: addr.domain.clone(),
        });
    }
    TidValue::parse(&addr.local_part)
        .ok_or_else(|| RewriteError::UnresolvableLocalPart(addr.local_part.clone()))
}

/// Broker hop: `TID2@sb` to `TID1@idp`. `sender` must be the SP the TID2 is
/// scoped to. Returns the rewritten address and the IdP to forward to.
pub fn sb_rewrite(
    pseudonyms: &SbPseudonyms,
    sb_domain: &str,
    sender: &EntityId,
    addr: &RelayAddress,
    idp_mail_domain: impl Fn(&EntityId) -> Option<String>,
) -> Result<(RelayAddress, EntityId), RewriteError> {
    let tid2 = check_domain("SB", sb_domain, addr)?;
    let unresolvable = || RewriteError::UnresolvableLocalPart(addr.local_part.clone());
    let (tid1, sp) = pseudonyms.resolve_tid2(&tid2).map_err(|_| unresolvable())?;
    if &sp != sender {
        return Err(unresolvable());
    }
    let idp = pseudonyms.tid1_origin(&tid1).ok_or_else(unresolvable)?.idp.clone();
    let domain = idp_mail_domain(&idp).ok_or_else(unresolvable)?;
    Ok((RelayAddress::new(tid1.as_str(), domain), idp))
}

/// IdP hop: `TID1@idp` to the principal's real address. `address_of` maps a
/// reference id to the stored address.
pub fn idp_rewrite(
    tids: &TidIssuer,
    idp_domain: &str,
    addr: &RelayAddress,
    address_of: impl Fn(&str) -> Option<String>,
) -> Result<RelayAddress, RewriteError> {
    let tid1 = check_domain("IDP", idp_domain, addr)?;
    let unresolvable = || RewriteError::UnresolvableLocalPart(addr.local_part.clone());
    let refid = tids.resolve_tid(&tid1).map_err(|_| unresolvable())?;
    address_of(refid).ok_or_else(unresolvable)?.parse()
}
