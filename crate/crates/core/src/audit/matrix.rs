//! The exposure matrix: which actor role saw which class of data element.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::federation::FederationRegistry;
use crate::observe::{is_link_tag, ElementKind, ObservationLedger};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AuditRole {
    Ca,
    Idp,
    Sb,
    Discovery,
    Sp,
}

impl AuditRole {
    pub const ALL: [AuditRole; 5] = [
        AuditRole::Ca,
        AuditRole::Idp,
        AuditRole::Sb,
        AuditRole::Discovery,
        AuditRole::Sp,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AuditRole::Ca => "CA",
            AuditRole::Idp => "IDP",
            AuditRole::Sb => "SB",
            AuditRole::Discovery => "DISCOVERY",
            AuditRole::Sp => "SP",
        }
    }

    /// The row a ledger belongs to. User agents, WS clients and mailboxes
    /// are not federation actors and have no row.
    pub fn of_ledger(role: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.label() == role)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DataColumn {
    ClientAddr,
    SpIdentity,
    /// USER_IDENTITY and PSEUDONYM events.
    UserIdentity,
    /// SIGNING_ROOT events.
    CaSigningKey,
    /// ENC_KEY_PUBLIC and ENC_KEY_PRIVATE events.
    SpEncKey,
    /// ATTRIBUTE_NAME events.
    RequiredAttrs,
    AttributeValues,
}

impl DataColumn {
    pub const ALL: [DataColumn; 7] = [
        DataColumn::ClientAddr,
        DataColumn::SpIdentity,
        DataColumn::UserIdentity,
        DataColumn::CaSigningKey,
        DataColumn::SpEncKey,
        DataColumn::RequiredAttrs,
        DataColumn::AttributeValues,
    ];

    pub fn label(self) -> &'static str {
        match self {
            DataColumn::ClientAddr => "CLIENT_ADDR",
            DataColumn::SpIdentity => "SP_IDENTITY",
            DataColumn::UserIdentity => "USER_IDENTITY",
            DataColumn::CaSigningKey => "CA_SIGNING_KEY",
            DataColumn::SpEncKey => "SP_ENC_KEY",
            DataColumn::RequiredAttrs => "REQUIRED_ATTRS",
            DataColumn::AttributeValues => "ATTRIBUTE_VALUES",
        }
    }
}

/// Cell vocabulary. Each variant other than SEEN and NOT_SEEN is a
/// predicate over the events of the column:
///
/// * `PROXY_ONLY`: every SP identity is a proxy id or the broker.
/// * `SELF_ONLY`: every SP identity is the observer itself or was received
///   under a link consent.
/// * `PSEUDONYM_ONLY`: pseudonyms but no user identity.
/// * `GROUPED_ONLY`: every attribute name was observed for a proxy group.
/// * `PUBLIC_ONLY`: public halves of SP keys only.
/// * `CERTIFY_ONLY`: public halves, seen while holding the signing root.
/// * `PRIVATE`: a private half.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Exposure {
    NotSeen,
    ProxyOnly,
    SelfOnly,
    PseudonymOnly,
    GroupedOnly,
    PublicOnly,
    CertifyOnly,
    Private,
    Seen,
}

impl Exposure {
    pub fn label(self) -> &'static str {
        match self {
            Exposure::NotSeen => "NOT_SEEN",
            Exposure::ProxyOnly => "PROXY_ONLY",
            Exposure::SelfOnly => "SELF_ONLY",
            Exposure::PseudonymOnly => "PSEUDONYM_ONLY",
            Exposure::GroupedOnly => "GROUPED_ONLY",
            Exposure::PublicOnly => "PUBLIC_ONLY",
            Exposure::CertifyOnly => "CERTIFY_ONLY",
            Exposure::Private => "PRIVATE",
            Exposure::Seen => "SEEN",
        }
    }

    /// `self` reveals no more than `other`.
    pub fn within(self, other: Exposure) -> bool {
        use Exposure::*;
        self == other
            || self == NotSeen
            || other == Seen
            || matches!((self, other), (PublicOnly, Private) | (PublicOnly, CertifyOnly))
    }

    /// Combine two actors of the same role. Disagreement is reported as the
    /// weakest claim, SEEN.
    fn join(self, other: Exposure) -> Exposure {
        match (self, other) {
            (Exposure::NotSeen, x) | (x, Exposure::NotSeen) => x,
            (a, b) if a == b => a,
            _ => Exposure::Seen,
        }
    }
}

impl fmt::Display for Exposure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureMatrix {
    pub cells: BTreeMap<AuditRole, BTreeMap<DataColumn, Exposure>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellDiff {
    pub role: AuditRole,
    pub column: DataColumn,
    pub expected: Exposure,
    pub observed: Exposure,
}

impl CellDiff {
    /// The observed cell reveals more than the expected one.
    pub fn is_violation(&self) -> bool {
        !self.observed.within(self.expected)
    }
}

impl ExposureMatrix {
    pub fn get(&self, role: AuditRole, column: DataColumn) -> Exposure {
        self.cells
            .get(&role)
            .and_then(|r| r.get(&column))
            .copied()
            .unwrap_or(Exposure::NotSeen)
    }

    fn from_rows(rows: [(AuditRole, [Exposure; 7]); 5]) -> Self {
        let cells = rows
            .into_iter()
            .map(|(role, row)| (role, DataColumn::ALL.into_iter().zip(row).collect()))
            .collect();
        Self { cells }
    }

    /// The reference exposure of a brokered federation. Cells the reference
    /// table leaves blank are filled with what the protocol necessarily
    /// shows; ATTRIBUTE_VALUES is an extra column backing the
    /// end-to-end encryption check.
    pub fn expected() -> Self {
        use Exposure::*;
        Self::from_rows([
            (
                AuditRole::Ca,
                [NotSeen, NotSeen, NotSeen, Seen, CertifyOnly, NotSeen, NotSeen],
            ),
            (
                AuditRole::Idp,
                [Seen, ProxyOnly, Seen, NotSeen, PublicOnly, GroupedOnly, Seen],
            ),
            (
                AuditRole::Sb,
                [Seen, Seen, PseudonymOnly, NotSeen, PublicOnly, GroupedOnly, NotSeen],
            ),
            (
                AuditRole::Discovery,
                [Seen, Seen, NotSeen, NotSeen, NotSeen, GroupedOnly, NotSeen],
            ),
            (
                AuditRole::Sp,
                [Seen, SelfOnly, PseudonymOnly, NotSeen, Private, Seen, Seen],
            ),
        ])
    }

    pub fn diff(&self, expected: &ExposureMatrix) -> Vec<CellDiff> {
        let mut out = Vec::new();
        for role in AuditRole::ALL {
            for column in DataColumn::ALL {
                let (e, o) = (expected.get(role, column), self.get(role, column));
                if e != o {
                    out.push(CellDiff {
                        role,
                        column,
                        expected: e,
                        observed: o,
                    });
                }
            }
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<10}", "ROLE");
        for c in DataColumn::ALL {
            out.push_str(&format!(" {:<16}", c.label()));
        }
        let mut out = out.trim_end().to_string();
        out.push('\n');
        for role in AuditRole::ALL {
            let mut line = format!("{:<10}", role.label());
            for c in DataColumn::ALL {
                line.push_str(&format!(" {:<16}", self.get(role, c).label()));
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}

/// Classify one ledger's events for one column.
pub fn classify(ledger: &ObservationLedger, column: DataColumn, registry: &FederationRegistry) -> Exposure {
    use Exposure::*;
    let any = |k: ElementKind| ledger.has(k);
    match column {
        DataColumn::ClientAddr => seen_if(any(ElementKind::ClientAddr)),
        DataColumn::CaSigningKey => seen_if(any(ElementKind::SigningRoot)),
        DataColumn::AttributeValues => seen_if(any(ElementKind::AttributeValue)),
        DataColumn::UserIdentity => {
            if any(ElementKind::UserIdentity) {
                Seen
            } else if any(ElementKind::Pseudonym) {
                PseudonymOnly
            } else {
                NotSeen
            }
        }
        DataColumn::SpEncKey => {
            if any(ElementKind::EncKeyPrivate) {
                Private
            } else if any(ElementKind::EncKeyPublic) {
                if any(ElementKind::SigningRoot) {
                    CertifyOnly
                } else {
                    PublicOnly
                }
            } else {
                NotSeen
            }
        }
        DataColumn::SpIdentity => {
            let events: Vec<_> = ledger.of_kind(ElementKind::SpIdentity).collect();
            if events.is_empty() {
                return NotSeen;
            }
            let brokers: BTreeSet<&str> = registry
                .sb()
                .map(|d| d.entity_id.as_str())
                .into_iter()
                .collect();
            let proxy_like = |v: &str| brokers.contains(v) || registry.is_proxy(&v.into());
            if events.iter().all(|e| proxy_like(&e.value)) {
                ProxyOnly
            } else if events
                .iter()
                .all(|e| e.value == ledger.owner || is_link_tag(e.about.as_deref()))
            {
                SelfOnly
            } else {
                Seen
            }
        }
        DataColumn::RequiredAttrs => {
            let mut events = ledger.of_kind(ElementKind::AttributeName).peekable();
            if events.peek().is_none() {
                return NotSeen;
            }
            if events.all(|e| e.about.as_ref().is_some_and(|a| registry.is_proxy(&a.as_str().into()))) {
                GroupedOnly
            } else {
                Seen
            }
        }
    }
}

fn seen_if(b: bool) -> Exposure {
    if b {
        Exposure::Seen
    } else {
        Exposure::NotSeen
    }
}

/// Classify every ledger and join per role.
pub fn build_matrix(ledgers: &[ObservationLedger], registry: &FederationRegistry) -> ExposureMatrix {
    let mut cells: BTreeMap<AuditRole, BTreeMap<DataColumn, Exposure>> = AuditRole::ALL
        .into_iter()
        .map(|r| (r, DataColumn::ALL.into_iter().map(|c| (c, Exposure::NotSeen)).collect()))
        .collect();
    for ledger in ledgers {
        let Some(role) = AuditRole::of_ledger(&ledger.role) else {
            continue;
        };
        let row = cells.get_mut(&role).expect("all roles present");
        for column in DataColumn::ALL {
            let cell = row.get_mut(&column).expect("all columns present");
            *cell = cell.join(classify(ledger, column, registry));
        }
    }
    ExposureMatrix { cells }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice() {
        use Exposure::*;
        assert!(NotSeen.within(Private));
        assert!(PublicOnly.within(Private));
        assert!(PublicOnly.within(CertifyOnly));
        assert!(Private.within(Seen));
        assert!(!Seen.within(NotSeen));
        assert!(!Private.within(PublicOnly));
        assert!(!PseudonymOnly.within(NotSeen));
        assert_eq!(Private.join(NotSeen), Private);
        assert_eq!(Private.join(PublicOnly), Seen);
    }

    #[test]
    fn expected_diff_is_empty_against_itself() {
        let m = ExposureMatrix::expected();
        assert!(m.diff(&m).is_empty());
        assert_eq!(m.get(AuditRole::Sb, DataColumn::AttributeValues), Exposure::NotSeen);
        assert!(m.render().lines().count() == 6);
    }
}
