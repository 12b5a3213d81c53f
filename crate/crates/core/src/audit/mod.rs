//! Privacy audit of a completed run.
//!
//! The audit is a pure function of [`AuditInput`]: the public registry, the
//! frozen observation ledgers, the outcome log and the harness's table of
//! which transaction belonged to which step. Nothing in it consults actor
//! state, so re-running it offline over a transcript directory gives the
//! same report.

pub mod checks;
pub mod matrix;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::federation::{EntityId, FederationRegistry};
use crate::observe::ObservationLedger;
use crate::sim::Outcome;

pub use checks::{check_all, RequirementResult, Verdict};
pub use matrix::{build_matrix, AuditRole, CellDiff, DataColumn, Exposure, ExposureMatrix};

/// Harness bookkeeping for one scripted step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxInfo {
    pub tx: String,
    pub step: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub principal: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sp: Option<EntityId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditInput {
    /// Free-form run label printed in the report header.
    pub label: String,
    pub registry: FederationRegistry,
    pub ledgers: Vec<ObservationLedger>,
    pub outcomes: Vec<Outcome>,
    pub txs: Vec<TxInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuditError {
    #[error("scenario produced no outcomes; nothing to audit")]
    IncompleteScenario,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub label: String,
    pub observed: ExposureMatrix,
    pub diff: Vec<CellDiff>,
    pub requirements: Vec<RequirementResult>,
}

impl AuditReport {
    pub fn matrix_exact(&self) -> bool {
        self.diff.is_empty()
    }

    /// No cell reveals more than the expected matrix allows.
    pub fn matrix_conforms(&self) -> bool {
        !self.diff.iter().any(CellDiff::is_violation)
    }

    pub fn count(&self, v: Verdict) -> usize {
        self.requirements.iter().filter(|r| r.verdict == v).count()
    }

    /// WEAK and N/A do not fail a run.
    pub fn passed(&self) -> bool {
        self.matrix_conforms() && self.count(Verdict::Fail) == 0
    }

    pub fn requirement(&self, id: &str) -> Option<&RequirementResult> {
        self.requirements.iter().find(|r| r.id == id)
    }

    pub fn summary_line(&self) -> String {
        format!(
            "RESULT status={} matrix={} diff={} pass={} weak={} fail={} na={}",
            if self.passed() { "PASS" } else { "FAIL" },
            if self.matrix_exact() {
                "EXACT"
            } else if self.matrix_conforms() {
                "WITHIN"
            } else {
                "EXCEEDS"
            },
            self.diff.len(),
            self.count(Verdict::Pass),
            self.count(Verdict::Weak),
            self.count(Verdict::Fail),
            self.count(Verdict::NotApplicable),
        )
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("PRIVACY AUDIT REPORT\n");
        out.push_str(&format!("run: {}\n\n", self.label));
        out.push_str("Exposure matrix (observed)\n");
        out.push_str(&self.observed.render());
        out.push_str("\nExposure matrix (expected)\n");
        out.push_str(&ExposureMatrix::expected().render());
        out.push('\n');
        if self.diff.is_empty() {
            out.push_str("matrix: observed equals expected in every cell\n");
        } else {
            out.push_str(&format!("matrix: {} cells differ\n", self.diff.len()));
            for d in &self.diff {
                out.push_str(&format!(
                    "  {} x {}: expected {}, observed {}{}\n",
                    d.role.label(),
                    d.column.label(),
                    d.expected,
                    d.observed,
                    if d.is_violation() { "  VIOLATION" } else { "  (less exposed)" },
                ));
            }
        }
        out.push_str("\nRequirements\n");
        for r in &self.requirements {
            out.push_str(&format!(
                "{:<4} {:<5} {}: {}\n",
                r.id,
                r.verdict.label(),
                r.title,
                r.predicate
            ));
            for e in &r.evidence {
                out.push_str(&format!("       - {e}\n"));
            }
        }
        out.push_str(LEGEND);
        out.push('\n');
        out.push_str(&self.summary_line());
        out.push('\n');
        out
    }
}

const LEGEND: &str = "
Legend
  NOT_SEEN        no event of the column in any ledger of the role
  SEEN            the element itself was observed
  PROXY_ONLY      SP identities observed were proxy or broker ids only
  SELF_ONLY       the SP saw only its own identity, or a peer under link consent
  PSEUDONYM_ONLY  targeted identifiers only, never a user identity
  GROUPED_ONLY    attribute names observed only as a proxy group's requirements
  PUBLIC_ONLY     public halves of SP encryption keys only
  CERTIFY_ONLY    public halves, observed while certifying them
  PRIVATE         the private half of an SP encryption key
  The reference table leaves some cells blank; those are set to the exposure
  the protocol necessarily implies. ATTRIBUTE_VALUES is an added column.
  A cell is a violation when it reveals more than the expected cell.
  WEAK verdicts hold but flag configurations with little protection.
";

pub fn run_audit(input: &AuditInput) -> Result<AuditReport, AuditError> {
    if input.outcomes.is_empty() {
        return Err(AuditError::IncompleteScenario);
    }
    let observed = build_matrix(&input.ledgers, &input.registry);
    let diff = observed.diff(&ExposureMatrix::expected());
    Ok(AuditReport {
        label: input.label.clone(),
        observed,
        diff,
        requirements: check_all(input),
    })
}
