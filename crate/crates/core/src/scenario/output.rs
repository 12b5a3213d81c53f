//! Transcript directories.
//!
//! A run writes, each file exactly once:
//!
//! * `transcript.json`: label, seed, the tx table and every bus entry.
//! * `ledgers.json`: every actor's observation ledger.
//! * `registry.json`: the public federation registry.
//! * `report.txt`: the audit report.
//! * `script.txt`: per-step results and the summary line.
//!
//! The first three are all [`load_audit_input`] needs to repeat the audit.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use super::RunOutput;
use crate::audit::{AuditInput, TxInfo};
use crate::federation::FederationRegistry;
use crate::observe::ObservationLedger;
use crate::sim::TranscriptEntry;

pub const TRANSCRIPT_FILE: &str = "transcript.json";
pub const LEDGERS_FILE: &str = "ledgers.json";
pub const REGISTRY_FILE: &str = "registry.json";
pub const REPORT_FILE: &str = "report.txt";
pub const SCRIPT_FILE: &str = "script.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptFile {
    pub label: String,
    pub seed: u64,
    pub txs: Vec<TxInfo>,
    pub entries: Vec<TranscriptEntry>,
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("MissingTranscript: {0} not found")]
    MissingTranscript(PathBuf),
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

fn write_new(dir: &Path, name: &str, contents: &str) -> io::Result<()> {
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(dir.join(name))?;
    f.write_all(contents.as_bytes())?;
    f.sync_all()
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("transcript types serialize");
    s.push('\n');
    s
}

impl RunOutput {
    pub fn transcript_file(&self) -> TranscriptFile {
        TranscriptFile {
            label: self.input.label.clone(),
            seed: self.seed,
            txs: self.input.txs.clone(),
            entries: self.sim.transcript().to_vec(),
        }
    }

    pub fn script_text(&self) -> String {
        let mut s = format!("scenario: {}\nseed: {}\n", self.scenario.name, self.seed);
        for step in &self.steps {
            s.push_str(&step.render());
            s.push('\n');
        }
        s.push_str(&self.summary_line());
        s.push('\n');
        s
    }

    /// Write the transcript directory. Refuses to overwrite an earlier run.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        write_new(dir, TRANSCRIPT_FILE, &pretty(&self.transcript_file()))?;
        write_new(dir, LEDGERS_FILE, &pretty(&self.input.ledgers))?;
        let mut registry = self.input.registry.canonical_json();
        registry.push('\n');
        write_new(dir, REGISTRY_FILE, &registry)?;
        write_new(dir, REPORT_FILE, &self.report.render())?;
        write_new(dir, SCRIPT_FILE, &self.script_text())
    }
}

fn read_json<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<T, TranscriptError> {
    let path = dir.join(name);
    let src = fs::read_to_string(&path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => TranscriptError::MissingTranscript(path.clone()),
        _ => TranscriptError::Corrupt {
            path: path.clone(),
            message: e.to_string(),
        },
    })?;
    serde_json::from_str(&src).map_err(|e| TranscriptError::Corrupt {
        path,
        message: e.to_string(),
    })
}

/// Reassemble the audit input of an earlier run from its directory.
pub fn load_audit_input(dir: &Path) -> Result<AuditInput, TranscriptError> {
    if !dir.is_dir() {
        return Err(TranscriptError::MissingTranscript(dir.to_path_buf()));
    }
    let transcript: TranscriptFile = read_json(dir, TRANSCRIPT_FILE)?;
    let ledgers: Vec<ObservationLedger> = read_json(dir, LEDGERS_FILE)?;
    let registry: FederationRegistry = read_json(dir, REGISTRY_FILE)?;
    let outcomes = transcript
        .entries
        .into_iter()
        .filter_map(|e| match e {
            TranscriptEntry::Outcome { outcome, .. } => Some(outcome),
            _ => None,
        })
        .collect();
    Ok(AuditInput {
        label: transcript.label,
        registry,
        ledgers,
        outcomes,
        txs: transcript.txs,
    })
}
