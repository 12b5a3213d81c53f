//! Scenario loading, transcript directories and offline audits.

use std::fs;
use std::path::{Path, PathBuf};

use pefim::audit::{run_audit, Verdict};
use pefim::consent::{StateLock, STORE_FILE};
use pefim::error::ConfigError;
use pefim::scenario::{load_audit_input, run_scenario, RunError, RunOptions, TranscriptError};
use pefim::sim::Outcome;

fn bundled(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(format!("{name}.toml"))
}

/// A scenario in `dir` over the bundled federation.
fn write_scenario(dir: &Path, body: &str) -> PathBuf {
    let fed = bundled("federation");
    let src = format!(
        "name = \"probe\"\nfederation = {:?}\nseed = 3\n\n[[principal]]\nid = \"alice\"\nhome_idp = \"idp.northuni.example\"\npassword = \"pw\"\nemail = \"alice@northuni.example\"\nclient_addr = \"198.51.100.9\"\nattributes = {{ mail = \"alice@northuni.example\", affiliation = \"Dept of Optics\" }}\n\n{body}",
        fed.display().to_string()
    );
    let path = dir.join("probe.toml");
    fs::write(&path, src).unwrap();
    path
}

fn config_err(r: Result<pefim::scenario::RunOutput, RunError>) -> ConfigError {
    match r {
        Err(RunError::Config(e)) => e,
        Err(e) => panic!("expected a config error, got {e}"),
        Ok(_) => panic!("expected a config error, run succeeded"),
    }
}

#[test]
fn unknown_sp_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scenario(
        dir.path(),
        "[[step]]\nkind = \"consent-grant\"\nprincipal = \"alice\"\nsp = \"library.example\"\n\n[[step]]\nkind = \"websso\"\nprincipal = \"alice\"\nsp = \"nosuch.example\"\n",
    );
    let e = config_err(run_scenario(&path, &RunOptions::default()));
    assert!(matches!(&e, ConfigError::Field { field, .. } if field == "step[1].sp"), "{e}");
    assert!(e.to_string().contains("nosuch.example"), "{e}");
}

#[test]
fn unknown_principal_and_bad_syntax() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scenario(dir.path(), "[[step]]\nkind = \"websso\"\nprincipal = \"mallory\"\nsp = \"library.example\"\n");
    let e = config_err(run_scenario(&path, &RunOptions::default()));
    assert!(e.to_string().starts_with("step[0].principal"), "{e}");

    let path = write_scenario(dir.path(), "[[step]]\nkind = \"teleport\"\n");
    let e = config_err(run_scenario(&path, &RunOptions::default()));
    assert!(matches!(e, ConfigError::Syntax { .. }), "{e}");
    assert!(e.to_string().contains("probe.toml"), "{e}");
}

#[test]
fn offline_audit_matches_and_tampering_fails() {
    let out = run_scenario(&bundled("websso_basic"), &RunOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    out.write(&run_dir).unwrap();

    let offline = run_audit(&load_audit_input(&run_dir).unwrap()).unwrap();
    assert_eq!(offline, out.report);
    assert_eq!(offline.render(), fs::read_to_string(run_dir.join("report.txt")).unwrap());
    assert!(offline.passed());

    // Plant one plaintext attribute value in the broker's ledger.
    let ledgers = run_dir.join("ledgers.json");
    let mut json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&ledgers).unwrap()).unwrap();
    let sb = json
        .as_array_mut()
        .unwrap()
        .iter_mut()
        .find(|l| l["role"] == "SB")
        .unwrap();
    sb["events"].as_array_mut().unwrap().push(serde_json::json!({
        "seq": 9999, "time": 1, "kind": "ATTRIBUTE_VALUE", "value": "Student of Chemistry"
    }));
    fs::write(&ledgers, serde_json::to_string(&json).unwrap()).unwrap();
    let tampered = run_audit(&load_audit_input(&run_dir).unwrap()).unwrap();
    assert!(!tampered.passed());
    let r3 = tampered.requirement("R3").unwrap();
    assert_eq!(r3.verdict, Verdict::Fail);
    assert!(r3.evidence.iter().any(|e| e.contains("#9999") && e.contains("Student of Chemistry")), "{:?}", r3.evidence);
}

#[test]
fn missing_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let gone = dir.path().join("never-written");
    assert!(matches!(load_audit_input(&gone), Err(TranscriptError::MissingTranscript(_))));
    fs::create_dir(&gone).unwrap();
    assert!(matches!(load_audit_input(&gone), Err(TranscriptError::MissingTranscript(_))));
}

#[test]
fn output_directory_is_written_once() {
    let out = run_scenario(&bundled("one_to_one"), &RunOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.write(dir.path()).unwrap();
    assert!(out.write(dir.path()).is_err());
    let script = fs::read_to_string(dir.path().join("script.txt")).unwrap();
    assert!(script.trim_end().lines().last().unwrap().starts_with("RESULT status=PASS"));
}

#[test]
fn consent_persists_across_runs_in_a_state_dir() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state");
    let grant = write_scenario(
        dir.path(),
        "[[step]]\nkind = \"consent-grant\"\nprincipal = \"alice\"\nsp = \"library.example\"\nexpect = \"ok\"\n",
    );
    let opts = RunOptions { state_dir: Some(state.clone()), ..RunOptions::default() };
    assert!(run_scenario(&grant, &opts).unwrap().script_ok());
    assert!(state.join(STORE_FILE).exists());

    let sso_dir = dir.path().join("sso");
    fs::create_dir(&sso_dir).unwrap();
    let sso = write_scenario(
        &sso_dir,
        "[[step]]\nkind = \"websso\"\nprincipal = \"alice\"\nsp = \"journals.example\"\nexpect = \"ok\"\n",
    );
    let without = run_scenario(&sso, &RunOptions::default()).unwrap();
    assert_eq!(without.steps[0].observed[0].1, "ConsentMissing");
    let with = run_scenario(&sso, &opts).unwrap();
    assert!(with.script_ok(), "{:?}", with.steps);

    let _held = StateLock::acquire(&state).unwrap();
    assert!(matches!(run_scenario(&sso, &opts), Err(RunError::State(_))));
}

#[test]
fn stress_mode_keeps_the_privacy_properties() {
    let opts = RunOptions { stress: true, ..RunOptions::default() };
    let out = run_scenario(&bundled("websso_basic"), &opts).unwrap();
    assert!(out.script_ok(), "{:?}", out.steps);
    assert!(out.report.passed(), "{}", out.report.render());
    let sessions = out
        .sim
        .outcomes()
        .filter(|o| matches!(o, Outcome::SessionEstablished { .. }))
        .count();
    assert_eq!(sessions, 12);
}

#[test]
fn larger_minimum_group_size_ungroups_everything() {
    let opts = RunOptions { min_group_size: Some(3), ..RunOptions::default() };
    let out = run_scenario(&bundled("websso_basic"), &opts).unwrap();
    assert!(!out.script_ok());
    assert!(out
        .steps
        .iter()
        .flat_map(|s| &s.observed)
        .all(|(_, o)| o == "Ungrouped"));
}

#[test]
fn singleton_groups_are_weak_not_failing() {
    let out = run_scenario(&bundled("one_to_one"), &RunOptions::default()).unwrap();
    assert_eq!(out.report.requirement("R1").unwrap().verdict, Verdict::Weak);
    assert!(out.passed());
}

#[test]
fn gate_faults_are_refused_before_release() {
    let out = run_scenario(&bundled("gate_faults"), &RunOptions::default()).unwrap();
    assert!(out.script_ok(), "{:?}", out.steps);
    let r5 = out.report.requirement("R5").unwrap();
    assert_eq!(r5.verdict, Verdict::Pass);
    // The wrong password and the foreign proxy claim both stop at the gate.
    assert_eq!(r5.evidence.len(), 2, "{:?}", r5.evidence);
    assert!(r5.evidence.iter().all(|e| e.contains("rejected at the gate")));
}
