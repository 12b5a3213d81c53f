//! End-to-end checks of the `pefim` binary: exit codes and outputs.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/scenarios")
        .join(format!("{name}.toml"))
}

fn pefim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pefim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn reference_run_passes_and_ends_with_summary() {
    let o = pefim(&["run", s(&scenario("websso_basic"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let last = stdout(&o).lines().last().unwrap().to_string();
    assert!(last.starts_with("RESULT status=PASS matrix=EXACT diff=0"), "{last}");
    assert!(last.ends_with("script=OK steps=18"), "{last}");
}

#[test]
fn disabled_encryption_fails_the_audit() {
    let o = pefim(&["run", s(&scenario("disable_encryption"))]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).lines().last().unwrap().starts_with("RESULT status=FAIL matrix=EXCEEDS"));
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let src = fs::read_to_string(scenario("one_to_one"))
        .unwrap()
        .replace("federation_singletons.toml", s(&scenario("federation_singletons")))
        .replacen("sp = \"bikeshare.example\"", "sp = \"ghost.example\"", 1);
    let path = dir.path().join("bad.toml");
    fs::write(&path, src).unwrap();
    let o = pefim(&["run", s(&path)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("ConfigError: step[1].sp: unknown service provider \"ghost.example\""), "{}", stderr(&o));

    let o = pefim(&["run", "/nonexistent/scenario.toml"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn same_seed_same_directory() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = pefim(&["run", s(&scenario("linking")), "--seed", "1", "--out", s(d)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["transcript.json", "ledgers.json", "registry.json", "report.txt", "script.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    // The directory is append-only: a second run into it is refused.
    let o = pefim(&["run", s(&scenario("linking")), "--out", s(&a)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn audit_subcommand_repeats_the_in_run_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(code(&pefim(&["run", s(&scenario("replay")), "--out", s(&out)])), 0);
    let o = pefim(&["audit", s(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), fs::read_to_string(out.join("report.txt")).unwrap());

    let o = pefim(&["audit", s(&dir.path().join("missing"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("MissingTranscript"), "{}", stderr(&o));
}

#[test]
fn audit_subcommand_fails_a_tampered_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(code(&pefim(&["run", s(&scenario("messaging")), "--out", s(&out)])), 0);
    let ledgers = out.join("ledgers.json");
    // Relabel the broker's first pseudonym event as a true user identity.
    let text = fs::read_to_string(&ledgers).unwrap();
    let sb_start = text.find("\"role\": \"SB\"").unwrap();
    let at = sb_start + text[sb_start..].find("\"kind\": \"PSEUDONYM\"").unwrap();
    let tampered = format!("{}\"kind\": \"USER_IDENTITY\"{}", &text[..at], &text[at + "\"kind\": \"PSEUDONYM\"".len()..]);
    fs::write(&ledgers, tampered).unwrap();
    let o = pefim(&["audit", s(&out)]);
    assert_eq!(code(&o), 1);
    let report = stdout(&o);
    assert!(report.contains("SB x USER_IDENTITY: expected PSEUDONYM_ONLY, observed SEEN  VIOLATION"), "{report}");
    assert!(report.lines().last().unwrap().starts_with("RESULT status=FAIL"));
}

#[test]
fn consent_grant_list_revoke() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state");
    let st = s(&state);

    let o = pefim(&["consent", "list", "--state-dir", st]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().count(), 1, "header only: {}", stdout(&o));

    let sc = scenario("linking");
    let o = pefim(&["consent", "grant", "--state-dir", st, "--scenario", s(&sc), "--principal", "alice", "--sp", "library.example"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = pefim(&[
        "consent", "grant", "--state-dir", st, "--scenario", s(&sc), "--principal", "alice", "--link", "library.example", "bikeshare.example",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = pefim(&["consent", "list", "--state-dir", st]);
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 3, "{table}");
    assert!(table.contains("LINK(library.example,bikeshare.example)"), "{table}");

    let o = pefim(&["consent", "revoke", "--state-dir", st, "--record", "2"]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).starts_with("LinkIrrevocable"), "{}", stderr(&o));
    let o = pefim(&["consent", "revoke", "--state-dir", st, "--record", "1"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&pefim(&["consent", "list", "--state-dir", st])).contains("revoked"));
    let o = pefim(&["consent", "revoke", "--state-dir", st, "--record", "42"]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).starts_with("UnknownRecord"), "{}", stderr(&o));
}

#[test]
fn cli_grant_then_run_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state");
    let fed = scenario("federation");
    let src = format!(
        "name = \"after-grant\"\nfederation = {:?}\nseed = 5\n\n[[principal]]\nid = \"dana\"\nhome_idp = \"idp.southbank.example\"\npassword = \"pw-dana\"\nemail = \"dana@southbank.example\"\nclient_addr = \"203.0.113.77\"\nattributes = {{ givenName = \"Dana Whitfield\", studentNumber = \"SB-2020-31337\" }}\n\n[[step]]\nkind = \"websso\"\nprincipal = \"dana\"\nsp = \"cafeteria.example\"\nexpect = \"ok\"\n",
        s(&fed)
    );
    let path = dir.path().join("after.toml");
    fs::write(&path, src).unwrap();

    let o = pefim(&["run", s(&path), "--state-dir", s(&state)]);
    assert_eq!(code(&o), 1, "no consent yet: {}", stdout(&o));
    assert!(stdout(&o).contains("observed=ConsentMissing"));

    let o = pefim(&["consent", "grant", "--state-dir", s(&state), "--scenario", s(&path), "--principal", "dana", "--sp", "bikeshare.example"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = pefim(&["run", s(&path), "--state-dir", s(&state)]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
}
