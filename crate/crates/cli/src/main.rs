//! `pefim`: run scenarios, manage the broker's consent store, re-audit runs.
//!
//! Exit codes: 0 pass, 1 audit or script failure (or a refused consent
//! operation), 2 configuration, usage or I/O error.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pefim::audit::run_audit;
use pefim::consent::{ConsentStore, ConsentTarget, StateLock};
use pefim::federation::{ConsentMode, EntityId};
use pefim::scenario::{load_audit_input, principal_key, run_scenario, RunError, RunOptions, Scenario};
use pefim::FlowError;

const PASS: u8 = 0;
const FAIL: u8 = 1;
const CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "pefim", version, about = "Brokered federation simulator and privacy audit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario, audit it and optionally write a transcript directory.
    Run(RunArgs),
    /// Review or change the consent store in a state directory.
    #[command(subcommand)]
    Consent(ConsentCommand),
    /// Re-run the audit over a transcript directory written by `run --out`.
    Audit {
        dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Run seed; defaults to the scenario's.
    #[arg(long)]
    seed: Option<u64>,
    /// One thread per actor instead of the deterministic scheduler.
    #[arg(long)]
    stress: bool,
    /// Transcript directory. Must not hold an earlier run.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Consent store to load before and save after the run.
    #[arg(long)]
    state_dir: Option<PathBuf>,
    /// Override the federation's minimum proxy-group size.
    #[arg(long)]
    min_group_size: Option<usize>,
}

#[derive(Subcommand)]
enum ConsentCommand {
    /// Record consent for a principal of a scenario.
    Grant {
        #[arg(long)]
        state_dir: PathBuf,
        /// Scenario naming the principal and its federation.
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        principal: String,
        /// Consent to release to this SP's proxy group.
        #[arg(long, conflicts_with = "link", required_unless_present = "link")]
        sp: Option<EntityId>,
        /// Consent to link the principal's accounts at two SPs.
        #[arg(long, num_args = 2, value_names = ["SP_A", "SP_B"])]
        link: Option<Vec<EntityId>>,
        /// out-of-band, up-front or transactional.
        #[arg(long)]
        mode: Option<ConsentMode>,
        /// Comma-separated attribute names; defaults to the group's release policy.
        #[arg(long, value_delimiter = ',')]
        attributes: Option<Vec<String>>,
    },
    /// Print every record as a table.
    List {
        #[arg(long)]
        state_dir: PathBuf,
    },
    /// Revoke a record. Link consent cannot be revoked.
    Revoke {
        #[arg(long)]
        state_dir: PathBuf,
        #[arg(long)]
        record: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    ExitCode::from(match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Consent(c) => cmd_consent(c),
        Command::Audit { dir } => cmd_audit(&dir),
    })
}

fn cmd_run(args: RunArgs) -> u8 {
    let opts = RunOptions {
        seed: args.seed,
        stress: args.stress,
        min_group_size: args.min_group_size,
        state_dir: args.state_dir,
    };
    let out = match run_scenario(&args.scenario, &opts) {
        Ok(out) => out,
        Err(e) => {
            let (code, label) = match &e {
                RunError::Config(_) | RunError::State(_) => (CONFIG, "ConfigError"),
                RunError::Sim(_) => (FAIL, "SimError"),
                RunError::Audit(_) => (FAIL, "AuditError"),
            };
            eprintln!("{label}: {e}");
            return code;
        }
    };
    if let Some(dir) = &args.out {
        if let Err(e) = out.write(dir) {
            eprintln!("ConfigError: out {}: {e}", dir.display());
            return CONFIG;
        }
    }
    for step in &out.steps {
        println!("{}", step.render());
    }
    println!("{}", out.summary_line());
    if out.passed() {
        PASS
    } else {
        FAIL
    }
}

fn cmd_audit(dir: &Path) -> u8 {
    let input = match load_audit_input(dir) {
        Ok(i) => i,
        Err(e) => {
            eprintln!("{e}");
            return CONFIG;
        }
    };
    match run_audit(&input) {
        Ok(report) => {
            print!("{}", report.render());
            if report.passed() {
                PASS
            } else {
                FAIL
            }
        }
        Err(e) => {
            eprintln!("AuditError: {e}");
            FAIL
        }
    }
}

fn with_store(dir: &Path, f: impl FnOnce(&mut ConsentStore) -> Result<bool, u8>) -> u8 {
    let _lock = match StateLock::acquire(dir) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("ConfigError: state-dir {}: {e}", dir.display());
            return CONFIG;
        }
    };
    let mut store = match ConsentStore::load(dir) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("ConfigError: state-dir {}: {e}", dir.display());
            return CONFIG;
        }
    };
    match f(&mut store) {
        Ok(true) => match store.save(dir) {
            Ok(()) => PASS,
            Err(e) => {
                eprintln!("ConfigError: state-dir {}: {e}", dir.display());
                CONFIG
            }
        },
        Ok(false) => PASS,
        Err(code) => code,
    }
}

fn refused(e: impl Into<FlowError> + std::fmt::Display + Clone) -> u8 {
    let flow: FlowError = e.clone().into();
    eprintln!("{}: {e}", flow.code());
    FAIL
}

fn cmd_consent(cmd: ConsentCommand) -> u8 {
    match cmd {
        ConsentCommand::Grant {
            state_dir,
            scenario,
            principal,
            sp,
            link,
            mode,
            attributes,
        } => {
            let loaded = Scenario::load(&scenario).and_then(|s| {
                let fed = s.build(None)?;
                Ok((s, fed))
            });
            let (scenario, fed) = match loaded {
                Ok(v) => v,
                Err(e) => {
                    eprintln!("ConfigError: {e}");
                    return CONFIG;
                }
            };
            let Some(p) = scenario.principal(&principal) else {
                eprintln!("ConfigError: principal: unknown principal {principal:?}");
                return CONFIG;
            };
            let key = principal_key(&fed, p);
            let target = match (sp, link) {
                (Some(sp), _) => match fed.registry.lookup_proxy(&sp) {
                    Ok(proxy) => ConsentTarget::Proxy { proxy_id: proxy.clone() },
                    Err(e) => {
                        eprintln!("ConfigError: sp: {e}");
                        return CONFIG;
                    }
                },
                (None, Some(pair)) => ConsentTarget::Link {
                    sp_a: pair[0].clone(),
                    sp_b: pair[1].clone(),
                },
                (None, None) => unreachable!("clap requires --sp or --link"),
            };
            let attributes: BTreeSet<String> = match (attributes, &target) {
                (Some(a), _) => a.into_iter().collect(),
                (None, ConsentTarget::Proxy { proxy_id }) => {
                    fed.registry.release_policy(proxy_id).cloned().unwrap_or_default()
                }
                (None, ConsentTarget::Link { .. }) => BTreeSet::new(),
            };
            let mode = mode.unwrap_or(fed.registry.policy.consent_mode_default);
            with_store(&state_dir, |store| {
                match store.grant_consent(&fed.registry, key, target, attributes, mode, 0) {
                    Ok(r) => {
                        println!("granted record {} target={} mode={}", r.id, r.target, r.mode.label());
                        Ok(true)
                    }
                    Err(e) => Err(refused(e)),
                }
            })
        }
        ConsentCommand::List { state_dir } => with_store(&state_dir, |store| {
            println!(
                "{:<4} {:<16} {:<48} {:<13} {:<8} ATTRIBUTES",
                "ID", "PRINCIPAL", "TARGET", "MODE", "STATUS"
            );
            for r in store.records() {
                let status = if r.revoked_at.is_some() {
                    "revoked"
                } else if r.consumed_at.is_some() {
                    "consumed"
                } else {
                    "active"
                };
                let attrs: Vec<&str> = r.attributes.iter().map(String::as_str).collect();
                println!(
                    "{:<4} {:<16} {:<48} {:<13} {:<8} {}",
                    r.id,
                    &r.principal_key.as_str()[..16],
                    r.target.to_string(),
                    r.mode.label(),
                    status,
                    attrs.join(",")
                );
            }
            Ok(false)
        }),
        ConsentCommand::Revoke { state_dir, record } => with_store(&state_dir, |store| {
            match store.revoke_consent(record, 0) {
                Ok(r) => {
                    println!("revoked record {} target={}", r.id, r.target);
                    Ok(true)
                }
                Err(e) => Err(refused(e)),
            }
        }),
    }
}
