//! Privacy-enhanced federated identity management.
//!
//! A brokered federation in which service providers are pseudonymous to
//! identity providers, principals are pseudonymous to service providers and
//! attribute statements are encrypted end to end past the broker. Every actor
//! runs as a single-threaded state machine on a deterministic message bus and
//! records what it could observe in an append-only ledger; the [`audit`]
//! module checks the privacy requirements against those ledgers.
//!
//! Module map:
//!
//! * [`federation`]: entity metadata, SP proxy groups and the registry.
//! * [`idmap`]: targeted identifier derivation and issuer mapping tables.
//! * [`crypto`]: static keys, one-time certificates and payload encryption.
//! * [`observe`]: observation ledgers.
//! * [`message`]: the canonical wire format.
//! * [`actors`]: WebSSO and WS-Trust state machines for every role.
//! * [`messaging`]: targeted mail addresses and SP-to-SP linking.
//! * [`consent`]: the consent store kept by the broker.
//! * [`wstrust`]: token request and security token types.
//! * [`audit`]: exposure matrix and requirement checks.
//! * [`sim`]: the discrete-event bus, clock and scheduler.
//! * [`scenario`]: scenario files, the runner and output directories.

pub mod actors;
pub mod audit;
pub mod consent;
pub mod crypto;
pub mod error;
pub mod federation;
pub mod idmap;
pub mod message;
pub mod messaging;
pub mod observe;
pub mod scenario;
pub mod sim;
pub mod wstrust;

pub use error::FlowError;

/// Simulated time in seconds since the start of a run.
pub type SimTime = u64;

/// Attribute statement content: attribute name to value.
pub type Attributes = std::collections::BTreeMap<String, String>;
