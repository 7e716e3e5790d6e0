//! Two-layer committee blockchain: a proof-of-work access layer feeds
//! validator identities into a rotating committee that runs quorum
//! agreement over a replicated shared state.
//!
//! The crate has three faces:
//!
//! * protocol types and state machines ([`chain`], [`acl`], [`csl`], [`bft`]),
//! * the incentive and committee-sizing analysis ([`agents`], [`analysis`]),
//!   which is usable standalone,
//! * a deterministic, seedable discrete-event session driver ([`sim`]).
//!
//! Parameter sweeps and session batteries are data-parallel; the `parallel`
//! feature (on by default) backs them with rayon, and disabling it falls
//! back to sequential execution with identical results.

pub mod acl;
pub mod agents;
pub mod analysis;
pub mod bft;
pub mod chain;
pub mod csl;
pub mod exec;
pub mod sim;

pub use chain::{ComBlock, Digest, Identity, PowBlock, Transaction, TxBlock};
pub use csl::SharedState;
pub use sim::{run_session, SessionConfig, SessionMetrics};
