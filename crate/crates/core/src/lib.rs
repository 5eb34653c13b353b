//! Multi-version transactional record store with a serial-safety-net commit
//! certifier, an SSI baseline, an offline serializability oracle and a
//! microbenchmark harness.

pub mod arena;
pub mod bench;
pub mod cli;
pub mod engine;
pub mod error;
pub mod kernel;
pub mod mvstore;
pub mod oracle;
pub mod schedulers;
pub mod ssn;

pub use engine::{CommitInfo, CommitPath, Engine, EngineConfig, ReadResult, Transaction, TxnOptions, WriteOutcome};
pub use error::{AbortReason, Error, Result};
pub use schedulers::{Certifier, Scheme};
