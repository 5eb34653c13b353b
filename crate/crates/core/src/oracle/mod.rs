//! Offline serializability oracle and deterministic schedule drivers.

pub mod capture;
pub mod enumerate;
pub mod graph;
pub mod script;
pub mod trace;

pub use enumerate::{enumerate_interleavings, EnumConfig, EnumSummary, History};
pub use graph::{build_graph, DependencyGraph, Edge, EdgeKind, Report, Violations};
pub use script::{replay_scripted, replay_with, Outcome, Replay, ReplayConfig, ScheduleScript};
pub use trace::{parse_trace, read_trace, write_trace, EventKind, TraceEvent};
