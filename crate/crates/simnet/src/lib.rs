//! Deterministic in-process simulation of a multi-relay mail network.
//!
//! Nodes run the same relay logic as the SMTP proxy, wired through an
//! in-process transport under a virtual clock, so weeks of window
//! semantics execute in milliseconds and every run is reproducible:
//! the trace is a pure function of (scenario, seed).
//!
//! A scenario is a line-oriented script: declarations build the
//! topology (nodes, users, contracts, MX preference lists, smarthosts,
//! recipient policies), timed events drive it (sends, complaints,
//! attacks, link partitions), and `expect` lines assert on the final
//! trace and metrics. Attack events model known evasion attempts and
//! carry their own built-in outcome checks.

pub mod attacks;
pub mod engine;
pub mod scenario;

pub use engine::{run_scenario, RunResult};
pub use scenario::{Scenario, SimError};
