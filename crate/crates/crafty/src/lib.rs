//! Persistent transactions over an emulated hardware-transactional-memory
//! (HTM) and an emulated NVM with explicit persist ordering.
//!
//! The main engine makes transactions durable without write-set tracking in
//! software: each transaction runs inside a hardware transaction that builds
//! an undo log and then rolls its own writes back before committing, so the
//! commit publishes log entries but leaves data untouched (the log phase).
//! A second hardware transaction re-applies the buffered writes (the redo
//! phase); if another thread committed a write-back in between, a validate
//! phase re-executes the body and compares it against the logged entries
//! instead of re-running the log phase. Repeated aborts fall back to a
//! single global lock that chunks the body into bounded groups of writes.
//!
//! Everything runs under a deterministic cooperative scheduler: logical
//! threads advance one instrumented step at a time, a crash can be injected
//! between any two steps, and the resulting NVM snapshot is fed through
//! recovery and checked against a prefix-replay oracle.
//!
//! Module map:
//! - [`mem`]: emulated NVM with volatile/persisted views and flush/drain.
//! - [`htm`]: emulated HTM with lazy conflict detection and abort injection.
//! - [`undo_log`]: 16-byte log entry encoding with wraparound parity.
//! - [`engine`]: the log/redo/validate state machine and the lock fallback.
//! - [`baselines`]: undo-per-write, buffered-redo, and HTM-only engines.
//! - [`recovery`]: sequence scan, timestamp-closure rollback, roll-forward.
//! - [`sched`]: deterministic scheduler, schedule enumeration, crash points.
//! - [`oracle`]: prefix-replay check used by the fuzzer and tests.
//! - [`harness`]: bank and B+ tree workloads, crash fuzzer, CSV reports.

pub mod baselines;
pub mod body;
pub mod config;
pub mod engine;
pub mod harness;
pub mod htm;
pub mod mem;
pub mod oracle;
pub mod recovery;
pub mod sched;
pub mod sim;
pub mod undo_log;
pub mod world;

pub use config::{Config, Contention, EngineKind, WorkloadKind};
pub use sched::{ExecutionTrace, Schedule};
pub use sim::Sim;
