//! Engine, memory, and workload configuration.

use std::fmt;

/// Which engine executes the workload's transactions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EngineKind {
    /// Full engine: log phase, redo phase, validate phase, lock fallback.
    Crafty,
    /// Skips the redo phase; every write-back goes through validate.
    CraftyNoRedo,
    /// Skips the validate phase; a failed redo retries the log phase.
    CraftyNoValidate,
    /// Baseline: persist one undo entry per write, write in place.
    UndoPerWrite,
    /// Baseline: buffer writes, persist a redo log once, then write in place.
    RedoBuffered,
    /// Baseline: one hardware transaction per body, no persistence at all.
    HtmOnly,
}

impl EngineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EngineKind::Crafty => "crafty",
            EngineKind::CraftyNoRedo => "crafty-noredo",
            EngineKind::CraftyNoValidate => "crafty-novalidate",
            EngineKind::UndoPerWrite => "undo",
            EngineKind::RedoBuffered => "redo",
            EngineKind::HtmOnly => "htm-only",
        }
    }

    pub fn parse(s: &str) -> Option<EngineKind> {
        Some(match s {
            "crafty" => EngineKind::Crafty,
            "crafty-noredo" => EngineKind::CraftyNoRedo,
            "crafty-novalidate" => EngineKind::CraftyNoValidate,
            "undo" => EngineKind::UndoPerWrite,
            "redo" => EngineKind::RedoBuffered,
            "htm-only" => EngineKind::HtmOnly,
            _ => return None,
        })
    }

    /// Engines that persist data and therefore participate in recovery.
    pub fn is_persistent(self) -> bool {
        !matches!(self, EngineKind::HtmOnly)
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Account-sharing level for the bank workload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Contention {
    /// 1024 shared accounts.
    High,
    /// 4096 shared accounts.
    Medium,
    /// Per-thread account partitions; no data sharing.
    None,
}

impl Contention {
    pub fn as_str(self) -> &'static str {
        match self {
            Contention::High => "high",
            Contention::Medium => "medium",
            Contention::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Contention> {
        Some(match s {
            "high" => Contention::High,
            "medium" => Contention::Medium,
            "none" => Contention::None,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkloadKind {
    Bank,
    BTree,
}

impl WorkloadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WorkloadKind::Bank => "bank",
            WorkloadKind::BTree => "btree",
        }
    }

    pub fn parse(s: &str) -> Option<WorkloadKind> {
        Some(match s {
            "bank" => WorkloadKind::Bank,
            "btree" => WorkloadKind::BTree,
            _ => return None,
        })
    }
}

/// Byte address where the emulated persistent region starts. Chosen above
/// the control-entry sentinel address (8) so no region address collides
/// with it in the log encoding.
pub const REGION_BASE: u64 = 0x1000;

/// Words per cache line (64-byte lines, 8-byte words).
pub const LINE_WORDS: usize = 8;

/// Simulation parameters shared by every engine.
#[derive(Debug, Clone)]
pub struct Config {
    pub engine: EngineKind,
    /// Words in the data portion of the region (logs are placed after it).
    pub data_words: usize,
    /// Circular log capacity per thread, in entries.
    pub log_capacity: usize,
    /// Emulated drain latency charged per drain, in nanoseconds.
    pub drain_latency_ns: u64,
    /// Hardware-transaction capacity in distinct cache lines.
    pub capacity_lines: usize,
    /// Probability that a transaction commit spuriously aborts (abort code
    /// Zero). 0 outside fuzzing.
    pub p_zero: f64,
    /// Abort budget per transaction before the lock fallback.
    pub retries: u32,
    /// Initial writes-per-chunk under the lock fallback; halves per abort.
    pub max_writes: usize,
    /// Staleness bound, in timestamp ticks, maintained for the log horizon.
    pub max_lag: u64,
    /// Skip publishing buffered writes whose value equals current memory.
    pub skip_identical_publish: bool,
    /// Resolve crash persistence per line instead of per word.
    pub line_granular_crash: bool,
    /// Probability per scheduler step that a background eviction runs
    /// (random scheduling mode only).
    pub evict_prob: f64,
    /// Emulated cost of one instrumented memory operation.
    pub mem_op_ns: u64,
    /// Emulated cost of issuing one flush.
    pub flush_ns: u64,
    /// Emulated cost of a hardware-transaction begin or commit.
    pub htm_boundary_ns: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            engine: EngineKind::Crafty,
            data_words: 4096,
            log_capacity: 4096,
            drain_latency_ns: 300,
            capacity_lines: 512,
            p_zero: 0.0,
            retries: 5,
            max_writes: 64,
            max_lag: 1_000_000,
            skip_identical_publish: true,
            line_granular_crash: false,
            evict_prob: 0.0,
            mem_op_ns: 8,
            flush_ns: 16,
            htm_boundary_ns: 40,
        }
    }
}

impl Config {
    /// Word count of one thread's log region (two words per entry).
    pub fn log_words(&self) -> usize {
        self.log_capacity * 2
    }
}
