//! Shared simulation state: the NVM image, conflict-detection metadata,
//! the global timestamp clock, per-thread logs, and run statistics.
//!
//! A `World` is advanced by exactly one logical thread at a time under the
//! cooperative scheduler, so no internal locking exists; real parallelism
//! runs whole worlds side by side.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, LINE_WORDS, REGION_BASE};
use crate::mem::NvmImage;
use crate::undo_log::ThreadLog;

/// Volatile shared cells that participate in conflict detection but live
/// outside the persistent region (they vanish on a crash).
pub const CELL_WRITEBACK_TS: usize = 0;
pub const CELL_TS_LOWER_BOUND: usize = 1;
pub const CELL_SGL: usize = 2;

pub fn cell_last_committed(thread: usize) -> usize {
    3 + thread
}

/// One committed transaction as observed by the run, in commit-timestamp
/// order once sorted. The prefix-replay oracle replays these.
#[derive(Debug, Clone)]
pub struct CommittedTxn {
    pub thread: usize,
    pub ts: u64,
    /// Program-order writes as published.
    pub writes: Vec<(u64, u64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Via {
    Redo,
    Validate,
    Sgl,
    ReadOnly,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    RedoCheckFailed { thread: usize },
    ValidationFailed { thread: usize },
    EnteredSgl { thread: usize },
    MaintenanceRan { thread: usize, forced: usize },
    Committed { thread: usize, via: Via, ts: u64 },
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub committed: Vec<CommittedTxn>,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Stats {
    pub committed_txns: u64,
    pub htm_commits: u64,
    pub ab_conflict: u64,
    pub ab_capacity: u64,
    pub ab_explicit: u64,
    pub ab_zero: u64,
    pub via_redo: u64,
    pub via_validate: u64,
    pub via_sgl: u64,
    pub via_readonly: u64,
    pub log_appends: u64,
    pub redo_check_failures: u64,
    pub validation_failures: u64,
    pub maintenance_runs: u64,
}

/// Fixed-size block allocator over a word range of the data region.
/// Metadata is volatile; recovery never consults it.
#[derive(Debug, Clone)]
pub struct Allocator {
    pub block_words: usize,
    pub pool_start: usize,
    pub pool_end: usize,
    next: usize,
    free: Vec<u64>,
}

impl Allocator {
    pub fn empty() -> Allocator {
        Allocator { block_words: 16, pool_start: 0, pool_end: 0, next: 0, free: Vec::new() }
    }

    pub fn new(pool_start: usize, pool_end: usize, block_words: usize) -> Allocator {
        Allocator { block_words, pool_start, pool_end, next: pool_start, free: Vec::new() }
    }

    pub fn alloc(&mut self) -> Option<u64> {
        if let Some(a) = self.free.pop() {
            return Some(a);
        }
        if self.next + self.block_words <= self.pool_end {
            let addr = REGION_BASE + (self.next as u64) * 8;
            self.next += self.block_words;
            Some(addr)
        } else {
            None
        }
    }

    pub fn release(&mut self, addr: u64) {
        self.free.push(addr);
    }
}

/// Log placement inside the region; the part of the volatile log metadata
/// that recovery is allowed to know.
#[derive(Debug, Clone, Copy)]
pub struct LogRegion {
    pub start_word: usize,
    pub capacity: usize,
}

/// A crash outcome handed to recovery: resolved word values plus the log
/// geometry. No volatile state crosses this boundary.
#[derive(Debug, Clone)]
pub struct CrashImage {
    pub words: Vec<u64>,
    pub data_words: usize,
    pub logs: Vec<LogRegion>,
    /// Word index of the persisted reuse lower bound.
    pub bound_word: usize,
    pub clock_at_crash: u64,
}

#[derive(Debug, Clone)]
pub struct World {
    pub cfg: Config,
    pub mem: NvmImage,
    pub line_versions: Vec<u64>,
    pub cell_values: Vec<u64>,
    pub cell_versions: Vec<u64>,
    /// Fetch-and-increment timestamp source; reads of it escape conflict
    /// detection.
    pub clock: u64,
    pub logs: Vec<ThreadLog>,
    pub data_words: usize,
    /// Persisted twin of the lower-bound cell. Maintenance drains it before
    /// raising the cell, so after a crash it still under-approximates every
    /// reuse decision ever taken.
    pub bound_word: usize,
    pub stats: Stats,
    pub trace: Trace,
    pub emu_time: Vec<u64>,
    pub alloc: Allocator,
    /// Commit-time randomness (spurious-abort injection).
    pub rng: ChaCha8Rng,
}

impl World {
    pub fn new(cfg: Config, threads: usize, seed: u64) -> World {
        let data_words = round_up(cfg.data_words, LINE_WORDS);
        let log_words = round_up(cfg.log_words(), LINE_WORDS);
        let bound_word = data_words + threads * log_words;
        let total = bound_word + LINE_WORDS;
        let logs: Vec<ThreadLog> = (0..threads)
            .map(|t| {
                let mut log = ThreadLog::new(data_words + t * log_words, cfg.log_capacity);
                // slot 0 holds a genesis control entry (ts 0), so recovery's
                // backward walk from the first real sequence terminates at a
                // control just like every later one
                log.cursor = 1;
                log.seq_start = 1;
                log.note_seq_ts(0, 0, 0);
                log
            })
            .collect();
        let mut mem = NvmImage::new(total, threads);
        mem.configure_granularity(data_words, cfg.line_granular_crash);
        // fresh log slots hold a pattern invalid under either parity, so a
        // half-written first-lap entry can never masquerade as a real one
        for w in data_words..bound_word {
            let v = if (w - data_words) % 2 == 0 { 2 } else { 1 };
            mem.init_word(REGION_BASE + (w as u64) * 8, v).expect("in region");
        }
        for log in &logs {
            let g = crate::undo_log::encode_control(0, 0);
            mem.init_word(REGION_BASE + (log.start_word as u64) * 8, g.addr_word)
                .expect("in region");
            mem.init_word(REGION_BASE + (log.start_word as u64 + 1) * 8, g.value_word)
                .expect("in region");
        }
        World {
            mem,
            line_versions: vec![0; total / LINE_WORDS + 1],
            cell_values: vec![0; 3 + threads],
            cell_versions: vec![0; 3 + threads],
            clock: 1,
            logs,
            data_words,
            bound_word,
            stats: Stats::default(),
            trace: Trace::default(),
            emu_time: vec![0; threads],
            alloc: Allocator::empty(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15),
            cfg,
        }
    }

    pub fn threads(&self) -> usize {
        self.emu_time.len()
    }

    pub fn line_of_idx(idx: usize) -> usize {
        idx / LINE_WORDS
    }

    /// Timestamp fetch-and-increment. An escape action: never tracked by
    /// conflict detection.
    pub fn tick(&mut self) -> u64 {
        let t = self.clock;
        self.clock += 1;
        t
    }

    /// Current time without advancing it.
    pub fn now(&self) -> u64 {
        self.clock
    }

    pub fn charge(&mut self, thread: usize, ns: u64) {
        self.emu_time[thread] += ns;
    }

    /// Drain with latency accounting.
    pub fn drain(&mut self, thread: usize) {
        self.mem.drain(thread);
        self.charge(thread, self.cfg.drain_latency_ns);
    }

    pub fn drain_if_pending(&mut self, thread: usize) -> bool {
        if self.mem.drain_if_pending(thread) {
            self.charge(thread, self.cfg.drain_latency_ns);
            true
        } else {
            false
        }
    }

    pub fn flush_line(&mut self, thread: usize, addr: u64) {
        self.mem.flush_line(thread, addr).expect("flush inside region");
        self.charge(thread, self.cfg.flush_ns);
    }

    /// Instrumented non-transactional store: visible immediately and
    /// conflicting with any open transaction that touched the line.
    pub fn bare_write(&mut self, thread: usize, addr: u64, value: u64) {
        let idx = self.mem.index(addr).expect("write inside region");
        self.mem.write_idx(idx, value, self.cfg.skip_identical_publish);
        self.line_versions[World::line_of_idx(idx)] += 1;
        self.charge(thread, self.cfg.mem_op_ns);
    }

    pub fn bare_read(&mut self, thread: usize, addr: u64) -> u64 {
        self.charge(thread, self.cfg.mem_op_ns);
        self.mem.read_word(addr).expect("read inside region")
    }

    pub fn cell(&self, id: usize) -> u64 {
        self.cell_values[id]
    }

    /// Non-transactional cell store (lock release, bare-mode updates).
    pub fn set_cell(&mut self, id: usize, value: u64) {
        self.cell_values[id] = value;
        self.cell_versions[id] += 1;
    }

    /// Snapshot a crash at the current instant with seeded word resolution.
    pub fn crash<R: rand::Rng>(&self, rng: &mut R) -> CrashImage {
        CrashImage {
            words: self.mem.crash_snapshot(rng),
            data_words: self.data_words,
            logs: self.logs.iter().map(|l| LogRegion { start_word: l.start_word, capacity: l.capacity }).collect(),
            bound_word: self.bound_word,
            clock_at_crash: self.clock,
        }
    }

    /// Crash with an explicit per-item resolution mask (enumeration mode).
    pub fn crash_mask(&self, mask: u64) -> CrashImage {
        CrashImage {
            words: self.mem.crash_snapshot_mask(mask),
            data_words: self.data_words,
            logs: self.logs.iter().map(|l| LogRegion { start_word: l.start_word, capacity: l.capacity }).collect(),
            bound_word: self.bound_word,
            clock_at_crash: self.clock,
        }
    }
}

impl CrashImage {
    /// Plain text, self-describing: header, geometry, then one hex word per
    /// line. Big images are a few hundred KB; fine for reproducer files.
    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write;
        let f = std::fs::File::create(path)?;
        let mut f = std::io::BufWriter::new(f);
        writeln!(f, "crafty-image v1")?;
        writeln!(f, "data_words {}", self.data_words)?;
        writeln!(f, "bound_word {}", self.bound_word)?;
        writeln!(f, "clock {}", self.clock_at_crash)?;
        for l in &self.logs {
            writeln!(f, "log {} {}", l.start_word, l.capacity)?;
        }
        writeln!(f, "words {}", self.words.len())?;
        for w in &self.words {
            writeln!(f, "{w:x}")?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> std::io::Result<CrashImage> {
        use std::io::{Error, ErrorKind};
        let text = std::fs::read_to_string(path)?;
        let bad = |m: &str| Error::new(ErrorKind::InvalidData, m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some("crafty-image v1") {
            return Err(bad("missing header"));
        }
        let mut data_words = None;
        let mut bound_word = None;
        let mut clock = None;
        let mut logs = Vec::new();
        let mut words = Vec::new();
        let mut expect = None;
        for line in lines {
            let mut it = line.split_whitespace();
            match (expect, it.next()) {
                (Some(_), Some(tok)) => {
                    words.push(u64::from_str_radix(tok, 16).map_err(|_| bad("bad word"))?);
                }
                (None, Some("data_words")) => {
                    data_words = Some(parse_field(it.next()).ok_or_else(|| bad("data_words"))?)
                }
                (None, Some("bound_word")) => {
                    bound_word = Some(parse_field(it.next()).ok_or_else(|| bad("bound_word"))?)
                }
                (None, Some("clock")) => {
                    clock = Some(parse_field(it.next()).ok_or_else(|| bad("clock"))?)
                }
                (None, Some("log")) => {
                    let start_word = parse_field(it.next()).ok_or_else(|| bad("log"))?;
                    let capacity = parse_field(it.next()).ok_or_else(|| bad("log"))?;
                    logs.push(LogRegion { start_word, capacity });
                }
                (None, Some("words")) => {
                    expect = Some(parse_field::<usize>(it.next()).ok_or_else(|| bad("words"))?)
                }
                (None, Some(_)) => return Err(bad("unknown field")),
                (_, None) => {}
            }
        }
        if expect != Some(words.len()) {
            return Err(bad("word count mismatch"));
        }
        Ok(CrashImage {
            words,
            data_words: data_words.ok_or_else(|| bad("no data_words"))?,
            logs,
            bound_word: bound_word.ok_or_else(|| bad("no bound_word"))?,
            clock_at_crash: clock.ok_or_else(|| bad("no clock"))?,
        })
    }
}

fn parse_field<T: std::str::FromStr>(tok: Option<&str>) -> Option<T> {
    tok?.parse().ok()
}

pub fn round_up(n: usize, to: usize) -> usize {
    n.div_ceil(to) * to
}
