//! Emulated hardware transactional memory.
//!
//! Transactions buffer writes and record, per touched cache line (or
//! volatile cell), the conflict version observed at first access. Commit
//! validates every recorded version, optionally injects a spurious abort,
//! then publishes the buffer and bumps the written lines' versions. Reads
//! outside any transaction see committed state only, and instrumented
//! non-transactional writes bump line versions too, so isolation is strong.
//!
//! Transaction begin and commit carry drain semantics for the owner's
//! pending flushes, like a fencing instruction; the drain is skipped (and
//! not charged) when nothing is pending. Timestamp reads are escape
//! actions and never enter the read set.

use std::collections::{BTreeMap, HashMap};

use crate::world::World;

/// Why a transaction aborted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AbortCode {
    /// Commit-time validation saw a line or cell move.
    Conflict,
    /// The footprint exceeded the line capacity.
    Capacity,
    /// The body aborted itself; the tag says which check failed.
    Explicit(u8),
    /// Spurious abort (interrupt, fault); injected with probability
    /// `p_zero` at commit.
    Zero,
}

/// Explicit-abort tags.
pub const TAG_SGL_HELD: u8 = 1;
pub const TAG_REDO_STALE: u8 = 2;
pub const TAG_VALIDATION: u8 = 3;
pub const TAG_MAINTENANCE: u8 = 4;

/// Conflict-detection unit: a region cache line or a volatile cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LineKey {
    Mem(usize),
    Cell(usize),
}

/// An open emulated transaction. Dropping it without committing discards
/// the buffer, which is exactly an abort's effect on memory.
#[derive(Debug, Clone)]
pub struct TxnExec {
    pub owner: usize,
    /// Version observed at first access of each line or cell.
    observed: HashMap<LineKey, u64>,
    /// Buffered stores by word index; ordered for deterministic publish.
    wbuf: BTreeMap<usize, u64>,
    /// Buffered cell stores.
    cell_buf: BTreeMap<usize, u64>,
}

impl TxnExec {
    pub fn buffered_len(&self) -> usize {
        self.wbuf.len()
    }

    pub fn buffered(&self, idx: usize) -> Option<u64> {
        self.wbuf.get(&idx).copied()
    }

    pub fn footprint_lines(&self) -> usize {
        self.observed.len()
    }
}

impl World {
    /// Open a transaction. The begin barrier drains the owner's pending
    /// flushes, so everything the thread flushed earlier is persisted
    /// before any transactional access runs.
    pub fn txn_begin(&mut self, owner: usize) -> TxnExec {
        self.drain_if_pending(owner);
        self.charge(owner, self.cfg.htm_boundary_ns);
        TxnExec { owner, observed: HashMap::new(), wbuf: BTreeMap::new(), cell_buf: BTreeMap::new() }
    }

    fn observe(&mut self, txn: &mut TxnExec, key: LineKey) -> Result<(), AbortCode> {
        let version = match key {
            LineKey::Mem(line) => self.line_versions[line],
            LineKey::Cell(id) => self.cell_versions[id],
        };
        txn.observed.entry(key).or_insert(version);
        if txn.observed.len() > self.cfg.capacity_lines {
            return Err(AbortCode::Capacity);
        }
        Ok(())
    }

    /// Transactional load: own buffered value if present, else committed
    /// state, with the line recorded for commit-time validation.
    pub fn txn_read(&mut self, txn: &mut TxnExec, addr: u64) -> Result<u64, AbortCode> {
        let idx = self.mem.index(addr).expect("transactional read inside region");
        self.observe(txn, LineKey::Mem(World::line_of_idx(idx)))?;
        self.charge(txn.owner, self.cfg.mem_op_ns);
        if let Some(v) = txn.wbuf.get(&idx) {
            return Ok(*v);
        }
        Ok(self.mem.read_idx(idx))
    }

    /// Transactional store: buffered until commit.
    pub fn txn_write(&mut self, txn: &mut TxnExec, addr: u64, value: u64) -> Result<(), AbortCode> {
        let idx = self.mem.index(addr).expect("transactional write inside region");
        self.observe(txn, LineKey::Mem(World::line_of_idx(idx)))?;
        self.charge(txn.owner, self.cfg.mem_op_ns);
        txn.wbuf.insert(idx, value);
        Ok(())
    }

    pub fn txn_read_cell(&mut self, txn: &mut TxnExec, id: usize) -> Result<u64, AbortCode> {
        self.observe(txn, LineKey::Cell(id))?;
        if let Some(v) = txn.cell_buf.get(&id) {
            return Ok(*v);
        }
        Ok(self.cell_values[id])
    }

    pub fn txn_write_cell(&mut self, txn: &mut TxnExec, id: usize, value: u64) -> Result<(), AbortCode> {
        self.observe(txn, LineKey::Cell(id))?;
        txn.cell_buf.insert(id, value);
        Ok(())
    }

    /// Commit-time validation: every observed version must be unchanged,
    /// and the spurious-abort coin must not fire. Does not publish.
    pub fn txn_validate(&mut self, txn: &TxnExec) -> Result<(), AbortCode> {
        for (key, seen) in &txn.observed {
            let current = match key {
                LineKey::Mem(line) => self.line_versions[*line],
                LineKey::Cell(id) => self.cell_versions[*id],
            };
            if current != *seen {
                return Err(AbortCode::Conflict);
            }
        }
        if self.cfg.p_zero > 0.0 {
            use rand::Rng;
            if self.rng.gen_bool(self.cfg.p_zero.min(1.0)) {
                return Err(AbortCode::Zero);
            }
        }
        Ok(())
    }

    /// Publish a validated transaction: apply the buffer, bump written
    /// lines, count the commit, and run the commit barrier's drain.
    pub fn txn_publish(&mut self, txn: TxnExec) {
        let owner = txn.owner;
        let mut bumped: Option<usize> = None;
        for (idx, value) in txn.wbuf {
            self.mem.write_idx(idx, value, self.cfg.skip_identical_publish);
            let line = World::line_of_idx(idx);
            if bumped != Some(line) {
                self.line_versions[line] += 1;
                bumped = Some(line);
            }
        }
        for (id, value) in txn.cell_buf {
            self.cell_values[id] = value;
            self.cell_versions[id] += 1;
        }
        self.stats.htm_commits += 1;
        self.charge(owner, self.cfg.htm_boundary_ns);
        self.drain_if_pending(owner);
    }

    /// Validate and publish in one call. Returns the abort code on failure
    /// (the buffer is dropped, leaving no trace in memory).
    pub fn txn_try_commit(&mut self, txn: TxnExec) -> Result<(), AbortCode> {
        match self.txn_validate(&txn) {
            Ok(()) => {
                self.txn_publish(txn);
                Ok(())
            }
            Err(code) => {
                self.count_abort(code);
                Err(code)
            }
        }
    }

    pub fn count_abort(&mut self, code: AbortCode) {
        match code {
            AbortCode::Conflict => self.stats.ab_conflict += 1,
            AbortCode::Capacity => self.stats.ab_capacity += 1,
            AbortCode::Explicit(_) => self.stats.ab_explicit += 1,
            AbortCode::Zero => self.stats.ab_zero += 1,
        }
    }
}
