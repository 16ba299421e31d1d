//! Transaction bodies as data.
//!
//! The engine needs to re-run bodies: the validate phase re-executes a body
//! against current memory and compares it to the persisted log, the lock
//! fallback runs a body in bounded chunks across several steps, and the
//! per-write baselines pause after every store. A body is therefore a value
//! (not a closure) interpreted through [`TxAccess`], and every completed
//! operation is recorded so a later run can replay the prefix with the
//! original results before going live.
//!
//! Replay invariant: a body is a deterministic function of the values its
//! reads and allocations return, so serving the recorded results reproduces
//! the original control path exactly up to the recorded position.

/// Why a body run stopped early.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxStop {
    /// The underlying hardware transaction aborted.
    Abort(crate::htm::AbortCode),
    /// Re-execution diverged from the persisted log.
    ValidateFail,
    /// Write budget for this chunk exhausted; resume via replay.
    Paused,
    /// A log append hit the space or lag guard; run maintenance, retry.
    MaintenanceNeeded,
}

/// What a body sees. Implementations decide whether reads are transactional,
/// bare, or replayed, and what bookkeeping a write performs.
pub trait TxAccess {
    fn read(&mut self, addr: u64) -> Result<u64, TxStop>;
    fn write(&mut self, addr: u64, value: u64) -> Result<(), TxStop>;
    fn alloc(&mut self) -> Result<u64, TxStop>;
    fn free(&mut self, addr: u64) -> Result<(), TxStop>;
}

/// Value written by a raw op: a constant, or derived from the last read so
/// fuzzed bodies stay data-dependent (a stale read changes the write).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expr {
    Const(u64),
    /// Last read value plus a constant, wrapping.
    LastPlus(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawOp {
    Read(u64),
    Write(u64, Expr),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transfer {
    pub from: u64,
    pub to: u64,
    pub amount: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BTreeOp {
    Insert { key: u64, value: u64 },
    Lookup { key: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BodySpec {
    Raw(Vec<RawOp>),
    Transfers(Vec<Transfer>),
    BTree(BTreeOp),
}

impl BodySpec {
    /// Upper bound on stores this body can perform; sizes chunking.
    pub fn max_writes(&self) -> usize {
        match self {
            BodySpec::Raw(ops) => ops.iter().filter(|o| matches!(o, RawOp::Write(..))).count(),
            BodySpec::Transfers(ts) => ts.len() * 2,
            // worst case splits the whole path plus a new root
            BodySpec::BTree(_) => 64,
        }
    }
}

/// One completed operation, as recorded during a live run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpRecord {
    Read { addr: u64, value: u64 },
    Write { addr: u64, value: u64 },
    Alloc { addr: u64 },
    Free { addr: u64 },
}

/// Interpret a body. `Ok(())` means it ran to completion; any stop reason
/// propagates from the access layer untouched.
pub fn run_body<A: TxAccess>(spec: &BodySpec, a: &mut A) -> Result<(), TxStop> {
    match spec {
        BodySpec::Raw(ops) => {
            let mut last = 0u64;
            for op in ops {
                match op {
                    RawOp::Read(addr) => last = a.read(*addr)?,
                    RawOp::Write(addr, expr) => {
                        let v = match expr {
                            Expr::Const(c) => *c,
                            Expr::LastPlus(c) => last.wrapping_add(*c),
                        };
                        a.write(*addr, v)?;
                    }
                }
            }
            Ok(())
        }
        BodySpec::Transfers(ts) => {
            for t in ts {
                let from = a.read(t.from)?;
                a.write(t.from, from.wrapping_sub(t.amount))?;
                let to = a.read(t.to)?;
                a.write(t.to, to.wrapping_add(t.amount))?;
            }
            Ok(())
        }
        BodySpec::BTree(op) => crate::harness::btree::run_op(a, *op),
    }
}
