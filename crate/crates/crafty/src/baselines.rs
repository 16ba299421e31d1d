//! Reference engines the main design is measured against.
//!
//! UndoPerWrite: the classic eager undo log under a global mutex. Every
//! store persists its undo entry (flush + drain) before hitting data in
//! place; commit flushes the written data lines, drains, then persists a
//! closing control entry with another drain. Write-heavy bodies pay one
//! drain per store plus two.
//!
//! RedoBuffered: writes buffer in DRAM while the body runs under the
//! mutex, then one log append batch with the new values persists with a
//! single drain (the durability point), and only afterwards the data
//! writes happen in place. Recovery rolls the newest logged transaction
//! forward instead of back.
//!
//! HtmOnly: plain hardware transactions with a lock fallback and no
//! persistence at all; the upper bound on throughput and the lower bound
//! on crash safety.

use std::collections::{BTreeMap, VecDeque};

use crate::body::{run_body, BodySpec, OpRecord, TxAccess, TxStop};
use crate::config::{Config, EngineKind, LINE_WORDS};
use crate::htm::TxnExec;
use crate::undo_log::{encode_control, encode_data};
use crate::world::{CommittedTxn, World, CELL_SGL};

const LINE_BYTES: u64 = (LINE_WORDS * 8) as u64;

fn line_addr(addr: u64) -> u64 {
    addr & !(LINE_BYTES - 1)
}

#[derive(Debug, Clone)]
pub enum BPhase {
    Idle,
    UndoRun,
    UndoFlushData,
    UndoCommit,
    RedoLog,
    RedoApply,
    HtmCommit { txn: TxnExec },
    HtmLock,
    Done,
}

#[derive(Debug, Clone)]
pub struct BaselineCtx {
    pub id: usize,
    pub kind: EngineKind,
    pub queue: VecDeque<BodySpec>,
    pub body: Option<BodySpec>,
    pub phase: BPhase,
    pub retries_left: u32,
    pub trace: Vec<OpRecord>,
    pub replayed: usize,
    pub ts: u64,
    /// Program-order new values of the current transaction.
    pub writes: Vec<(u64, u64)>,
    pub written_lines: Vec<u64>,
    pub allocs: Vec<u64>,
    pub frees: Vec<u64>,
}

impl BaselineCtx {
    pub fn new(id: usize, kind: EngineKind, cfg: &Config, queue: VecDeque<BodySpec>) -> BaselineCtx {
        debug_assert!(matches!(
            kind,
            EngineKind::UndoPerWrite | EngineKind::RedoBuffered | EngineKind::HtmOnly
        ));
        BaselineCtx {
            id,
            kind,
            queue,
            body: None,
            phase: BPhase::Idle,
            retries_left: cfg.retries,
            trace: Vec::new(),
            replayed: 0,
            ts: 0,
            writes: Vec::new(),
            written_lines: Vec::new(),
            allocs: Vec::new(),
            frees: Vec::new(),
        }
    }

    pub fn done(&self) -> bool {
        matches!(self.phase, BPhase::Done)
            || (matches!(self.phase, BPhase::Idle) && self.body.is_none() && self.queue.is_empty())
    }
}

pub fn enabled(w: &World, ctx: &BaselineCtx) -> bool {
    if ctx.done() {
        return false;
    }
    match ctx.phase {
        BPhase::Idle | BPhase::HtmLock => w.cell(CELL_SGL) == 0,
        _ => true,
    }
}

pub fn step(w: &mut World, ctx: &mut BaselineCtx) {
    let phase = std::mem::replace(&mut ctx.phase, BPhase::Idle);
    match phase {
        BPhase::Idle => start(w, ctx),
        BPhase::UndoRun => undo_run(w, ctx),
        BPhase::UndoFlushData => undo_flush_data(w, ctx),
        BPhase::UndoCommit => undo_commit(w, ctx),
        BPhase::RedoLog => redo_log(w, ctx),
        BPhase::RedoApply => redo_apply(w, ctx),
        BPhase::HtmCommit { txn } => htm_commit(w, ctx, txn),
        BPhase::HtmLock => htm_lock(w, ctx),
        BPhase::Done => ctx.phase = BPhase::Done,
    }
}

fn finish(w: &mut World, ctx: &mut BaselineCtx, ts: u64) {
    w.stats.committed_txns += 1;
    if !ctx.writes.is_empty() {
        let writes = std::mem::take(&mut ctx.writes);
        w.trace.committed.push(CommittedTxn { thread: ctx.id, ts, writes });
    }
    for a in ctx.frees.drain(..) {
        w.alloc.release(a);
    }
    ctx.allocs.clear();
    ctx.writes.clear();
    ctx.written_lines.clear();
    ctx.trace.clear();
    ctx.replayed = 0;
    ctx.body = None;
    ctx.retries_left = w.cfg.retries;
    ctx.phase = BPhase::Idle;
}

fn start(w: &mut World, ctx: &mut BaselineCtx) {
    if ctx.body.is_none() {
        ctx.body = ctx.queue.pop_front();
        ctx.retries_left = w.cfg.retries;
    }
    let Some(body) = ctx.body.clone() else {
        ctx.phase = BPhase::Done;
        return;
    };
    match ctx.kind {
        EngineKind::UndoPerWrite => {
            w.set_cell(CELL_SGL, ctx.id as u64 + 1);
            w.charge(ctx.id, w.cfg.mem_op_ns);
            ctx.ts = w.tick();
            let log = &mut w.logs[ctx.id];
            log.seq_start = log.cursor;
            ctx.trace.clear();
            ctx.replayed = 0;
            ctx.phase = BPhase::UndoRun;
        }
        EngineKind::RedoBuffered => {
            w.set_cell(CELL_SGL, ctx.id as u64 + 1);
            w.charge(ctx.id, w.cfg.mem_op_ns);
            ctx.ts = w.tick();
            let mut cx = BufferCx {
                w,
                id: ctx.id,
                pending: BTreeMap::new(),
                writes: &mut ctx.writes,
                allocs: &mut ctx.allocs,
                frees: &mut ctx.frees,
            };
            run_body(&body, &mut cx).expect("buffered run cannot stop");
            ctx.phase = BPhase::RedoLog;
        }
        EngineKind::HtmOnly => {
            let mut txn = w.txn_begin(ctx.id);
            let _ = w.txn_read_cell(&mut txn, CELL_SGL);
            let mut cx = HtmCx {
                w,
                txn: &mut txn,
                writes: &mut ctx.writes,
                allocs: &mut ctx.allocs,
                frees: &mut ctx.frees,
            };
            match run_body(&body, &mut cx) {
                Ok(()) => ctx.phase = BPhase::HtmCommit { txn },
                Err(TxStop::Abort(code)) => {
                    w.count_abort(code);
                    drop(txn);
                    htm_retry(w, ctx);
                }
                Err(e) => unreachable!("buffered htm run cannot stop with {e:?}"),
            }
        }
        other => unreachable!("{other:?} is not a baseline"),
    }
}

fn htm_retry(w: &mut World, ctx: &mut BaselineCtx) {
    for a in ctx.allocs.drain(..) {
        w.alloc.release(a);
    }
    ctx.writes.clear();
    ctx.frees.clear();
    if ctx.retries_left == 0 {
        ctx.phase = BPhase::HtmLock;
    } else {
        ctx.retries_left -= 1;
        ctx.phase = BPhase::Idle;
    }
}

// ---- undo-per-write ----

/// Replay-resumable single-write access: persist the undo entry, then
/// store in place, then pause so every inter-write point is a real
/// scheduling (and crash) point.
struct UndoCx<'a> {
    w: &'a mut World,
    id: usize,
    trace: &'a mut Vec<OpRecord>,
    replay_len: usize,
    pos: usize,
    wrote: bool,
    writes: &'a mut Vec<(u64, u64)>,
    written_lines: &'a mut Vec<u64>,
    allocs: &'a mut Vec<u64>,
    frees: &'a mut Vec<u64>,
}

impl UndoCx<'_> {
    fn replay(&mut self) -> Option<OpRecord> {
        if self.pos < self.replay_len {
            let r = self.trace[self.pos];
            self.pos += 1;
            Some(r)
        } else {
            None
        }
    }
}

impl TxAccess for UndoCx<'_> {
    fn read(&mut self, addr: u64) -> Result<u64, TxStop> {
        if let Some(r) = self.replay() {
            match r {
                OpRecord::Read { addr: a, value } if a == addr => return Ok(value),
                other => panic!("replay diverged: read {addr:#x} vs {other:?}"),
            }
        }
        let v = self.w.bare_read(self.id, addr);
        self.trace.push(OpRecord::Read { addr, value: v });
        self.pos += 1;
        Ok(v)
    }

    fn write(&mut self, addr: u64, value: u64) -> Result<(), TxStop> {
        if let Some(r) = self.replay() {
            match r {
                OpRecord::Write { addr: a, value: v } if a == addr && v == value => return Ok(()),
                other => panic!("replay diverged: write {addr:#x} vs {other:?}"),
            }
        }
        if self.wrote {
            return Err(TxStop::Paused);
        }
        let old = self.w.bare_read(self.id, addr);
        let idx = self.w.logs[self.id].cursor;
        let parity = self.w.logs[self.id].parity(idx);
        let e = crate::engine::bare_append(self.w, self.id, self.id, encode_data(addr, old, parity));
        let word = self.w.logs[self.id].entry_word(e);
        self.w.flush_line(self.id, line_addr(self.w.mem.addr_of(word)));
        self.w.drain(self.id);
        self.w.bare_write(self.id, addr, value);
        let dl = line_addr(addr);
        if !self.written_lines.contains(&dl) {
            self.written_lines.push(dl);
        }
        self.writes.push((addr, value));
        self.trace.push(OpRecord::Write { addr, value });
        self.pos += 1;
        self.wrote = true;
        Ok(())
    }

    fn alloc(&mut self) -> Result<u64, TxStop> {
        if let Some(r) = self.replay() {
            match r {
                OpRecord::Alloc { addr } => return Ok(addr),
                other => panic!("replay diverged: alloc vs {other:?}"),
            }
        }
        let a = self.w.alloc.alloc().expect("allocator pool exhausted");
        self.allocs.push(a);
        self.trace.push(OpRecord::Alloc { addr: a });
        self.pos += 1;
        Ok(a)
    }

    fn free(&mut self, addr: u64) -> Result<(), TxStop> {
        if let Some(r) = self.replay() {
            match r {
                OpRecord::Free { addr: a } if a == addr => return Ok(()),
                other => panic!("replay diverged: free vs {other:?}"),
            }
        }
        self.frees.push(addr);
        self.trace.push(OpRecord::Free { addr });
        self.pos += 1;
        Ok(())
    }
}

fn undo_run(w: &mut World, ctx: &mut BaselineCtx) {
    let body = ctx.body.clone().expect("run without a body");
    let mut cx = UndoCx {
        w,
        id: ctx.id,
        trace: &mut ctx.trace,
        replay_len: ctx.replayed,
        pos: 0,
        wrote: false,
        writes: &mut ctx.writes,
        written_lines: &mut ctx.written_lines,
        allocs: &mut ctx.allocs,
        frees: &mut ctx.frees,
    };
    match run_body(&body, &mut cx) {
        Ok(()) => {
            ctx.replayed = ctx.trace.len();
            if ctx.writes.is_empty() {
                w.set_cell(CELL_SGL, 0);
                finish(w, ctx, ctx.ts);
            } else {
                ctx.phase = BPhase::UndoFlushData;
            }
        }
        Err(TxStop::Paused) => {
            ctx.replayed = ctx.trace.len();
            ctx.phase = BPhase::UndoRun;
        }
        Err(e) => unreachable!("bare undo run cannot stop with {e:?}"),
    }
}

fn undo_flush_data(w: &mut World, ctx: &mut BaselineCtx) {
    for line in std::mem::take(&mut ctx.written_lines) {
        w.flush_line(ctx.id, line);
    }
    w.drain(ctx.id);
    ctx.phase = BPhase::UndoCommit;
}

fn undo_commit(w: &mut World, ctx: &mut BaselineCtx) {
    let idx = w.logs[ctx.id].cursor;
    let parity = w.logs[ctx.id].parity(idx);
    let e = crate::engine::bare_append(w, ctx.id, ctx.id, encode_control(ctx.ts, parity));
    let first = w.logs[ctx.id].seq_start;
    w.logs[ctx.id].note_seq_ts(first, e, ctx.ts);
    let word = w.logs[ctx.id].entry_word(e);
    w.flush_line(ctx.id, line_addr(w.mem.addr_of(word)));
    w.drain(ctx.id);
    // this drain is the durability point
    let ts = ctx.ts;
    w.logs[ctx.id].last_committed_ts = ts;
    w.set_cell(CELL_SGL, 0);
    finish(w, ctx, ts);
}

// ---- redo-buffered ----

/// All-volatile body run: reads come from memory through the write buffer,
/// writes never leave it.
struct BufferCx<'a> {
    w: &'a mut World,
    id: usize,
    pending: BTreeMap<u64, u64>,
    writes: &'a mut Vec<(u64, u64)>,
    allocs: &'a mut Vec<u64>,
    frees: &'a mut Vec<u64>,
}

impl TxAccess for BufferCx<'_> {
    fn read(&mut self, addr: u64) -> Result<u64, TxStop> {
        Ok(match self.pending.get(&addr) {
            Some(v) => *v,
            None => self.w.bare_read(self.id, addr),
        })
    }

    fn write(&mut self, addr: u64, value: u64) -> Result<(), TxStop> {
        self.pending.insert(addr, value);
        self.writes.push((addr, value));
        Ok(())
    }

    fn alloc(&mut self) -> Result<u64, TxStop> {
        let a = self.w.alloc.alloc().expect("allocator pool exhausted");
        self.allocs.push(a);
        Ok(a)
    }

    fn free(&mut self, addr: u64) -> Result<(), TxStop> {
        self.frees.push(addr);
        Ok(())
    }
}

fn redo_log(w: &mut World, ctx: &mut BaselineCtx) {
    if ctx.writes.is_empty() {
        w.set_cell(CELL_SGL, 0);
        finish(w, ctx, ctx.ts);
        return;
    }
    {
        let log = &mut w.logs[ctx.id];
        log.seq_start = log.cursor;
    }
    let mut lines = Vec::new();
    for (a, v) in ctx.writes.clone() {
        let idx = w.logs[ctx.id].cursor;
        let parity = w.logs[ctx.id].parity(idx);
        // entry value is the NEW value: recovery replays forward
        let e = crate::engine::bare_append(w, ctx.id, ctx.id, encode_data(a, v, parity));
        let word = w.logs[ctx.id].entry_word(e);
        let l = line_addr(w.mem.addr_of(word));
        if !lines.contains(&l) {
            lines.push(l);
        }
    }
    let idx = w.logs[ctx.id].cursor;
    let parity = w.logs[ctx.id].parity(idx);
    let e = crate::engine::bare_append(w, ctx.id, ctx.id, encode_control(ctx.ts, parity));
    let first = w.logs[ctx.id].seq_start;
    w.logs[ctx.id].note_seq_ts(first, e, ctx.ts);
    let word = w.logs[ctx.id].entry_word(e);
    let l = line_addr(w.mem.addr_of(word));
    if !lines.contains(&l) {
        lines.push(l);
    }
    for line in lines {
        w.flush_line(ctx.id, line);
    }
    w.drain(ctx.id);
    // durable from here on: record the commit before the data moves
    let ts = ctx.ts;
    w.logs[ctx.id].last_committed_ts = ts;
    w.stats.committed_txns += 1;
    let writes = ctx.writes.clone();
    w.trace.committed.push(CommittedTxn { thread: ctx.id, ts, writes });
    ctx.phase = BPhase::RedoApply;
}

fn redo_apply(w: &mut World, ctx: &mut BaselineCtx) {
    let mut lines = Vec::new();
    for (a, v) in std::mem::take(&mut ctx.writes) {
        w.bare_write(ctx.id, a, v);
        let l = line_addr(a);
        if !lines.contains(&l) {
            lines.push(l);
        }
    }
    // flushed but not drained; the next transaction's log drain (same
    // thread) persists these before the log can wrap over the entries
    for line in lines {
        w.flush_line(ctx.id, line);
    }
    for a in ctx.frees.drain(..) {
        w.alloc.release(a);
    }
    ctx.allocs.clear();
    ctx.body = None;
    ctx.retries_left = w.cfg.retries;
    w.set_cell(CELL_SGL, 0);
    ctx.phase = BPhase::Idle;
}

// ---- htm-only ----

struct HtmCx<'a> {
    w: &'a mut World,
    txn: &'a mut TxnExec,
    writes: &'a mut Vec<(u64, u64)>,
    allocs: &'a mut Vec<u64>,
    frees: &'a mut Vec<u64>,
}

impl TxAccess for HtmCx<'_> {
    fn read(&mut self, addr: u64) -> Result<u64, TxStop> {
        self.w.txn_read(self.txn, addr).map_err(TxStop::Abort)
    }

    fn write(&mut self, addr: u64, value: u64) -> Result<(), TxStop> {
        self.w.txn_write(self.txn, addr, value).map_err(TxStop::Abort)?;
        self.writes.push((addr, value));
        Ok(())
    }

    fn alloc(&mut self) -> Result<u64, TxStop> {
        let a = self.w.alloc.alloc().expect("allocator pool exhausted");
        self.allocs.push(a);
        Ok(a)
    }

    fn free(&mut self, addr: u64) -> Result<(), TxStop> {
        self.frees.push(addr);
        Ok(())
    }
}

fn htm_commit(w: &mut World, ctx: &mut BaselineCtx, txn: TxnExec) {
    match w.txn_validate(&txn) {
        Ok(()) => {
            let ts = w.tick();
            w.txn_publish(txn);
            finish(w, ctx, ts);
        }
        Err(code) => {
            w.count_abort(code);
            htm_retry(w, ctx);
        }
    }
}

fn htm_lock(w: &mut World, ctx: &mut BaselineCtx) {
    let body = ctx.body.clone().expect("lock run without a body");
    w.set_cell(CELL_SGL, ctx.id as u64 + 1);
    w.charge(ctx.id, w.cfg.mem_op_ns);
    let ts = w.tick();
    let mut cx = BareCx { w, id: ctx.id, writes: &mut ctx.writes, allocs: &mut ctx.allocs, frees: &mut ctx.frees };
    run_body(&body, &mut cx).expect("bare run cannot stop");
    w.set_cell(CELL_SGL, 0);
    finish(w, ctx, ts);
}

struct BareCx<'a> {
    w: &'a mut World,
    id: usize,
    writes: &'a mut Vec<(u64, u64)>,
    allocs: &'a mut Vec<u64>,
    frees: &'a mut Vec<u64>,
}

impl TxAccess for BareCx<'_> {
    fn read(&mut self, addr: u64) -> Result<u64, TxStop> {
        Ok(self.w.bare_read(self.id, addr))
    }

    fn write(&mut self, addr: u64, value: u64) -> Result<(), TxStop> {
        self.w.bare_write(self.id, addr, value);
        self.writes.push((addr, value));
        Ok(())
    }

    fn alloc(&mut self) -> Result<u64, TxStop> {
        let a = self.w.alloc.alloc().expect("allocator pool exhausted");
        self.allocs.push(a);
        Ok(a)
    }

    fn free(&mut self, addr: u64) -> Result<(), TxStop> {
        self.frees.push(addr);
        Ok(())
    }
}
