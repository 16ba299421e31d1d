//! Emulated NVM with separate volatile and persisted views.
//!
//! The volatile view is what loads observe; the persisted view is what a
//! crash falls back to. A word moves toward the persisted view through an
//! explicit flush (asynchronous write-back) followed by a drain issued by
//! the flushing thread, or through background eviction at instrumented
//! points. A crash never tears an 8-byte word. Data words resolve
//! independently per word (per line when configured); words at or past
//! `line_atomic_from` (the log region, whose stores are streamed whole
//! lines) resolve per cache line, so a 16-byte log entry never splits.
//! Words inside uncommitted speculative buffers do not exist here at all.

use rand::Rng;
use thiserror::Error;

use crate::config::{LINE_WORDS, REGION_BASE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordState {
    /// Volatile and persisted views agree.
    Clean,
    /// Written but not yet flushed; may persist only via eviction.
    Dirty,
    /// Flushed; persists at the flusher's next drain, or via eviction.
    FlushPending,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemError {
    #[error("address {0:#x} is outside the emulated region")]
    OutOfRegion(u64),
    #[error("address {0:#x} is not 8-byte aligned")]
    Misaligned(u64),
}

/// Counters for persist traffic. Flush and drain counts include no-ops so
/// baselines are charged for every barrier they issue.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PersistCounters {
    pub flushes: u64,
    pub drains: u64,
    pub words_persisted: u64,
}

/// The emulated persistent region: data followed by per-thread logs.
#[derive(Debug, Clone)]
pub struct NvmImage {
    volatile: Vec<u64>,
    persisted: Vec<u64>,
    state: Vec<WordState>,
    /// Words flushed by each thread and not yet drained.
    pending: Vec<Vec<usize>>,
    /// Sorted index of words that are not Clean, for O(dirty) eviction and
    /// crash resolution.
    dirty: std::collections::BTreeSet<usize>,
    /// Words from here on crash-resolve per line instead of per word.
    line_atomic_from: usize,
    /// Resolve data words per line too (coarser, less adversarial).
    data_line_granular: bool,
    pub counters: PersistCounters,
}

impl NvmImage {
    pub fn new(total_words: usize, threads: usize) -> NvmImage {
        NvmImage {
            volatile: vec![0; total_words],
            persisted: vec![0; total_words],
            state: vec![WordState::Clean; total_words],
            pending: vec![Vec::new(); threads],
            dirty: std::collections::BTreeSet::new(),
            line_atomic_from: total_words,
            data_line_granular: false,
            counters: PersistCounters::default(),
        }
    }

    pub fn configure_granularity(&mut self, line_atomic_from: usize, data_line_granular: bool) {
        self.line_atomic_from = line_atomic_from;
        self.data_line_granular = data_line_granular;
    }

    pub fn words(&self) -> usize {
        self.volatile.len()
    }

    pub fn index(&self, addr: u64) -> Result<usize, MemError> {
        if addr & 7 != 0 {
            return Err(MemError::Misaligned(addr));
        }
        if addr < REGION_BASE {
            return Err(MemError::OutOfRegion(addr));
        }
        let idx = ((addr - REGION_BASE) / 8) as usize;
        if idx >= self.volatile.len() {
            return Err(MemError::OutOfRegion(addr));
        }
        Ok(idx)
    }

    pub fn addr_of(&self, idx: usize) -> u64 {
        REGION_BASE + (idx as u64) * 8
    }

    pub fn read_word(&self, addr: u64) -> Result<u64, MemError> {
        Ok(self.volatile[self.index(addr)?])
    }

    pub fn read_idx(&self, idx: usize) -> u64 {
        self.volatile[idx]
    }

    pub fn persisted_idx(&self, idx: usize) -> u64 {
        self.persisted[idx]
    }

    pub fn state_idx(&self, idx: usize) -> WordState {
        self.state[idx]
    }

    /// Store to the volatile view. With `skip_identical` set, a store of
    /// the word's current value leaves its persistence state untouched, so
    /// a transaction that rolls itself back publishes nothing dirty.
    pub fn write_word(&mut self, addr: u64, value: u64, skip_identical: bool) -> Result<(), MemError> {
        let idx = self.index(addr)?;
        self.write_idx(idx, value, skip_identical);
        Ok(())
    }

    pub fn write_idx(&mut self, idx: usize, value: u64, skip_identical: bool) {
        if skip_identical && self.volatile[idx] == value {
            return;
        }
        self.volatile[idx] = value;
        if self.state[idx] == WordState::Clean {
            self.state[idx] = WordState::Dirty;
            self.dirty.insert(idx);
        } else {
            // A rewrite of a FlushPending word re-dirties it; the earlier
            // flush may still complete at a drain with the newer value.
            debug_assert!(self.dirty.contains(&idx));
        }
    }

    /// Initialize a word in both views (setup before any engine runs).
    pub fn init_word(&mut self, addr: u64, value: u64) -> Result<(), MemError> {
        let idx = self.index(addr)?;
        self.volatile[idx] = value;
        self.persisted[idx] = value;
        self.state[idx] = WordState::Clean;
        self.dirty.remove(&idx);
        Ok(())
    }

    /// Mark every Dirty word in `addr`'s line FlushPending on behalf of
    /// `thread`. Counts even when the line has nothing to flush.
    pub fn flush_line(&mut self, thread: usize, addr: u64) -> Result<(), MemError> {
        let idx = self.index(addr)?;
        self.counters.flushes += 1;
        let line_start = idx - idx % LINE_WORDS;
        for w in line_start..(line_start + LINE_WORDS).min(self.volatile.len()) {
            if self.state[w] == WordState::Dirty {
                self.state[w] = WordState::FlushPending;
            }
            if self.state[w] == WordState::FlushPending && !self.pending[thread].contains(&w) {
                self.pending[thread].push(w);
            }
        }
        Ok(())
    }

    /// Complete every flush issued by `thread`: those words persist at
    /// their current volatile value. Counts and is charged latency even
    /// when nothing is pending.
    pub fn drain(&mut self, thread: usize) {
        self.counters.drains += 1;
        self.drain_quiet(thread);
    }

    fn drain_quiet(&mut self, thread: usize) {
        let pending = std::mem::take(&mut self.pending[thread]);
        for w in pending {
            if self.state[w] != WordState::Clean {
                self.persist_word(w);
            }
        }
    }

    /// Drain only if the thread has flushes outstanding; returns whether a
    /// drain was issued. Transaction begin/commit barriers use this so a
    /// transaction with no prior flushes is not charged.
    pub fn drain_if_pending(&mut self, thread: usize) -> bool {
        if self.pending[thread].is_empty() {
            return false;
        }
        self.drain(thread);
        true
    }

    pub fn has_pending(&self, thread: usize) -> bool {
        !self.pending[thread].is_empty()
    }

    /// Words whose volatile and persisted views differ (or are mid-flush).
    pub fn dirty_words(&self) -> impl Iterator<Item = usize> + '_ {
        self.dirty.iter().copied()
    }

    fn persist_word(&mut self, idx: usize) {
        self.persisted[idx] = self.volatile[idx];
        self.state[idx] = WordState::Clean;
        self.dirty.remove(&idx);
        self.counters.words_persisted += 1;
        for p in &mut self.pending {
            p.retain(|&w| w != idx);
        }
    }

    /// Group the non-clean words into crash-atomic items: one item per
    /// word in the fine-grained data range, one per line elsewhere.
    fn items(&self) -> Vec<Vec<usize>> {
        let mut items: Vec<Vec<usize>> = Vec::new();
        let mut last_line = None;
        for &idx in &self.dirty {
            let grouped = self.data_line_granular || idx >= self.line_atomic_from;
            let line = idx / LINE_WORDS;
            if grouped && last_line == Some(line) {
                items.last_mut().expect("non-empty when last_line set").push(idx);
            } else {
                items.push(vec![idx]);
                last_line = grouped.then_some(line);
            }
        }
        items
    }

    /// Background eviction: each dirty line persists as a whole with
    /// probability 1/2 under the supplied RNG. Models the cache writing
    /// lines back on its own schedule.
    pub fn background_evict<R: Rng>(&mut self, rng: &mut R) {
        let mut line_groups: Vec<Vec<usize>> = Vec::new();
        let mut last_line = None;
        for &idx in &self.dirty {
            let line = idx / LINE_WORDS;
            if last_line == Some(line) {
                line_groups.last_mut().expect("non-empty").push(idx);
            } else {
                line_groups.push(vec![idx]);
                last_line = Some(line);
            }
        }
        for group in line_groups {
            if rng.gen_bool(0.5) {
                for idx in group {
                    self.persist_word(idx);
                }
            }
        }
    }

    /// Resolve a crash: clean words keep their (equal) views; every
    /// crash-atomic item independently lands on the persisted or volatile
    /// side, whole items only.
    pub fn crash_snapshot<R: Rng>(&self, rng: &mut R) -> Vec<u64> {
        let mut snap = self.persisted.clone();
        for item in self.items() {
            if rng.gen_bool(0.5) {
                for idx in item {
                    snap[idx] = self.volatile[idx];
                }
            }
        }
        snap
    }

    /// Crash with an explicit choice: bit i of `mask` decides the i-th
    /// crash-atomic item (1 = volatile survives). Used by exhaustive
    /// enumeration; requires at most 64 items.
    pub fn crash_snapshot_mask(&self, mask: u64) -> Vec<u64> {
        let items = self.items();
        debug_assert!(items.len() <= 64);
        let mut snap = self.persisted.clone();
        for (bit, item) in items.into_iter().enumerate() {
            if mask >> bit & 1 == 1 {
                for idx in item {
                    snap[idx] = self.volatile[idx];
                }
            }
        }
        snap
    }

    /// Number of independent persistence choices a crash right now entails.
    pub fn crash_item_count(&self) -> usize {
        self.items().len()
    }

    pub fn dirty_count(&self) -> usize {
        self.dirty.len()
    }

    pub fn volatile_words(&self) -> &[u64] {
        &self.volatile
    }

    pub fn persisted_words(&self) -> &[u64] {
        &self.persisted
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image() -> NvmImage {
        NvmImage::new(64, 2)
    }

    #[test]
    fn write_then_flush_then_drain_persists() {
        let mut m = image();
        let a = m.addr_of(3);
        m.write_word(a, 7, true).unwrap();
        assert_eq!(m.state_idx(3), WordState::Dirty);
        m.flush_line(0, a).unwrap();
        assert_eq!(m.state_idx(3), WordState::FlushPending);
        assert_eq!(m.persisted_idx(3), 0);
        m.drain(0);
        assert_eq!(m.state_idx(3), WordState::Clean);
        assert_eq!(m.persisted_idx(3), 7);
        assert_eq!(m.counters.flushes, 1);
        assert_eq!(m.counters.drains, 1);
    }

    #[test]
    fn drain_only_covers_own_flushes() {
        let mut m = image();
        let a = m.addr_of(0);
        let b = m.addr_of(8);
        m.write_word(a, 1, true).unwrap();
        m.write_word(b, 2, true).unwrap();
        m.flush_line(0, a).unwrap();
        m.flush_line(1, b).unwrap();
        m.drain(0);
        assert_eq!(m.persisted_idx(0), 1);
        assert_eq!(m.persisted_idx(8), 0, "thread 1's flush not drained");
        m.drain(1);
        assert_eq!(m.persisted_idx(8), 2);
    }

    #[test]
    fn drain_without_pending_counts_but_changes_nothing() {
        let mut m = image();
        m.drain(0);
        assert_eq!(m.counters.drains, 1);
        assert_eq!(m.counters.words_persisted, 0);
        assert!(!m.drain_if_pending(0));
        assert_eq!(m.counters.drains, 1);
    }

    #[test]
    fn flush_covers_whole_line() {
        let mut m = image();
        m.write_word(m.addr_of(8), 1, true).unwrap();
        m.write_word(m.addr_of(9), 2, true).unwrap();
        m.write_word(m.addr_of(17), 3, true).unwrap();
        m.flush_line(0, m.addr_of(9)).unwrap();
        assert_eq!(m.state_idx(8), WordState::FlushPending);
        assert_eq!(m.state_idx(9), WordState::FlushPending);
        assert_eq!(m.state_idx(17), WordState::Dirty, "different line untouched");
    }

    #[test]
    fn skip_identical_write_stays_clean() {
        let mut m = image();
        m.init_word(m.addr_of(4), 9).unwrap();
        m.write_word(m.addr_of(4), 9, true).unwrap();
        assert_eq!(m.state_idx(4), WordState::Clean);
        m.write_word(m.addr_of(4), 9, false).unwrap();
        assert_eq!(m.state_idx(4), WordState::Dirty);
    }

    #[test]
    fn rewrite_after_flush_drains_latest_value() {
        let mut m = image();
        let a = m.addr_of(5);
        m.write_word(a, 1, true).unwrap();
        m.flush_line(0, a).unwrap();
        m.write_word(a, 2, true).unwrap();
        m.drain(0);
        assert_eq!(m.persisted_idx(5), 2);
        assert_eq!(m.state_idx(5), WordState::Clean);
    }

    #[test]
    fn crash_keeps_clean_words_and_forks_dirty_ones() {
        let mut m = image();
        m.init_word(m.addr_of(1), 100).unwrap();
        m.write_word(m.addr_of(2), 55, true).unwrap();
        let mut seen_old = false;
        let mut seen_new = false;
        for seed in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let snap = m.crash_snapshot(&mut rng);
            assert_eq!(snap[1], 100);
            match snap[2] {
                0 => seen_old = true,
                55 => seen_new = true,
                other => panic!("torn word: {other}"),
            }
        }
        assert!(seen_old && seen_new, "both persistence outcomes must occur");
    }

    #[test]
    fn crash_mask_enumerates_both_outcomes() {
        let mut m = image();
        m.write_word(m.addr_of(2), 55, true).unwrap();
        assert_eq!(m.crash_snapshot_mask(0)[2], 0);
        assert_eq!(m.crash_snapshot_mask(1)[2], 55);
    }

    #[test]
    fn eviction_can_persist_unflushed_words() {
        let mut m = image();
        m.write_word(m.addr_of(6), 3, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..64 {
            m.background_evict(&mut rng);
        }
        assert_eq!(m.persisted_idx(6), 3);
        assert_eq!(m.state_idx(6), WordState::Clean);
    }

    #[test]
    fn eviction_preserves_old_value_as_crash_outcome() {
        // v1 evicted, then v2 written: a crash may now surface v1, which is
        // neither the initial nor the current volatile value of the run.
        let mut m = image();
        let a = m.addr_of(7);
        m.write_word(a, 1, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        while m.state_idx(7) != WordState::Clean {
            m.background_evict(&mut rng);
        }
        m.write_word(a, 2, true).unwrap();
        let snap = m.crash_snapshot_mask(0);
        assert_eq!(snap[7], 1);
    }

    #[test]
    fn bounds_and_alignment_errors() {
        let m = image();
        assert_eq!(m.read_word(REGION_BASE + 3), Err(MemError::Misaligned(REGION_BASE + 3)));
        assert_eq!(m.read_word(8), Err(MemError::OutOfRegion(8)));
        let past = REGION_BASE + 64 * 8;
        assert_eq!(m.read_word(past), Err(MemError::OutOfRegion(past)));
    }
}
