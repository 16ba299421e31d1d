//! Undo-log entry encoding and per-thread log metadata.
//!
//! Each entry is two 8-byte words stored in the emulated NVM. Because the
//! log is circular and recovery cannot trust any volatile cursor, both
//! words steal bit 0 for a wraparound parity that flips on every lap; the
//! displaced value bit moves into bit 1 of the address word. An entry
//! decodes only under the parity of the lap that wrote it, so a slot whose
//! overwrite has not yet persisted is recognized instead of misread.
//!
//! Address word layout:
//! - bits 63..3: address >> 3 for data entries, or the control sentinel 1.
//! - bit 2: control flag (0 = data, 1 = control).
//! - bit 1: bit 0 of the stored value (old value or timestamp).
//! - bit 0: wraparound parity.
//!
//! Value word layout: the stored value with bit 0 replaced by the parity.
//!
//! A control entry carries a timestamp and doubles as the sequence
//! terminator; a commit overwrites the timestamp in place, so logged and
//! committed sequences share one slot and recovery does not need to tell
//! them apart.

use thiserror::Error;

/// Sentinel in bits 63..3 of a control entry's address word. The region
/// base sits above byte address 8, so no data address produces it.
pub const CONTROL_SENTINEL: u64 = 1;

const CONTROL_FLAG: u64 = 1 << 2;

/// Two raw words as stored in the emulated NVM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawEntry {
    pub addr_word: u64,
    pub value_word: u64,
}

/// Result of decoding a slot under an expected parity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoded {
    /// `(address, old_value)` of one logged write.
    Data(u64, u64),
    /// Sequence terminator carrying a timestamp.
    Control(u64),
    /// Parity mismatch, torn words, or a never-written slot.
    NotPersisted,
}

/// Encode a data entry for an 8-aligned address under a lap parity.
pub fn encode_data(addr: u64, old_value: u64, parity: u64) -> RawEntry {
    debug_assert_eq!(addr & 7, 0, "log entries cover aligned words");
    debug_assert!(parity <= 1);
    RawEntry {
        addr_word: (addr & !7) | ((old_value & 1) << 1) | parity,
        value_word: (old_value & !1) | parity,
    }
}

/// Encode a control entry carrying a timestamp under a lap parity.
pub fn encode_control(ts: u64, parity: u64) -> RawEntry {
    debug_assert!(parity <= 1);
    RawEntry {
        addr_word: (CONTROL_SENTINEL << 3) | CONTROL_FLAG | ((ts & 1) << 1) | parity,
        value_word: (ts & !1) | parity,
    }
}

/// Decode one slot. Both words must carry `expected_parity` in bit 0;
/// otherwise the slot is torn or stale and reports `NotPersisted`.
pub fn decode(raw: RawEntry, expected_parity: u64) -> Decoded {
    debug_assert!(expected_parity <= 1);
    if raw.addr_word & 1 != expected_parity || raw.value_word & 1 != expected_parity {
        return Decoded::NotPersisted;
    }
    let value = (raw.value_word & !1) | ((raw.addr_word >> 1) & 1);
    if raw.addr_word & CONTROL_FLAG != 0 {
        if raw.addr_word >> 3 != CONTROL_SENTINEL {
            // Unreachable from the encoder; treat as garbage.
            return Decoded::NotPersisted;
        }
        return Decoded::Control(value);
    }
    let field = raw.addr_word >> 3;
    if field == 0 {
        // A never-written slot is all zeros and must not parse as a write
        // to address 0 on even laps.
        return Decoded::NotPersisted;
    }
    Decoded::Data(field << 3, value)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogError {
    /// Appending would reuse slots whose entries are still newer than the
    /// global horizon, or the horizon itself is too stale.
    #[error("log maintenance required before appending")]
    MaintenanceRequired,
    /// A committed-timestamp update targeted a slot that is not the
    /// sequence's control entry.
    #[error("slot {0} is not the pending control entry")]
    SlotMismatch(u64),
}

/// Volatile bookkeeping for one thread's circular log. Entry words live in
/// the emulated NVM region; everything here is lost on a crash and recovery
/// must re-derive it from the entries alone.
#[derive(Debug, Clone)]
pub struct ThreadLog {
    /// First word of the log region inside the NVM image.
    pub start_word: usize,
    /// Capacity in entries. Must hold at least two maximal sequences so a
    /// full lap always persists the previous lap's tail before reuse.
    pub capacity: usize,
    /// Monotone count of entries ever appended. Slot = cursor % capacity,
    /// parity = (cursor / capacity) & 1, so the parity flips exactly once
    /// per lap, at slot 0.
    pub cursor: u64,
    /// Cursor value at which the currently running transaction's sequence
    /// begins.
    pub seq_start: u64,
    /// Timestamp of this thread's last committed transaction.
    pub last_committed_ts: u64,
    /// Newest control timestamp written into each half of the log; the
    /// content about to be destroyed when the cursor re-enters that half.
    pub half_max_ts: [u64; 2],
    /// Oldest control timestamp per half, mirroring `half_max_ts`.
    pub half_min_ts: [u64; 2],
    /// Oldest control timestamp in the half most recently reused, updated
    /// at each half crossing (reported; the overwrite-safety check uses the
    /// newest, which bounds every entry being destroyed).
    pub earliest_ts_to_be_overwritten: u64,
}

impl ThreadLog {
    pub fn new(start_word: usize, capacity: usize) -> ThreadLog {
        assert!(capacity >= 4 && capacity % 2 == 0);
        ThreadLog {
            start_word,
            capacity,
            cursor: 0,
            seq_start: 0,
            last_committed_ts: 0,
            half_max_ts: [0; 2],
            half_min_ts: [u64::MAX; 2],
            earliest_ts_to_be_overwritten: 0,
        }
    }

    /// Record a sequence's control timestamp for overwrite-safety tracking,
    /// in every half the sequence's entries occupy. A sequence that
    /// straddles the boundary must pin both halves: recovery needs all of
    /// its entries until the bound passes it, not just the control's half.
    /// Called again when a commit rewrites the timestamp in place; the max
    /// only grows, which keeps the guard conservative.
    pub fn note_seq_ts(&mut self, first: u64, control_index: u64, ts: u64) {
        debug_assert!(first <= control_index);
        // a sequence fits in half the log, so its endpoints reach every
        // half it touches
        for h in [self.half_of(first), self.half_of(control_index)] {
            self.half_max_ts[h] = self.half_max_ts[h].max(ts);
            self.half_min_ts[h] = self.half_min_ts[h].min(ts);
        }
    }

    pub fn slot(&self, entry_index: u64) -> usize {
        (entry_index % self.capacity as u64) as usize
    }

    pub fn parity(&self, entry_index: u64) -> u64 {
        (entry_index / self.capacity as u64) & 1
    }

    /// Word index (into the NVM image) of an entry's address word.
    pub fn entry_word(&self, entry_index: u64) -> usize {
        self.start_word + self.slot(entry_index) * 2
    }

    /// Which half of the log a slot falls in.
    pub fn half_of(&self, entry_index: u64) -> usize {
        if self.slot(entry_index) < self.capacity / 2 {
            0
        } else {
            1
        }
    }

    /// True when appending at `entry_index` enters a half whose previous
    /// lap content has not been checked yet: entry 0 of each half, on any
    /// lap after the half first filled.
    pub fn crosses_half(&self, entry_index: u64) -> bool {
        let s = self.slot(entry_index);
        (s == 0 || s == self.capacity / 2) && entry_index >= self.capacity as u64
    }
}
