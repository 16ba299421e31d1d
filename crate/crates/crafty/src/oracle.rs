//! Prefix-replay check: a recovered image must equal the initial state plus
//! some prefix of the committed transactions in timestamp order.
//!
//! The committed list lives outside the modeled NVM (metadata the harness
//! records at each commit point), so the check is independent of the log
//! encodings and of recovery itself: it replays write sets, never bodies.
//!
//! The recovery frontier sharpens the acceptance condition: commits with a
//! timestamp below it are *guaranteed* durable, so only prefixes at least
//! that long count as passing.

use std::collections::HashMap;

use crate::config::REGION_BASE;
use crate::world::CommittedTxn;

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub pass: bool,
    /// Shortest acceptable prefix length that matched, if any did.
    pub matched_prefix: Option<usize>,
    /// Commits below the frontier; any matching prefix must cover them.
    pub required_prefix: usize,
    pub detail: String,
}

/// `recovered` and `initial` are full region images; only the first
/// `data_words` words participate. `committed` is the run's commit record
/// in trace order, which is timestamp order by construction.
pub fn check_prefix(
    recovered: &[u64],
    initial: &[u64],
    data_words: usize,
    committed: &[CommittedTxn],
    frontier: u64,
) -> OracleReport {
    debug_assert!(committed.windows(2).all(|w| w[0].ts < w[1].ts));
    let required = committed.iter().take_while(|t| t.ts < frontier).count();

    // Words no transaction ever wrote must still hold their initial values,
    // regardless of prefix length.
    let mut written: HashMap<usize, u64> = HashMap::new();
    for txn in committed {
        for &(addr, _) in &txn.writes {
            written.insert(word_index(addr), initial[word_index(addr)]);
        }
    }
    for w in 0..data_words {
        if recovered[w] != initial[w] && !written.contains_key(&w) {
            return OracleReport {
                pass: false,
                matched_prefix: None,
                required_prefix: required,
                detail: format!(
                    "word {w} was never written but differs: {} vs initial {}",
                    recovered[w], initial[w]
                ),
            };
        }
    }

    // March m upward, tracking how many written words disagree with the
    // recovered image; a zero count means the recovered state is exactly
    // "initial plus the first m commits".
    let mut state = written; // addr index -> value after prefix m
    let mut diff = state.iter().filter(|&(&w, &v)| recovered[w] != v).count();
    let mut best: Option<usize> = None;
    let mut short_matches = 0usize;
    if diff == 0 {
        if required == 0 {
            best = Some(0);
        } else {
            short_matches += 1;
        }
    }
    for (m, txn) in committed.iter().enumerate() {
        for &(addr, value) in &txn.writes {
            let w = word_index(addr);
            let cur = state.get_mut(&w).expect("written set covers all writes");
            let was_eq = *cur == recovered[w];
            *cur = value;
            match (was_eq, *cur == recovered[w]) {
                (true, false) => diff += 1,
                (false, true) => diff -= 1,
                _ => {}
            }
        }
        if diff == 0 {
            if m + 1 >= required {
                best = Some(m + 1);
                break;
            }
            short_matches += 1;
        }
    }

    match best {
        Some(m) => OracleReport {
            pass: true,
            matched_prefix: Some(m),
            required_prefix: required,
            detail: format!("prefix {m} of {} commits", committed.len()),
        },
        None => OracleReport {
            pass: false,
            matched_prefix: None,
            required_prefix: required,
            detail: if short_matches > 0 {
                format!(
                    "only prefixes shorter than the {required} durable commits match \
                     (frontier {frontier})"
                )
            } else {
                format!("no prefix of {} commits matches", committed.len())
            },
        },
    }
}

fn word_index(addr: u64) -> usize {
    ((addr - REGION_BASE) / 8) as usize
}
