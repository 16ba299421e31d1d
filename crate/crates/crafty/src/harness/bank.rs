//! Bank workload: transfers between fixed accounts.
//!
//! The invariant is conservation: balances are u64 and amounts move with
//! wrapping arithmetic, so the sum of all accounts mod 2^64 never changes.
//! Contention picks the account pool: 1024 shared accounts, 4096 shared
//! accounts, or per-thread disjoint slices. Accounts sit one per cache line
//! so transfers conflict only when they actually share an account.

use rand::Rng;

use crate::body::{BodySpec, Transfer};
use crate::config::{Contention, LINE_WORDS, REGION_BASE};
use crate::world::World;

pub const INIT_BALANCE: u64 = 1_000;

#[derive(Debug, Clone, Copy)]
pub struct BankParams {
    pub accounts: usize,
    pub transfers_per_txn: usize,
}

impl BankParams {
    pub fn new(contention: Contention, threads: usize) -> Self {
        let accounts = match contention {
            Contention::High => 1024,
            Contention::Medium => 4096,
            Contention::None => threads * 256,
        };
        BankParams { accounts, transfers_per_txn: 5 }
    }

    /// Smallest data region that holds every line-aligned account.
    pub fn data_words(&self) -> usize {
        self.accounts * LINE_WORDS
    }
}

pub fn account_addr(i: usize) -> u64 {
    REGION_BASE + (i as u64) * (LINE_WORDS as u64) * 8
}

/// Seed every balance in both the volatile and persisted views, as if the
/// region had been initialized and synced before the run.
pub fn setup(world: &mut World, p: &BankParams) {
    for i in 0..p.accounts {
        world.mem.init_word(account_addr(i), INIT_BALANCE).unwrap();
    }
}

/// One transaction: `transfers_per_txn` transfers, ten writes at the
/// default. Under no contention every thread stays inside its own slice.
pub fn gen_body<R: Rng>(
    rng: &mut R,
    p: &BankParams,
    contention: Contention,
    thread: usize,
    threads: usize,
) -> BodySpec {
    let (lo, hi) = match contention {
        Contention::None => {
            let per = p.accounts / threads;
            (thread * per, (thread + 1) * per)
        }
        _ => (0, p.accounts),
    };
    let mut ts = Vec::with_capacity(p.transfers_per_txn);
    for _ in 0..p.transfers_per_txn {
        let from = rng.gen_range(lo..hi);
        let mut to = rng.gen_range(lo..hi);
        while to == from {
            to = rng.gen_range(lo..hi);
        }
        ts.push(Transfer {
            from: account_addr(from),
            to: account_addr(to),
            amount: rng.gen_range(1..100),
        });
    }
    BodySpec::Transfers(ts)
}

/// Wrapping sum of all balances in an arbitrary word image.
pub fn total(read: &dyn Fn(u64) -> u64, p: &BankParams) -> u64 {
    (0..p.accounts).fold(0u64, |s, i| s.wrapping_add(read(account_addr(i))))
}

pub fn initial_total(p: &BankParams) -> u64 {
    (p.accounts as u64).wrapping_mul(INIT_BALANCE)
}
