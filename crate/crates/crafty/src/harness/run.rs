//! Workload assembly: turn run parameters into a ready [`Sim`] plus the
//! initial-image metadata the oracle and invariant checks need.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::body::{BTreeOp, BodySpec};
use crate::config::{Config, Contention, EngineKind, WorkloadKind, LINE_WORDS};
use crate::harness::{bank, btree};
use crate::sim::Sim;
use crate::world::Allocator;

#[derive(Debug, Clone)]
pub struct RunParams {
    pub cfg: Config,
    pub kind: EngineKind,
    pub workload: WorkloadKind,
    pub contention: Contention,
    pub threads: usize,
    pub txns_per_thread: usize,
    /// That many threads (from the top) get empty queues: they sit idle
    /// from the start, which is the worst case for log staleness since
    /// only maintenance ever moves their logs forward.
    pub idle_threads: usize,
    pub seed: u64,
}

/// What the invariant checks need to know about the run's starting point.
pub struct Prepared {
    pub sim: Sim,
    pub initial_words: Vec<u64>,
    pub bank_params: Option<bank::BankParams>,
}

/// Body queues are derived from the seed alone, so the same parameters
/// rebuild the identical program for replay.
pub fn prepare(p: &RunParams) -> Prepared {
    let mut cfg = p.cfg.clone();
    let bank_params = match p.workload {
        WorkloadKind::Bank => {
            let bp = bank::BankParams::new(p.contention, p.threads);
            cfg.data_words = cfg.data_words.max(bp.data_words());
            Some(bp)
        }
        WorkloadKind::BTree => None,
    };
    let mut bodies = ChaCha8Rng::seed_from_u64(p.seed ^ 0x9e3779b97f4a7c15);
    let active = p.threads.saturating_sub(p.idle_threads).max(1);
    let queues: Vec<VecDeque<BodySpec>> = (0..p.threads)
        .map(|t| {
            (0..if t < active { p.txns_per_thread } else { 0 })
                .map(|_| match p.workload {
                    WorkloadKind::Bank => bank::gen_body(
                        &mut bodies,
                        bank_params.as_ref().unwrap(),
                        p.contention,
                        t,
                        p.threads,
                    ),
                    WorkloadKind::BTree => gen_btree_op(&mut bodies),
                })
                .collect()
        })
        .collect();
    let mut sim = Sim::new(cfg, p.kind, p.seed, queues);
    match p.workload {
        WorkloadKind::Bank => bank::setup(&mut sim.world, bank_params.as_ref().unwrap()),
        WorkloadKind::BTree => {
            // root pointer line stays out of the node pool
            let end = sim.world.data_words;
            sim.world.alloc = Allocator::new(LINE_WORDS, end, 16);
        }
    }
    let initial_words = sim.world.mem.volatile_words().to_vec();
    Prepared { sim, initial_words, bank_params }
}

/// Mixed tree traffic: mostly inserts so the structure keeps growing and
/// splitting, with enough lookups to exercise read-only commits.
fn gen_btree_op<R: Rng>(rng: &mut R) -> BodySpec {
    let key = rng.gen_range(0..btree::KEY_SPACE);
    if rng.gen_bool(0.3) {
        BodySpec::BTree(BTreeOp::Lookup { key })
    } else {
        BodySpec::BTree(BTreeOp::Insert { key, value: key.wrapping_mul(31) })
    }
}
