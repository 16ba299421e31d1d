//! One deterministic execution: a world plus a logical thread per slot,
//! advanced one instrumented step at a time by scheduler choices.
//!
//! A step is the unit of everything: scheduling, crash injection (a crash
//! falls between steps, never inside one), and enumeration (cloning a `Sim`
//! forks the execution). Within a step the engine may perform several memory
//! events; that granularity is deliberate, since an emulated hardware
//! transaction is atomic anyway and the persist-order-sensitive windows all
//! span step boundaries.

use std::collections::VecDeque;

use rand::Rng;

use crate::baselines::{self, BaselineCtx};
use crate::body::BodySpec;
use crate::config::{Config, EngineKind};
use crate::engine::{self, ThreadCtx};
use crate::world::World;

#[derive(Debug, Clone)]
pub enum Slot {
    Engine(Box<ThreadCtx>),
    Baseline(Box<BaselineCtx>),
}

impl Slot {
    fn done(&self) -> bool {
        match self {
            Slot::Engine(c) => c.done(),
            Slot::Baseline(c) => c.done(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sim {
    pub world: World,
    pub slots: Vec<Slot>,
    pub steps: u64,
}

impl Sim {
    pub fn new(cfg: Config, kind: EngineKind, seed: u64, queues: Vec<VecDeque<BodySpec>>) -> Sim {
        let threads = queues.len();
        let world = World::new(cfg.clone(), threads, seed);
        let slots = queues
            .into_iter()
            .enumerate()
            .map(|(t, q)| match kind {
                EngineKind::Crafty | EngineKind::CraftyNoRedo | EngineKind::CraftyNoValidate => {
                    Slot::Engine(Box::new(ThreadCtx::new(t, kind, &cfg, q)))
                }
                _ => Slot::Baseline(Box::new(BaselineCtx::new(t, kind, &cfg, q))),
            })
            .collect();
        Sim { world, slots, steps: 0 }
    }

    pub fn threads(&self) -> usize {
        self.slots.len()
    }

    pub fn done(&self) -> bool {
        self.slots.iter().all(|s| s.done())
    }

    pub fn enabled(&self, t: usize) -> bool {
        match &self.slots[t] {
            Slot::Engine(c) => !c.done() && engine::enabled(&self.world, c),
            Slot::Baseline(c) => !c.done() && baselines::enabled(&self.world, c),
        }
    }

    pub fn enabled_threads(&self) -> Vec<usize> {
        (0..self.threads()).filter(|&t| self.enabled(t)).collect()
    }

    pub fn step(&mut self, t: usize) {
        debug_assert!(self.enabled(t), "stepping a disabled thread");
        let idle: Vec<bool> = self
            .slots
            .iter()
            .map(|s| match s {
                Slot::Engine(c) => c.resting(),
                Slot::Baseline(c) => c.done(),
            })
            .collect();
        match &mut self.slots[t] {
            Slot::Engine(c) => engine::step(&mut self.world, c, &idle),
            Slot::Baseline(c) => baselines::step(&mut self.world, c),
        }
        self.steps += 1;
    }

    /// Random-mode driver: uniform choice among enabled threads, with
    /// background eviction injected per `cfg.evict_prob`. Returns false if
    /// `max_steps` ran out first.
    pub fn run_random<R: Rng>(&mut self, rng: &mut R, max_steps: u64) -> bool {
        while !self.done() {
            if self.steps >= max_steps {
                return false;
            }
            random_step(self, rng);
        }
        true
    }
}

/// One random-mode step; returns the chosen thread. Every random driver
/// (full runs, schedule replay, the fuzzer's passes) funnels through here so
/// a given rng stream always produces the same choice-and-eviction sequence.
pub fn random_step<R: Rng>(sim: &mut Sim, rng: &mut R) -> usize {
    let choices = sim.enabled_threads();
    assert!(!choices.is_empty(), "scheduler deadlock: nothing enabled");
    let t = choices[rng.gen_range(0..choices.len())];
    sim.step(t);
    let p = sim.world.cfg.evict_prob;
    if p > 0.0 && rng.gen_bool(p) {
        sim.world.mem.background_evict(rng);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::Transfer;
    use crate::config::REGION_BASE;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn addr(i: u64) -> u64 {
        REGION_BASE + i * 8
    }

    fn cfg() -> Config {
        Config { data_words: 64, log_capacity: 16, ..Config::default() }
    }

    fn one_transfer() -> VecDeque<BodySpec> {
        vec![BodySpec::Transfers(vec![Transfer { from: addr(0), to: addr(1), amount: 1 }])]
            .into()
    }

    #[test]
    fn two_threads_run_to_completion_under_random_choices() {
        let mut sim =
            Sim::new(cfg(), EngineKind::Crafty, 5, vec![one_transfer(), one_transfer()]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sim.run_random(&mut rng, 10_000));
        assert!(sim.done());
        assert_eq!(sim.world.stats.committed_txns, 2);
        assert_eq!(sim.world.mem.read_word(addr(1)).unwrap(), 2);
    }

    #[test]
    fn same_seed_reproduces_the_same_history() {
        let run = |seed| {
            let mut sim =
                Sim::new(cfg(), EngineKind::Crafty, 9, vec![one_transfer(), one_transfer()]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sim.run_random(&mut rng, 10_000);
            (sim.steps, sim.world.mem.volatile_words().to_vec(), sim.world.clock)
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4).0, 0);
    }

    #[test]
    fn baseline_slots_drive_their_own_state_machine() {
        let mut sim = Sim::new(cfg(), EngineKind::UndoPerWrite, 2, vec![one_transfer()]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sim.run_random(&mut rng, 1_000));
        assert_eq!(sim.world.stats.committed_txns, 1);
    }
}
