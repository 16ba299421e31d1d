//! Schedules over a [`Sim`]: seeded random interleavings, explicit scripted
//! step lists, crash injection at a chosen step, and exhaustive depth-first
//! enumeration for small programs.
//!
//! A schedule serializes to text, one directive per line, so any failing
//! fuzz case replays exactly:
//!
//! ```text
//! # reproducer
//! seed 7
//! step 0
//! step 1
//! crash 12
//! crash-seed 99
//! ```
//!
//! `step` lines script thread choices; with none present the run draws
//! uniform choices from `seed`. `crash N` halts after N steps and takes a
//! snapshot, resolved either by `mask M` (explicit per-item persistence) or
//! by a fresh rng from `crash-seed`.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::sim::Sim;
use crate::world::CrashImage;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Schedule {
    pub seed: u64,
    pub steps: Vec<usize>,
    pub crash_step: Option<u64>,
    pub crash_mask: Option<u64>,
    pub crash_seed: Option<u64>,
}

impl Schedule {
    pub fn random(seed: u64) -> Schedule {
        Schedule { seed, ..Schedule::default() }
    }

    pub fn scripted(steps: Vec<usize>) -> Schedule {
        Schedule { steps, ..Schedule::default() }
    }

    pub fn parse(text: &str) -> Result<Schedule, SchedError> {
        let mut s = Schedule::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || SchedError::Parse(format!("line {}: {line:?}", n + 1));
            let (key, val) = line.split_once(' ').ok_or_else(bad)?;
            let val: u64 = val.trim().parse().map_err(|_| bad())?;
            match key {
                "seed" => s.seed = val,
                "step" => s.steps.push(val as usize),
                "crash" => s.crash_step = Some(val),
                "mask" => s.crash_mask = Some(val),
                "crash-seed" => s.crash_seed = Some(val),
                _ => return Err(bad()),
            }
        }
        Ok(s)
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed {}", self.seed)?;
        for &t in &self.steps {
            writeln!(f, "step {t}")?;
        }
        if let Some(c) = self.crash_step {
            writeln!(f, "crash {c}")?;
        }
        if let Some(m) = self.crash_mask {
            writeln!(f, "mask {m}")?;
        }
        if let Some(cs) = self.crash_seed {
            writeln!(f, "crash-seed {cs}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchedError {
    /// The scripted step list ended before the program completed.
    Exhausted { at: u64 },
    /// A scripted choice named a thread that is not enabled at that point.
    NotEnabled { at: u64, thread: usize },
    /// Enumeration would exceed the schedule budget.
    BudgetExceeded { budget: u64 },
    /// Some branch ran past the step cap without completing, so the
    /// enumeration cannot claim full coverage.
    DepthExceeded { max_steps: u64 },
    Parse(String),
}

impl fmt::Display for SchedError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchedError::Exhausted { at } => write!(f, "step list exhausted at step {at}"),
            SchedError::NotEnabled { at, thread } => {
                write!(f, "thread {thread} not enabled at step {at}")
            }
            SchedError::BudgetExceeded { budget } => {
                write!(f, "enumeration budget {budget} exceeded")
            }
            SchedError::DepthExceeded { max_steps } => {
                write!(f, "a schedule exceeded {max_steps} steps without completing")
            }
            SchedError::Parse(msg) => write!(f, "bad schedule: {msg}"),
        }
    }
}

impl std::error::Error for SchedError {}

#[derive(Debug)]
pub struct ExecutionTrace {
    /// Thread chosen at each step actually taken.
    pub taken: Vec<usize>,
    /// Present when the schedule asked for a crash; the run halts there.
    pub crash: Option<CrashImage>,
}

/// Drive `sim` per `schedule`. Scripted steps run first; once they are
/// exhausted the seeded rng takes over only if the schedule carried no
/// explicit steps at all (a part-way script is an error, per the
/// reproducibility contract).
pub fn run_scheduled(sim: &mut Sim, schedule: &Schedule) -> Result<ExecutionTrace, SchedError> {
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let scripted = !schedule.steps.is_empty();
    let mut taken = Vec::new();
    loop {
        if schedule.crash_step == Some(taken.len() as u64) {
            let image = match (schedule.crash_mask, schedule.crash_seed) {
                (Some(m), _) => sim.world.crash_mask(m),
                (None, Some(cs)) => sim.world.crash(&mut ChaCha8Rng::seed_from_u64(cs)),
                (None, None) => sim.world.crash(&mut rng),
            };
            return Ok(ExecutionTrace { taken, crash: Some(image) });
        }
        if sim.done() {
            return Ok(ExecutionTrace { taken, crash: None });
        }
        if scripted {
            let Some(&t) = schedule.steps.get(taken.len()) else {
                return Err(SchedError::Exhausted { at: taken.len() as u64 });
            };
            if t >= sim.threads() || !sim.enabled(t) {
                return Err(SchedError::NotEnabled { at: taken.len() as u64, thread: t });
            }
            sim.step(t);
            taken.push(t);
        } else {
            taken.push(crate::sim::random_step(sim, &mut rng));
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ExploreStats {
    /// Complete interleavings enumerated (leaves of the choice tree).
    pub schedules: u64,
    /// Steps taken across all branches; every one is a crash point.
    pub edges: u64,
}

/// Depth-first enumeration of every thread choice at every step, calling
/// `visit` after each step with the forked state and the choice prefix.
/// `budget` caps complete interleavings; `max_steps` caps schedule length,
/// catching programs whose conflict retries can ping-pong forever under an
/// adversarial schedule. Eviction stays off here: it would square the
/// branching factor without changing what persists, since the crash-mask
/// enumeration at each edge already covers every writeback outcome.
pub fn explore<F>(
    base: &Sim,
    budget: u64,
    max_steps: u64,
    visit: &mut F,
) -> Result<ExploreStats, SchedError>
where
    F: FnMut(&Sim, &[usize]),
{
    let mut stats = ExploreStats::default();
    let mut prefix = Vec::new();
    dfs(base, budget, max_steps, &mut stats, &mut prefix, visit)?;
    Ok(stats)
}

fn dfs<F>(
    sim: &Sim,
    budget: u64,
    max_steps: u64,
    stats: &mut ExploreStats,
    prefix: &mut Vec<usize>,
    visit: &mut F,
) -> Result<(), SchedError>
where
    F: FnMut(&Sim, &[usize]),
{
    if sim.done() {
        stats.schedules += 1;
        if stats.schedules > budget {
            return Err(SchedError::BudgetExceeded { budget });
        }
        return Ok(());
    }
    if prefix.len() as u64 >= max_steps {
        return Err(SchedError::DepthExceeded { max_steps });
    }
    let choices = sim.enabled_threads();
    assert!(!choices.is_empty(), "scheduler deadlock: nothing enabled");
    for t in choices {
        let mut next = sim.clone();
        next.step(t);
        stats.edges += 1;
        prefix.push(t);
        visit(&next, prefix);
        dfs(&next, budget, max_steps, stats, prefix, visit)?;
        prefix.pop();
    }
    Ok(())
}
