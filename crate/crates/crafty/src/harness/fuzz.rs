//! Crash-injection fuzzing.
//!
//! Each seed gets two passes. The first runs the workload to completion
//! under the random scheduler, measuring the step count and producing the
//! throughput report. The second replays the identical schedule (same rng
//! stream) and, at sampled step boundaries, takes a hypothetical crash
//! snapshot without disturbing the run: resolve the dirty state with a fresh
//! crash rng, recover the image, and hold it against the prefix-replay
//! oracle plus the workload invariant. Every failure carries a schedule that
//! replays it exactly.
//!
//! Seeds are independent, so with the `parallel` feature they fan out over
//! a rayon pool; otherwise they run in order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::config::WorkloadKind;
use crate::harness::report::RunReport;
use crate::harness::run::{prepare, RunParams};
use crate::harness::{bank, btree};
use crate::oracle::check_prefix;
use crate::recovery::{mode_for, recover, RecoveryMode};
use crate::sched::{SchedError, Schedule};
use crate::sim::{random_step, Sim};
use crate::world::CrashImage;

const STEP_CAP: u64 = 50_000_000;

#[derive(Debug, Clone)]
pub struct FuzzParams {
    pub run: RunParams,
    pub seeds: Vec<u64>,
    pub points_per_seed: u64,
    /// Spend half the points on boundaries that had writebacks in flight
    /// (flushed but not drained), where ordering bugs concentrate.
    pub stratified: bool,
}

#[derive(Debug, Clone)]
pub struct Failure {
    pub seed: u64,
    pub step: u64,
    pub detail: String,
    pub schedule: Schedule,
}

#[derive(Debug, Default)]
pub struct FuzzOutcome {
    pub points: u64,
    pub failures: Vec<Failure>,
    pub reports: Vec<RunReport>,
    pub max_crash_items: usize,
    /// Minimum over all points of `frontier + max_lag - crash_clock`;
    /// non-negative means no recovered state ever trailed the clock by a
    /// full staleness budget.
    pub min_frontier_slack: i128,
}

/// Fan seeds out over the rayon pool when the `parallel` feature is on.
pub fn fuzz_crashes(params: &FuzzParams) -> FuzzOutcome {
    let run_seed = |&seed: &u64| fuzz_one_seed(params, seed);
    #[cfg(feature = "parallel")]
    let per_seed: Vec<FuzzOutcome> = params.seeds.par_iter().map(run_seed).collect();
    #[cfg(not(feature = "parallel"))]
    let per_seed: Vec<FuzzOutcome> = params.seeds.iter().map(run_seed).collect();
    merge(per_seed)
}

/// Same work strictly in seed order, whatever features are on. The two
/// entry points produce identical outcomes; the bench suite compares them.
pub fn fuzz_crashes_sequential(params: &FuzzParams) -> FuzzOutcome {
    merge(params.seeds.iter().map(|&seed| fuzz_one_seed(params, seed)).collect())
}

fn merge(per_seed: Vec<FuzzOutcome>) -> FuzzOutcome {
    let mut total = FuzzOutcome { min_frontier_slack: i128::MAX, ..FuzzOutcome::default() };
    for mut o in per_seed {
        total.points += o.points;
        total.failures.append(&mut o.failures);
        total.reports.append(&mut o.reports);
        total.max_crash_items = total.max_crash_items.max(o.max_crash_items);
        total.min_frontier_slack = total.min_frontier_slack.min(o.min_frontier_slack);
    }
    total
}

fn fuzz_one_seed(params: &FuzzParams, seed: u64) -> FuzzOutcome {
    let points = params.points_per_seed;
    let rp = RunParams { seed, ..params.run.clone() };
    let mode = mode_for(rp.kind).expect("engine persists nothing; nothing to fuzz");

    // pass 1: measure the schedule and collect throughput numbers
    let mut prep = prepare(&rp);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hot: Vec<u64> = Vec::new();
    loop {
        if params.stratified && prep.sim.world.mem.crash_item_count() > 0 {
            hot.push(prep.sim.steps);
        }
        if prep.sim.done() {
            break;
        }
        assert!(prep.sim.steps < STEP_CAP, "workload did not finish");
        random_step(&mut prep.sim, &mut rng);
    }
    let total_steps = prep.sim.steps;
    let report = RunReport::collect(&rp, &prep.sim);

    // crash points: distinct step boundaries, 0..=total_steps
    let mut crash_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995_9e37_79b9);
    let boundaries = total_steps + 1;
    let chosen: Vec<u64> = if points >= boundaries {
        (0..boundaries).collect()
    } else {
        let mut v: Vec<u64> = Vec::new();
        let hot_share = (points / 2).min(hot.len() as u64) as usize;
        if hot_share > 0 {
            v.extend(
                rand::seq::index::sample(&mut crash_rng, hot.len(), hot_share)
                    .into_iter()
                    .map(|i| hot[i]),
            );
        }
        v.extend(
            rand::seq::index::sample(
                &mut crash_rng,
                boundaries as usize,
                points as usize - hot_share,
            )
            .into_iter()
            .map(|i| i as u64),
        );
        v.sort_unstable();
        v.dedup();
        v
    };

    // pass 2: identical schedule, hypothetical crash at each chosen boundary
    let mut out = FuzzOutcome { min_frontier_slack: i128::MAX, ..FuzzOutcome::default() };
    let mut prep = prepare(&rp);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = 0usize;
    loop {
        if next < chosen.len() && chosen[next] == prep.sim.steps {
            let point_seed = crash_rng.gen::<u64>();
            let image = prep.sim.world.crash(&mut ChaCha8Rng::seed_from_u64(point_seed));
            out.max_crash_items =
                out.max_crash_items.max(prep.sim.world.mem.crash_item_count());
            let detail = check_image(
                &rp,
                &prep.initial_words,
                prep.bank_params.as_ref(),
                &prep.sim,
                &image,
                mode,
                &mut out.min_frontier_slack,
            );
            if let Some(detail) = detail {
                out.failures.push(Failure {
                    seed,
                    step: chosen[next],
                    detail,
                    schedule: Schedule {
                        seed,
                        steps: Vec::new(),
                        crash_step: Some(chosen[next]),
                        crash_mask: None,
                        crash_seed: Some(point_seed),
                    },
                });
            }
            out.points += 1;
            next += 1;
            continue;
        }
        if prep.sim.done() {
            break;
        }
        random_step(&mut prep.sim, &mut rng);
    }
    debug_assert_eq!(prep.sim.steps, total_steps, "passes diverged");
    out.reports.push(report);
    out
}

/// Recover one image and run every check against the simulation's history
/// at that moment. `None` means the point passed.
fn check_image(
    rp: &RunParams,
    initial_words: &[u64],
    bank_params: Option<&bank::BankParams>,
    sim: &Sim,
    image: &CrashImage,
    mode: RecoveryMode,
    min_slack: &mut i128,
) -> Option<String> {
    let rec = recover(image, mode);
    let slack =
        rec.frontier as i128 + sim.world.cfg.max_lag as i128 - image.clock_at_crash as i128;
    *min_slack = (*min_slack).min(slack);

    let verdict = check_prefix(
        &rec.words,
        initial_words,
        image.data_words,
        &sim.world.trace.committed,
        rec.frontier,
    );
    if !verdict.pass {
        return Some(verdict.detail);
    }
    match rp.workload {
        WorkloadKind::Bank => {
            if let Some(bp) = bank_params {
                let sum = bank::total(&|a| rec.words[word_index(a)], bp);
                if sum != bank::initial_total(bp) {
                    return Some(format!(
                        "conservation broken: {sum} vs {}",
                        bank::initial_total(bp)
                    ));
                }
            }
        }
        WorkloadKind::BTree => {
            if let Err(e) = btree::check_structure(&|a| rec.words[word_index(a)]) {
                return Some(format!("tree structure: {e}"));
            }
        }
    }
    None
}

fn word_index(addr: u64) -> usize {
    ((addr - crate::config::REGION_BASE) / 8) as usize
}

/// Re-run one reproducer schedule and evaluate the same checks. Used to
/// confirm that emitted failures (or any sampled point) replay exactly.
pub fn replay_point(run: &RunParams, schedule: &Schedule) -> (bool, String, CrashImage) {
    let rp = RunParams { seed: schedule.seed, ..run.clone() };
    let mode = mode_for(rp.kind).expect("engine persists nothing; nothing to fuzz");
    let mut prep = prepare(&rp);
    let trace = crate::sched::run_scheduled(&mut prep.sim, schedule).expect("replayable");
    let image = trace.crash.expect("schedule carries a crash point");
    let mut slack = i128::MAX;
    let detail = check_image(
        &rp,
        &prep.initial_words,
        prep.bank_params.as_ref(),
        &prep.sim,
        &image,
        mode,
        &mut slack,
    );
    match detail {
        Some(detail) => (false, detail, image),
        None => (true, String::new(), image),
    }
}

#[derive(Debug, Default)]
pub struct ExploreOutcome {
    /// Complete interleavings enumerated.
    pub schedules: u64,
    /// Step boundaries visited (every one is a crash point).
    pub edges: u64,
    /// Crash images checked (boundaries times writeback masks).
    pub points: u64,
    pub failures: Vec<Failure>,
    pub max_crash_items: usize,
    pub min_frontier_slack: i128,
}

/// Every interleaving crossed with every crash point. At each step boundary
/// the dirty writeback set is resolved by mask: all `2^items` outcomes when
/// `items <= mask_cap`, else a fixed deterministic sample (the exhaustive
/// claim then needs `max_crash_items <= mask_cap`, which the caller can
/// assert). Failures carry scripted schedules that replay exactly.
pub fn explore_crashes(
    rp: &RunParams,
    base: &Sim,
    initial_words: &[u64],
    bank_params: Option<&bank::BankParams>,
    budget: u64,
    max_steps: u64,
    mask_cap: u32,
) -> Result<ExploreOutcome, SchedError> {
    let mode = mode_for(rp.kind).expect("engine persists nothing; nothing to explore");
    let mut out = ExploreOutcome { min_frontier_slack: i128::MAX, ..Default::default() };
    let mut sample_rng = ChaCha8Rng::seed_from_u64(rp.seed ^ 0xa076_1d64_78bd_642f);

    // the boundary before the first step is a crash point too
    check_edge(rp, initial_words, bank_params, base, &[], mode, mask_cap, &mut sample_rng, &mut out);

    let stats = crate::sched::explore(base, budget, max_steps, &mut |sim: &Sim, prefix: &[usize]| {
        check_edge(rp, initial_words, bank_params, sim, prefix, mode, mask_cap, &mut sample_rng, &mut out);
    })?;
    out.schedules = stats.schedules;
    out.edges = stats.edges + 1;
    Ok(out)
}

/// `explore_crashes` over a prepared workload.
pub fn explore_prepared(
    rp: &RunParams,
    budget: u64,
    max_steps: u64,
    mask_cap: u32,
) -> Result<ExploreOutcome, SchedError> {
    let prep = prepare(rp);
    explore_crashes(
        rp,
        &prep.sim,
        &prep.initial_words,
        prep.bank_params.as_ref(),
        budget,
        max_steps,
        mask_cap,
    )
}

#[allow(clippy::too_many_arguments)]
fn check_edge(
    rp: &RunParams,
    initial_words: &[u64],
    bank_params: Option<&bank::BankParams>,
    sim: &Sim,
    prefix: &[usize],
    mode: RecoveryMode,
    mask_cap: u32,
    sample_rng: &mut ChaCha8Rng,
    out: &mut ExploreOutcome,
) {
    let items = sim.world.mem.crash_item_count();
    out.max_crash_items = out.max_crash_items.max(items);
    let masks: Vec<u64> = if items as u32 <= mask_cap {
        (0..(1u64 << items)).collect()
    } else {
        let mut m = vec![0, u64::MAX];
        m.extend((0..14).map(|_| sample_rng.gen::<u64>()));
        m
    };
    for mask in masks {
        let image = sim.world.crash_mask(mask);
        out.points += 1;
        let detail =
            check_image(rp, initial_words, bank_params, sim, &image, mode, &mut out.min_frontier_slack);
        if let Some(detail) = detail {
            out.failures.push(Failure {
                seed: rp.seed,
                step: prefix.len() as u64,
                detail,
                schedule: Schedule {
                    seed: rp.seed,
                    steps: prefix.to_vec(),
                    crash_step: Some(prefix.len() as u64),
                    crash_mask: Some(mask),
                    crash_seed: None,
                },
            });
        }
    }
}
