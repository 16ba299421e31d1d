//! Command-line front end: throughput runs, crash fuzzing, exhaustive
//! exploration, and offline recovery of saved crash images. Every flag has
//! a CRAFTY_* environment variable twin so batch scripts can set a base
//! configuration once.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crafty::config::{Config, Contention, EngineKind, WorkloadKind};
use crafty::harness::fuzz::{
    explore_prepared, fuzz_crashes, replay_point, ExploreOutcome, Failure, FuzzOutcome,
    FuzzParams,
};
use crafty::harness::report::{write_csv, RunReport};
use crafty::harness::run::{prepare, RunParams};
use crafty::recovery::{mode_for, recover};
use crafty::world::CrashImage;

#[derive(Parser)]
#[command(name = "crafty", version, about = "Persistent-transaction engine workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a workload to completion and write one CSV row of counters.
    Bench(BenchCmd),
    /// Inject crashes at random step boundaries and check recovery.
    Fuzz(FuzzCmd),
    /// Enumerate every interleaving and writeback mask of a small run.
    Explore(ExploreCmd),
    /// Recover a saved crash image and summarize the outcome.
    Recover(RecoverCmd),
}

#[derive(Args)]
struct RunArgs {
    /// crafty | crafty-noredo | crafty-novalidate | undo | redo | htm-only
    #[arg(long, default_value = "crafty", env = "CRAFTY_ENGINE")]
    engine: String,
    /// bank | btree
    #[arg(long, default_value = "bank", env = "CRAFTY_WORKLOAD")]
    workload: String,
    /// high | medium | none (bank account-pool size)
    #[arg(long, default_value = "medium", env = "CRAFTY_CONTENTION")]
    contention: String,
    #[arg(long, default_value_t = 4, env = "CRAFTY_THREADS")]
    threads: usize,
    /// Emulated drain latency in nanoseconds.
    #[arg(long = "latency-ns", default_value_t = 300, env = "CRAFTY_LATENCY_NS")]
    latency_ns: u64,
    #[arg(long, default_value_t = 0, env = "CRAFTY_SEED")]
    seed: u64,
    /// Transactions per thread. Keep this small for explore.
    #[arg(long, default_value_t = 1000, env = "CRAFTY_TXNS")]
    txns: usize,
    /// Entries per per-thread undo log.
    #[arg(long = "log-capacity", default_value_t = 4096, env = "CRAFTY_LOG_CAPACITY")]
    log_capacity: usize,
    /// Per-step probability of a background cache-line eviction.
    #[arg(long = "evict-prob", default_value_t = 0.0, env = "CRAFTY_EVICT_PROB")]
    evict_prob: f64,
    /// Staleness budget in ticks before maintenance forces idle logs along.
    #[arg(long = "max-lag", default_value_t = 1_000_000, env = "CRAFTY_MAX_LAG")]
    max_lag: u64,
    /// Injected probability that an SGL chunk above one write Zero-aborts.
    #[arg(long = "p-zero", default_value_t = 0.0, env = "CRAFTY_P_ZERO")]
    p_zero: f64,
    /// Keep that many threads idle from the start (staleness worst case).
    #[arg(long = "idle-threads", default_value_t = 0, env = "CRAFTY_IDLE_THREADS")]
    idle_threads: usize,
}

impl RunArgs {
    fn to_params(&self) -> Result<RunParams, String> {
        let kind = EngineKind::parse(&self.engine)
            .ok_or_else(|| format!("unknown engine {:?}", self.engine))?;
        let workload = WorkloadKind::parse(&self.workload)
            .ok_or_else(|| format!("unknown workload {:?}", self.workload))?;
        let contention = Contention::parse(&self.contention)
            .ok_or_else(|| format!("unknown contention {:?}", self.contention))?;
        let cfg = Config {
            engine: kind,
            drain_latency_ns: self.latency_ns,
            log_capacity: self.log_capacity,
            evict_prob: self.evict_prob,
            max_lag: self.max_lag,
            p_zero: self.p_zero,
            ..Config::default()
        };
        Ok(RunParams {
            cfg,
            kind,
            workload,
            contention,
            threads: self.threads,
            txns_per_thread: self.txns,
            idle_threads: self.idle_threads,
            seed: self.seed,
        })
    }
}

#[derive(Args)]
struct BenchCmd {
    #[command(flatten)]
    run: RunArgs,
    /// Output CSV path.
    #[arg(long, env = "CRAFTY_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct FuzzCmd {
    #[command(flatten)]
    run: RunArgs,
    /// Total crash points, split evenly across the seeds.
    #[arg(long, default_value_t = 1000, env = "CRAFTY_POINTS")]
    points: u64,
    /// Consecutive seeds to fuzz, starting at --seed.
    #[arg(long, default_value_t = 1, env = "CRAFTY_SEEDS")]
    seeds: u64,
    /// Oversample boundaries with writebacks still in flight.
    #[arg(long, env = "CRAFTY_STRATIFIED")]
    stratified: bool,
    /// Where failing-schedule reproducers are written.
    #[arg(long = "out-dir", default_value = ".", env = "CRAFTY_OUT_DIR")]
    out_dir: PathBuf,
    /// Optional throughput CSV (one row per seed).
    #[arg(long, env = "CRAFTY_OUT")]
    out: Option<PathBuf>,
    /// Save a crash image here: the first failure's, or a clean end-of-run
    /// crash if everything passed. Feed it to `recover --snapshot`.
    #[arg(long = "snapshot-out", env = "CRAFTY_SNAPSHOT_OUT")]
    snapshot_out: Option<PathBuf>,
}

#[derive(Args)]
struct ExploreCmd {
    #[command(flatten)]
    run: RunArgs,
    /// Cap on schedule length; branches that outlive it abort the search.
    #[arg(long = "max-steps", default_value_t = 100_000, env = "CRAFTY_MAX_STEPS")]
    max_steps: u64,
    /// Cap on complete interleavings.
    #[arg(long, default_value_t = 1_000_000, env = "CRAFTY_BUDGET")]
    budget: u64,
    /// Largest dirty-item count that still gets every writeback mask;
    /// boundaries above it fall back to a deterministic sample.
    #[arg(long = "mask-cap", default_value_t = 12, env = "CRAFTY_MASK_CAP")]
    mask_cap: u32,
    #[arg(long = "out-dir", default_value = ".", env = "CRAFTY_OUT_DIR")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RecoverCmd {
    /// Crash image file, as written by `fuzz --snapshot-out`.
    #[arg(long, env = "CRAFTY_SNAPSHOT")]
    snapshot: PathBuf,
    /// Engine that produced the image; selects the recovery style.
    #[arg(long, default_value = "crafty", env = "CRAFTY_ENGINE")]
    engine: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Bench(c) => bench(c),
        Cmd::Fuzz(c) => fuzz(c),
        Cmd::Explore(c) => explore(c),
        Cmd::Recover(c) => recover_cmd(c),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn bench(c: BenchCmd) -> Result<ExitCode, String> {
    let rp = c.run.to_params()?;
    let mut prep = prepare(&rp);
    let mut rng = ChaCha8Rng::seed_from_u64(rp.seed);
    if !prep.sim.run_random(&mut rng, 500_000_000) {
        return Err("run did not finish within the step cap".into());
    }
    let report = RunReport::collect(&rp, &prep.sim);
    println!(
        "{} {} x{}: {} txns committed, {:.0} txn/s emulated, {} flushes, {} drains",
        rp.kind.as_str(),
        rp.workload.as_str(),
        rp.threads,
        report.txns,
        report.throughput,
        report.flushes,
        report.drains,
    );
    write_csv(&c.out, &[report]).map_err(|e| format!("writing {}: {e}", c.out.display()))?;
    Ok(ExitCode::SUCCESS)
}

fn fuzz(c: FuzzCmd) -> Result<ExitCode, String> {
    let rp = c.run.to_params()?;
    let seeds: Vec<u64> = (rp.seed..rp.seed + c.seeds.max(1)).collect();
    let per_seed = c.points.div_ceil(seeds.len() as u64).max(1);
    let params = FuzzParams {
        run: rp.clone(),
        seeds,
        points_per_seed: per_seed,
        stratified: c.stratified,
    };
    let out: FuzzOutcome = fuzz_crashes(&params);
    println!(
        "fuzzed {} crash points across {} seeds: {} failures, max {} dirty items, min frontier slack {}",
        out.points,
        params.seeds.len(),
        out.failures.len(),
        out.max_crash_items,
        out.min_frontier_slack,
    );
    if let Some(csv) = &c.out {
        write_csv(csv, &out.reports).map_err(|e| format!("writing {}: {e}", csv.display()))?;
    }
    write_failures(&c.out_dir, &out.failures, Some(&rp))?;
    if let Some(path) = &c.snapshot_out {
        let image = match out.failures.first() {
            Some(f) => replay_point(&rp, &f.schedule).2,
            None => end_of_run_image(&rp)?,
        };
        image.save(path).map_err(|e| format!("writing {}: {e}", path.display()))?;
        println!("crash image saved to {}", path.display());
    }
    Ok(exit_for(&out.failures))
}

fn explore(c: ExploreCmd) -> Result<ExitCode, String> {
    let rp = c.run.to_params()?;
    let out: ExploreOutcome = explore_prepared(&rp, c.budget, c.max_steps, c.mask_cap)
        .map_err(|e| e.to_string())?;
    let coverage = if out.max_crash_items as u32 <= c.mask_cap {
        "exhaustive"
    } else {
        "mask-sampled"
    };
    println!(
        "explored {} schedules, {} boundaries, {} crash images ({coverage}): {} failures",
        out.schedules,
        out.edges,
        out.points,
        out.failures.len(),
    );
    write_failures(&c.out_dir, &out.failures, None)?;
    Ok(exit_for(&out.failures))
}

fn recover_cmd(c: RecoverCmd) -> Result<ExitCode, String> {
    let kind = EngineKind::parse(&c.engine)
        .ok_or_else(|| format!("unknown engine {:?}", c.engine))?;
    let image = CrashImage::load(&c.snapshot)
        .map_err(|e| format!("reading {}: {e}", c.snapshot.display()))?;
    let Some(mode) = mode_for(kind) else {
        println!("{} persists nothing; nothing to recover", kind.as_str());
        return Ok(ExitCode::SUCCESS);
    };
    let rec = recover(&image, mode);
    let nonzero = rec.words[..image.data_words].iter().filter(|&&w| w != 0).count();
    println!(
        "recovered {} data words ({} nonzero) at clock {}",
        image.data_words, nonzero, image.clock_at_crash,
    );
    println!(
        "frontier {}, {} sequences rolled back, {} replayed",
        rec.frontier, rec.rolled_back, rec.replayed,
    );
    Ok(ExitCode::SUCCESS)
}

/// One reproducer file per failure; rerunning its schedule rebuilds the
/// crash image exactly. Fuzz failures also get the image itself, saved by
/// replaying them here.
fn write_failures(
    dir: &PathBuf,
    failures: &[Failure],
    replay_from: Option<&RunParams>,
) -> Result<(), String> {
    if failures.is_empty() {
        return Ok(());
    }
    std::fs::create_dir_all(dir).map_err(|e| format!("creating {}: {e}", dir.display()))?;
    for (i, f) in failures.iter().enumerate() {
        let sched_path = dir.join(format!("fail-{i}.sched"));
        std::fs::write(&sched_path, format!("{}", f.schedule))
            .map_err(|e| format!("writing {}: {e}", sched_path.display()))?;
        eprintln!("failure {i} at step {}: {}", f.step, f.detail);
        eprintln!("  reproducer: {}", sched_path.display());
        if let Some(rp) = replay_from {
            let (_, _, image) = replay_point(rp, &f.schedule);
            let img_path = dir.join(format!("fail-{i}.image"));
            image
                .save(&img_path)
                .map_err(|e| format!("writing {}: {e}", img_path.display()))?;
            eprintln!("  crash image: {}", img_path.display());
        }
    }
    Ok(())
}

/// A full clean run crashed at its final boundary, for recovery demos.
fn end_of_run_image(rp: &RunParams) -> Result<CrashImage, String> {
    let mut prep = prepare(rp);
    let mut rng = ChaCha8Rng::seed_from_u64(rp.seed);
    if !prep.sim.run_random(&mut rng, 500_000_000) {
        return Err("run did not finish within the step cap".into());
    }
    Ok(prep.sim.world.crash(&mut ChaCha8Rng::seed_from_u64(rp.seed)))
}

fn exit_for(failures: &[Failure]) -> ExitCode {
    if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
