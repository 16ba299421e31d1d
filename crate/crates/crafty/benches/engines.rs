//! Wall-clock comparison of the engines on one bank configuration. The
//! emulated-time numbers in the CSV reports are what the cost model cares
//! about; this suite just tracks how fast the simulation itself runs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crafty::config::{Config, Contention, EngineKind, WorkloadKind};
use crafty::harness::run::{prepare, RunParams};

fn params(kind: EngineKind) -> RunParams {
    RunParams {
        cfg: Config { engine: kind, ..Config::default() },
        kind,
        workload: WorkloadKind::Bank,
        contention: Contention::Medium,
        threads: 2,
        txns_per_thread: 200,
        idle_threads: 0,
        seed: 7,
    }
}

fn engines(c: &mut Criterion) {
    let mut g = c.benchmark_group("bank-medium-2x200");
    g.sample_size(20);
    for kind in [
        EngineKind::Crafty,
        EngineKind::CraftyNoRedo,
        EngineKind::CraftyNoValidate,
        EngineKind::UndoPerWrite,
        EngineKind::RedoBuffered,
        EngineKind::HtmOnly,
    ] {
        g.bench_with_input(BenchmarkId::from_parameter(kind.as_str()), &kind, |b, &kind| {
            let rp = params(kind);
            b.iter(|| {
                let mut prep = prepare(&rp);
                let mut rng = ChaCha8Rng::seed_from_u64(rp.seed);
                assert!(prep.sim.run_random(&mut rng, 100_000_000));
                prep.sim.steps
            })
        });
    }
    g.finish();
}

criterion_group!(benches, engines);
criterion_main!(benches);
