//! Client updates within a round and seeds within a sweep, on a one-thread
//! pool versus the full pool. `cargo bench --no-default-features` measures
//! the sequential fallback build instead; the group names carry the build.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fedepth::experiment::{setup, sweep, BudgetMode, ExperimentConfig};
use fedepth::federation::Federation;
use fedepth::parallel::is_parallel;

fn config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.budget.mode = BudgetMode::Groups;
    c.federation.rounds = 2;
    c
}

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut out = vec![("1 thread".to_string(), 1)];
    if threads > 1 {
        out.push((format!("{threads} threads"), threads));
    }
    out.into_iter()
        .map(|(name, n)| (name, rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()))
        .collect()
}

fn build() -> &'static str {
    if is_parallel() {
        "rayon"
    } else {
        "sequential"
    }
}

fn round(c: &mut Criterion) {
    let s = setup(&config()).unwrap();
    let mut group = c.benchmark_group(format!("round/{}", build()));
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(name, |b| {
            b.iter(|| {
                pool.install(|| {
                    let mut fed =
                        Federation::new(&s.graph, &s.federation, &s.clients, &s.test, s.initial.clone()).unwrap();
                    black_box(fed.step().unwrap())
                })
            })
        });
    }
    group.finish();
}

fn seeds(c: &mut Criterion) {
    let cfg = config();
    let seeds = [0, 1, 2, 3];
    let mut group = c.benchmark_group(format!("sweep/{}", build()));
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(name, |b| b.iter(|| pool.install(|| black_box(sweep(&cfg, &seeds)))));
    }
    group.finish();
}

criterion_group!(benches, round, seeds);
criterion_main!(benches);
