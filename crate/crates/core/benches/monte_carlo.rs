//! Sequential vs rayon-parallel Monte Carlo race estimation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use speedbump::model::SpeedBumpSpec;
use speedbump::race::{monte_carlo_race, SeedSpec};
use speedbump::Execution;

fn races(c: &mut Criterion) {
    let bump = SpeedBumpSpec::new(3.0, true, true).unwrap();
    let rates = [2.0, 0.5, 0.8];
    let reps = 200_000u64;
    let mut group = c.benchmark_group("monte_carlo_race");
    group.throughput(Throughput::Elements(reps));
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(BenchmarkId::new(format!("{exec:?}"), reps), &exec, |b, &exec| {
            b.iter(|| monte_carlo_race(&rates, 0.2, Some(&bump), reps, &SeedSpec::new(1), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, races);
criterion_main!(benches);
