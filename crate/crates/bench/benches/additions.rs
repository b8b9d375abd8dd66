//! Addition-strategy comparison: pairwise vs write-once vs streaming at a
//! fixed problem size, where the linear-combination phases dominate the
//! difference.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use fastmm_bench::random_matrix;
use fastmm_core::runtime::{fast_multiply, ExecutionConfig, StepPolicy};
use fastmm_core::{strassen, AdditionStrategy};

fn bench_strategies(c: &mut Criterion) {
    let alg = strassen();
    let n = 512;
    let a = random_matrix(n, n, 3);
    let b = random_matrix(n, n, 4);
    let mut group = c.benchmark_group("addition-strategy");
    group.sample_size(10);
    for strategy in AdditionStrategy::ALL {
        let config = ExecutionConfig {
            steps: StepPolicy::Fixed(2),
            strategy,
            ..ExecutionConfig::default()
        };
        group.bench_with_input(
            BenchmarkId::new(strategy.as_str(), n),
            &n,
            |bench, _| bench.iter(|| black_box(fast_multiply(&a, &b, &alg, &config).unwrap())),
        );
    }
    group.finish();
}

criterion_group!(benches, bench_strategies);
criterion_main!(benches);
