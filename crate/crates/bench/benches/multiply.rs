//! Kernel and recursion benchmarks: the blocked classical kernel against
//! Strassen at one and two recursive steps, on square problems.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use fastmm_bench::random_matrix;
use fastmm_core::runtime::{fast_multiply, BaseKernel, BlockedKernel, ExecutionConfig, StepPolicy};
use fastmm_core::{strassen, AdditionStrategy, DenseMatrix};

fn bench_square(c: &mut Criterion) {
    let alg = strassen();
    let mut group = c.benchmark_group("square");
    group.sample_size(10);
    for n in [256usize, 512, 1024] {
        let a = random_matrix(n, n, 1);
        let b = random_matrix(n, n, 2);
        let flops = 2.0 * (n as f64).powi(3) - (n as f64).powi(2);
        group.throughput(Throughput::Elements(flops as u64));

        group.bench_with_input(BenchmarkId::new("classical-kernel", n), &n, |bench, _| {
            bench.iter(|| {
                let mut c = DenseMatrix::zeros(n, n);
                BlockedKernel.multiply(a.view(), b.view(), c.view_mut(), 1.0, false);
                black_box(c);
            })
        });

        for steps in [1u32, 2] {
            let config = ExecutionConfig {
                steps: StepPolicy::Fixed(steps),
                strategy: AdditionStrategy::WriteOnce,
                ..ExecutionConfig::default()
            };
            group.bench_with_input(
                BenchmarkId::new(format!("strassen-L{steps}"), n),
                &n,
                |bench, _| {
                    bench.iter(|| black_box(fast_multiply(&a, &b, &alg, &config).unwrap()))
                },
            );
        }
    }
    group.finish();
}

criterion_group!(benches, bench_square);
criterion_main!(benches);
