use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use skyrelay_bench::problem;
use skyrelay_core::scheduler::{brute_force_optimum, solve_exact, solve_greedy};

fn bench_exact(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_exact");
    for n in [4, 8, 12, 16] {
        let (k, inst) = problem(n, 4, n as u64);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| solve_exact(black_box(&k), black_box(&inst)))
        });
    }
    group.finish();
}

fn bench_greedy(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_greedy");
    for n in [8, 64, 512] {
        let (k, inst) = problem(n, n / 2, n as u64);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| solve_greedy(black_box(&k), black_box(&inst)))
        });
    }
    group.finish();
}

fn bench_oracle(c: &mut Criterion) {
    let (k, inst) = problem(8, 4, 8);
    c.bench_function("brute_force_optimum/8x4", |b| b.iter(|| brute_force_optimum(black_box(&k), black_box(&inst))));
}

criterion_group!(benches, bench_exact, bench_greedy, bench_oracle);
criterion_main!(benches);
