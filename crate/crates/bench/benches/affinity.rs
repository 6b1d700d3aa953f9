use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cscl_bench::random_problem;
use cscl_core::similarity::affinity;
use cscl_core::strided::{affinity_naive, affinity_strided};
use cscl_core::WindowConfig;
use std::hint::black_box;

fn strided_vs_naive(c: &mut Criterion) {
    let mut group = c.benchmark_group("affinity");
    group.sample_size(10);
    for (wr, ws) in [(2, 2), (2, 4), (4, 2)] {
        let cfg = WindowConfig::new(3, wr, ws);
        let (y, p) = random_problem(128, 128, 16, cfg.wd, 0);
        let id = format!("wr{wr}_ws{ws}");
        group.bench_with_input(BenchmarkId::new("direct", &id), &cfg, |b, cfg| {
            b.iter(|| affinity(black_box(&y), &p, cfg, true).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("naive", &id), &cfg, |b, cfg| {
            b.iter(|| affinity_naive(black_box(&y), &p, cfg, true, None, None).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("strided", &id), &cfg, |b, cfg| {
            b.iter(|| affinity_strided(black_box(&y), &p, cfg, true).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, strided_vs_naive);
criterion_main!(benches);
