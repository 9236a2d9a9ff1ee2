use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use statedchoice::{fit_grouped_probit, kmeans_partition, simulate_dataset, DgpConfig, ModelSpec};
use statedchoice_bench::{moments, panel};

fn simulate(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate");
    for n in [1_000usize, 10_000] {
        let mut cfg = DgpConfig::baseline();
        cfg.n = n;
        group.bench_with_input(BenchmarkId::from_parameter(n), &cfg, |b, cfg| {
            b.iter(|| simulate_dataset(black_box(cfg), 1).unwrap())
        });
    }
    group.finish();
}

fn kmeans(c: &mut Criterion) {
    let p = panel(5_000);
    let m = moments(&p);
    let mut group = c.benchmark_group("kmeans");
    for k in [5usize, 20] {
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            b.iter(|| kmeans_partition(black_box(&m), k, 10, 3).unwrap())
        });
    }
    group.finish();
}

fn probit(c: &mut Criterion) {
    let p = panel(5_000);
    let m = moments(&p);
    let g = kmeans_partition(&m, 10, 10, 3).unwrap();
    let spec = ModelSpec::default();
    c.bench_function("grouped_probit/k10", |b| b.iter(|| fit_grouped_probit(black_box(&p.actual), &g, &spec).unwrap()));
}

criterion_group!(benches, simulate, kmeans, probit);
criterion_main!(benches);
