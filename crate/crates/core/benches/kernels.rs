//! Sequential versus rayon kernels on the shapes the backbone and attention
//! layers actually see.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use slimmatch::rng::XorShift64Star;
use slimmatch::tensor::kernels::{depthwise_par, depthwise_seq, matmul_par, matmul_seq, ConvGeom};

fn random(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = XorShift64Star::new(seed);
    (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    group.sample_size(20);
    for (m, k, n) in [(64, 64, 64), (1024, 64, 64), (256, 256, 256)] {
        let (a, b) = (random(m * k, 1), random(k * n, 2));
        let id = format!("{m}x{k}x{n}");
        group.bench_function(BenchmarkId::new("seq", &id), |bch| bch.iter(|| matmul_seq(&a, &b, m, k, n)));
        group.bench_function(BenchmarkId::new("par", &id), |bch| bch.iter(|| matmul_par(&a, &b, m, k, n)));
    }
    group.finish();
}

fn depthwise(c: &mut Criterion) {
    let mut group = c.benchmark_group("depthwise");
    group.sample_size(20);
    for (ch, side, k) in [(32, 32, 3), (64, 16, 7), (16, 64, 5)] {
        let g = ConvGeom::new(ch, side, side, k, 1, k / 2).unwrap();
        let (x, w) = (random(ch * side * side, 3), random(ch * k * k, 4));
        let id = format!("c{ch}_{side}px_k{k}");
        group.bench_function(BenchmarkId::new("seq", &id), |b| b.iter(|| depthwise_seq(&x, &w, &g)));
        group.bench_function(BenchmarkId::new("par", &id), |b| b.iter(|| depthwise_par(&x, &w, &g)));
    }
    group.finish();
}

criterion_group!(benches, matmul, depthwise);
criterion_main!(benches);
