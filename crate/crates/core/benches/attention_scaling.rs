use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use slimmatch::bench::{tokens, AttentionKind, Layer};

const CHANNELS: usize = 64;

fn scaling(c: &mut Criterion) {
    let layer = Layer::new(CHANNELS).unwrap();
    let mut group = c.benchmark_group("attention_layer");
    group.sample_size(10);
    for kind in [AttentionKind::Vector, AttentionKind::Vanilla] {
        for n in [256usize, 512, 1024, 2048] {
            let x = tokens(n, CHANNELS);
            group.throughput(Throughput::Elements(n as u64));
            group.bench_with_input(BenchmarkId::new(kind.as_str(), n), &x, |b, x| b.iter(|| layer.run(kind, x).unwrap()));
        }
    }
    group.finish();
}

criterion_group!(benches, scaling);
criterion_main!(benches);
