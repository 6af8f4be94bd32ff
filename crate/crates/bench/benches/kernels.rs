use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dame_bench::{batch, embedding, encoder, heads, score_set, soft_objective, spec, utterance};
use dame_core::encoder::encode;
use dame_core::eval::compute_eer;
use dame_core::margin_head::{margin_loss, MarginConfig};
use dame_core::numerics::RngStream;

fn bench_margin_loss(c: &mut Criterion) {
    let bank = heads(1);
    let cfg = MarginConfig::new(30.0, vec![0.0, 0.0, 0.1, 0.2]).unwrap();
    let mut group = c.benchmark_group("margin_loss");
    for (k, &d) in spec().dims().iter().enumerate() {
        let z = embedding(d, 2);
        group.bench_with_input(BenchmarkId::from_parameter(d), &z, |b, z| {
            b.iter(|| margin_loss(black_box(z), &bank, k, 3, &cfg).unwrap())
        });
    }
    group.finish();
}

fn bench_encode(c: &mut Criterion) {
    let enc = encoder(3);
    let mut rng = RngStream::new(4);
    let mut group = c.benchmark_group("encode");
    for frames in [20, 100, 400] {
        let u = utterance(frames, 0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(frames), &u, |b, u| b.iter(|| encode(black_box(u), &enc).unwrap()));
    }
    group.finish();
}

fn bench_eer(c: &mut Criterion) {
    let mut group = c.benchmark_group("compute_eer");
    for n in [100, 1_000, 10_000] {
        let s = score_set(n, n, 5);
        group.bench_with_input(BenchmarkId::from_parameter(2 * n), &s, |b, s| b.iter(|| compute_eer(black_box(s))));
    }
    group.finish();
}

fn bench_objective(c: &mut Criterion) {
    let enc = encoder(6);
    let bank = heads(7);
    let obj = soft_objective();
    let b32 = batch(32, 8);
    c.bench_function("objective/sw_batch32", |b| b.iter(|| obj.evaluate(&enc, &bank, black_box(&b32)).unwrap()));
}

criterion_group!(benches, bench_margin_loss, bench_encode, bench_eer, bench_objective);
criterion_main!(benches);
