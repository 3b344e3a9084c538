//! Data-parallel vs sequential RVQ paths. With the default `parallel`
//! feature the plain entry points run on rayon; the `*_seq` functions are
//! the single-threaded fallback.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use mmtok::rvq::{
    encode, encode_seq, layer_error_curve, train_codebooks, train_codebooks_seq, CodebookSet,
    Frames, Rate, RvqConfig,
};

fn speech_like_config(seed: u64) -> RvqConfig {
    RvqConfig {
        frame_dim: 16,
        num_layers: 8,
        codebook_size: 256,
        frame_rate: Rate::per_second(50),
        seed,
    }
}

fn bench_encode(c: &mut Criterion) {
    let books = CodebookSet::seeded_random(speech_like_config(1)).unwrap();
    let signal = Frames::gaussian(2000, 16, 7);
    let mut group = c.benchmark_group("rvq_encode_2000x8");
    group.bench_function("parallel", |b| b.iter(|| black_box(encode(&signal, &books).unwrap())));
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(encode_seq(&signal, &books).unwrap()))
    });
    group.finish();
}

fn bench_train(c: &mut Criterion) {
    let config = RvqConfig {
        frame_dim: 8,
        num_layers: 2,
        codebook_size: 64,
        frame_rate: Rate::per_second(50),
        seed: 3,
    };
    let data = Frames::gaussian(4096, 8, 11);
    let mut group = c.benchmark_group("rvq_train_4096x2x64");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| black_box(train_codebooks(&data, &config).unwrap()))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(train_codebooks_seq(&data, &config).unwrap()))
    });
    group.finish();
}

fn bench_error_curve(c: &mut Criterion) {
    let books = CodebookSet::seeded_random(speech_like_config(5)).unwrap();
    let signal = Frames::gaussian(1000, 16, 9);
    c.bench_function("rvq_layer_error_curve_1000x8", |b| {
        b.iter(|| black_box(layer_error_curve(&signal, &books).unwrap()))
    });
}

criterion_group!(benches, bench_encode, bench_train, bench_error_curve);
criterion_main!(benches);
