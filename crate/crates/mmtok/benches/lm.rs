//! Batch gradient computation, parallel over sequences vs sequential.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use mmtok::lm::{batch_loss_and_grads, batch_loss_and_grads_seq, generate, init_model, DecodeStrategy, ModelConfig};

fn toy_model() -> mmtok::lm::ModelParams {
    init_model(&ModelConfig {
        vocab_size: 512,
        dim: 64,
        num_layers: 2,
        num_heads: 2,
        max_seq_len: 64,
        seed: 1,
    })
    .unwrap()
}

fn toy_batch(n: usize, len: usize) -> Vec<(Vec<u32>, Vec<bool>)> {
    (0..n)
        .map(|i| {
            let tokens: Vec<u32> = (0..len).map(|t| ((t * 31 + i * 7) % 512) as u32).collect();
            (tokens, vec![true; len])
        })
        .collect()
}

fn bench_batch_grads(c: &mut Criterion) {
    let params = toy_model();
    let batch = toy_batch(8, 48);
    let mut group = c.benchmark_group("lm_batch_grads_8x48");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| black_box(batch_loss_and_grads(&params, &batch).unwrap()))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(batch_loss_and_grads_seq(&params, &batch).unwrap()))
    });
    group.finish();
}

fn bench_generate(c: &mut Criterion) {
    let params = toy_model();
    let strategy = DecodeStrategy { max_new_tokens: 16, ..DecodeStrategy::image() };
    c.bench_function("lm_generate_16_tokens", |b| {
        b.iter(|| black_box(generate(&params, &[1, 2, 3, 4], None, &strategy).unwrap()))
    });
}

criterion_group!(benches, bench_batch_grads, bench_generate);
criterion_main!(benches);
