//! Prototyping attention against blocked self-attention as the token count grows.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protoformer::bench::SelfAttention;
use protoformer::proto::{cross_attention_prototyping, ProtoProjections, TokenGrid};
use protoformer::Tensor;

const D: usize = 16;
const K: usize = 20;
const N: usize = 3;

fn tokens(side: usize, rng: &mut impl Rng) -> TokenGrid {
    let t = side * side;
    let data = (0..t * D).map(|_| rng.gen_range(-1.0..1.0)).collect();
    TokenGrid::new(Tensor::new(&[t, D], data).unwrap(), side, side).unwrap()
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let proj = ProtoProjections::random(D, &mut rng);
    let attn = SelfAttention::random(D, &mut rng);
    let mut group = c.benchmark_group("attention");
    group.sample_size(10);
    for side in [16, 32, 64] {
        let grid = tokens(side, &mut rng);
        let t = side * side;
        group.throughput(Throughput::Elements(t as u64));
        group.bench_with_input(BenchmarkId::new("prototyping", t), &grid, |b, g| {
            b.iter(|| cross_attention_prototyping(g, K, N, &proj).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("self_attention", t), &grid, |b, g| {
            b.iter(|| attn.apply(&g.features).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, attention);
criterion_main!(benches);
