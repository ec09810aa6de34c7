use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pyramid_core::par;
use pyramid_core::selectors::{select, Metric, SelectorKind};
use pyramid_core::Matrix;

fn batch(count: usize, rows: usize, dim: usize) -> Vec<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (0..count).map(|_| Matrix::from_fn(rows, dim, |_, _| rng.random_range(-1.0..1.0))).collect()
}

fn batch_size(c: &mut Criterion) {
    let emb = batch(1, 512, 64).pop().unwrap();
    let mut g = c.benchmark_group("greedy_batch_size");
    for m in [1, 8, 32] {
        g.bench_with_input(BenchmarkId::from_parameter(m), &m, |b, &m| {
            b.iter(|| select(SelectorKind::coreset(m), &emb, 128, Metric::Euclidean, None).unwrap())
        });
    }
    g.finish();
}

fn parallel_vs_sequential(c: &mut Criterion) {
    let inputs = batch(64, 128, 32);
    let run = |e: &Matrix| select(SelectorKind::coreset(1), e, 32, Metric::Euclidean, None).unwrap().cover_radius;
    let mut g = c.benchmark_group("select_64_sequences");
    g.bench_function("parallel", |b| b.iter(|| par::map_slice(&inputs, run)));
    g.bench_function("sequential", |b| b.iter(|| par::map_range_seq(inputs.len(), |i| run(&inputs[i]))));
    g.finish();
}

criterion_group!(benches, batch_size, parallel_vs_sequential);
criterion_main!(benches);
