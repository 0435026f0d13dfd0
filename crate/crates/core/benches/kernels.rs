//! Parallel kernels against their sequential fallbacks.
//!
//! `cargo bench -p lococo` compares the rayon build with a one-thread pool;
//! `--no-default-features` benches the sequential build outright.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lococo::cache::{PolicyConfig, PolicyKind};
use lococo::compressor::ReluPlacement;
use lococo::model::{evaluate, forward_segmented, Checkpoint, ConvHeadSet, EvalConfig, ModelConfig, ModelWeights};
use lococo::numerics::tensor::{matmul, matmul_serial};
use lococo::numerics::Tensor2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn one_thread() -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()
}

fn model(policy: &PolicyConfig) -> Checkpoint {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ck = Checkpoint::new(cfg, ModelWeights::init(&cfg, &mut rng));
    match policy.merge_capacity() {
        Some(m) => ck.with_conv_heads(ConvHeadSet::init(&cfg, m, 21, ReluPlacement::PostConv, &mut rng).unwrap()),
        None => ck,
    }
}

fn tokens(n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n).map(|_| rng.gen_range(0..256)).collect()
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in [64, 256] {
        let a = Tensor2::randn(n, n, 1.0, &mut rng);
        let b = Tensor2::randn(n, n, 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |bench, _| {
            bench.iter(|| matmul(&a, &b).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("serial", n), &n, |bench, _| {
            bench.iter(|| matmul_serial(&a, &b).unwrap())
        });
    }
    group.finish();
}

fn bench_eval(c: &mut Criterion) {
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    let corpus = tokens(1024);
    let eval = EvalConfig {
        context_length: 256,
        block_size: 32,
    };
    let pool = one_thread();
    for policy in [PolicyConfig::concat(), PolicyConfig::new(PolicyKind::Lococo, 64)] {
        let ck = model(&policy);
        let name = policy.kind.name();
        group.bench_function(BenchmarkId::new("default_pool", name), |b| {
            b.iter(|| evaluate(&ck, &corpus, &policy, &eval).unwrap())
        });
        group.bench_function(BenchmarkId::new("one_thread", name), |b| {
            b.iter(|| pool.install(|| evaluate(&ck, &corpus, &policy, &eval).unwrap()))
        });
    }
    group.finish();
}

fn bench_long_context(c: &mut Criterion) {
    let mut group = c.benchmark_group("segmented_4096");
    group.sample_size(10);
    let policy = PolicyConfig::new(PolicyKind::Lococo, 128);
    let ck = model(&policy);
    let toks = tokens(4096);
    group.bench_function("lococo_m128_b128", |b| {
        b.iter(|| forward_segmented(&ck, &toks, 128, policy).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_eval, bench_long_context);
criterion_main!(benches);
