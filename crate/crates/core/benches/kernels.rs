//! Sequential vs data-parallel kernel and model benchmarks.
//!
//! Run with `cargo bench -p layerslim-core`. The parallel variants go
//! through the same per-row arithmetic as the sequential ones, so these
//! measure scheduling overhead and scaling, not numerical shortcuts.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use layerslim_core::kernels;
use layerslim_core::model::{HeadType, ModelConfig, TransformerModel};

fn fill(len: usize, seed: f32) -> Vec<f32> {
    (0..len).map(|i| ((i as f32) * 0.61 + seed).sin() * 0.1).collect()
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &n in &[64usize, 128, 256] {
        let a = fill(n * n, 0.3);
        let b = fill(n * n, 0.7);
        let mut out = vec![0.0; n * n];
        group.bench_with_input(BenchmarkId::new("seq", n), &n, |bench, _| {
            bench.iter(|| {
                kernels::matmul_seq(black_box(&mut out), &a, &b, n, n, n);
            })
        });
        group.bench_with_input(BenchmarkId::new("par", n), &n, |bench, _| {
            bench.iter(|| {
                kernels::matmul_par(black_box(&mut out), &a, &b, n, n, n);
            })
        });
    }
    group.finish();
}

fn toy_model(n_layers: usize) -> TransformerModel {
    let cfg = ModelConfig {
        vocab_size: 512,
        d_model: 64,
        n_heads: 4,
        n_layers,
        d_ff: 128,
        max_seq_len: 64,
        head: HeadType::LanguageModeling,
        tie_lm_head: true,
    };
    TransformerModel::init(cfg, 1).unwrap()
}

fn bench_forward(c: &mut Criterion) {
    let model = toy_model(8);
    let ids: Vec<u32> = (0..48u32).map(|i| (i * 7) % 512).collect();
    let mut group = c.benchmark_group("forward_8layer_seq48");
    // Thread-pool size 1 forces the sequential path at runtime; the default
    // pool exercises the rayon splits.
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    group.bench_function("threads_1", |bench| {
        bench.iter(|| single.install(|| black_box(model.forward_hidden(&ids).unwrap())))
    });
    group.bench_function("threads_default", |bench| {
        bench.iter(|| black_box(model.forward_hidden(&ids).unwrap()))
    });
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    use layerslim_core::training::{AdamW, TrainConfig};
    let mut model = toy_model(4);
    let ids: Vec<u32> = (0..48u32).map(|i| (i * 5) % 512).collect();
    let positions: Vec<usize> = (0..ids.len() - 1).collect();
    let targets: Vec<u32> = ids[1..].to_vec();
    let mut group = c.benchmark_group("train_step_4layer_seq48");
    group.sample_size(20);
    group.bench_function("forward_backward_step", |bench| {
        bench.iter(|| {
            let mut trace = model.trace(&ids).unwrap();
            let logits = model.lm_logits_node(&mut trace, &positions).unwrap();
            let loss = trace.graph.cross_entropy_rows(logits, &targets).unwrap();
            trace.graph.backward(loss).unwrap();
            model.accumulate_grads(&trace);
            let mut opt = AdamW::new(&TrainConfig::default());
            opt.step(&mut model.params_mut()).unwrap();
            model.zero_grads();
        })
    });
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_forward, bench_train_step);
criterion_main!(benches);
