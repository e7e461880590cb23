//! Throughput of the data-parallel hot paths.
//!
//! Run once with default features and once with `--no-default-features`;
//! every benchmark id carries the execution strategy so the two reports sit
//! side by side under `target/criterion`.

use std::hint::black_box;

use annp::ann::{AnnConfig, AnnIndex};
use annp::corpus::{CorpusConfig, SyntheticCorpus};
use annp::exec;
use annp::model::{MaskMode, ModelConfig, ModelParams};
use annp::trainer::{batch_gradients, encode_inventory};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn small_model() -> ModelConfig {
    ModelConfig {
        dim: 32,
        heads: 4,
        ffn_dim: 64,
        audio_layers: 1,
        label_layers: 1,
        context_layers: 1,
        joint_dim: 32,
        ..ModelConfig::default()
    }
}

fn throughput(c: &mut Criterion) {
    let corpus = SyntheticCorpus::generate(&CorpusConfig::default(), 3).expect("corpus");
    let inventory = corpus.inventory().expect("inventory");
    let params = ModelParams::new(small_model(), 3).expect("model");
    let embeddings = encode_inventory(&params, &inventory).expect("encode");
    let index = AnnIndex::build(&embeddings, &AnnConfig::default(), 3).expect("index");
    let batch: Vec<_> = corpus.train.iter().take(8).collect();
    let context: Vec<_> = inventory
        .iter()
        .take(16)
        .map(|p| Some(annp::context_encoder::tokenize(&p.text).expect("tokenize")))
        .chain(std::iter::once(None))
        .collect();
    let queries: Vec<Vec<f64>> = embeddings.iter().take(64).map(|(_, v)| v.clone()).collect();

    let mut group = c.benchmark_group("throughput");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("batch_gradients", exec::STRATEGY), |b| {
        b.iter(|| batch_gradients(&params, black_box(&context), &batch, MaskMode::Global).expect("grads"))
    });
    group.bench_function(BenchmarkId::new("encode_inventory", exec::STRATEGY), |b| {
        b.iter(|| encode_inventory(black_box(&params), &inventory).expect("encode"))
    });
    group.bench_function(BenchmarkId::new("ann_build", exec::STRATEGY), |b| {
        b.iter(|| AnnIndex::build(black_box(&embeddings), &AnnConfig::default(), 3).expect("index"))
    });
    group.bench_function(BenchmarkId::new("ann_query_64", exec::STRATEGY), |b| {
        b.iter(|| exec::map(&queries, |q| index.query(black_box(q), 20).expect("query")))
    });
    group.finish();
}

criterion_group!(benches, throughput);
criterion_main!(benches);
