//! Benchmarks for the data-parallel evaluation path against its sequential
//! twin, plus single-user forward passes for both models.
//!
//! Run with `cargo bench -p dymus`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dymus::data::{
    build_dataset, generate_synthetic, leave_one_out_split, DatasetSplit, FilterOptions,
    SyntheticConfig,
};
use dymus::eval::{evaluate, evaluate_sequential, validation_contexts};
use dymus::model::{Integrator, Model, ModelConfig, ModelKind};

fn fixtures(kind: ModelKind) -> (Model, DatasetSplit) {
    let cfg = SyntheticConfig {
        users: 64,
        items: 40,
        behaviors: 3,
        correlation_strength: 0.9,
        seed: 17,
        purchases_per_user: 10,
        clicks_per_purchase: 4,
        category_size: 5,
        anchor_window: 3,
        exact_share: 0.95,
        popular_count: 7,
            middle_mimic: 0.5,
    };
    let records = generate_synthetic(&cfg).unwrap();
    let dataset = build_dataset(&records, &cfg.behavior_names(), &FilterOptions::default()).unwrap();
    let split = leave_one_out_split(&dataset).unwrap();
    let model = ModelConfig {
        kind,
        embed_dim: 16,
        capsule_len: 4,
        routing_iters: 2,
        behavior_count: 3,
        item_count: dataset.meta.item_count,
        dropout: 0.0,
        seq_cap: 10,
        integrator: Integrator::DynamicRouting,
    };
    let model = Model::init(model, dataset.meta.behavior_names.clone(), 17).unwrap();
    (model, split)
}

fn bench_evaluation(c: &mut Criterion) {
    let (model, split) = fixtures(ModelKind::Dymus);
    let contexts = validation_contexts(&split);
    let mut group = c.benchmark_group("evaluate_64_users");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("rayon", "dymus"), |b| {
        b.iter(|| evaluate(&model, &contexts, &split.validation_item, &[10, 20]).unwrap())
    });
    group.bench_function(BenchmarkId::new("sequential", "dymus"), |b| {
        b.iter(|| evaluate_sequential(&model, &contexts, &split.validation_item, &[10, 20]).unwrap())
    });
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("single_user_forward");
    for kind in [ModelKind::Dymus, ModelKind::DymusPlus] {
        let (model, split) = fixtures(kind);
        let history = split.train[0].clone();
        group.bench_function(BenchmarkId::new("score", format!("{kind:?}")), |b| {
            b.iter(|| model.score(&history).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_evaluation, bench_forward);
criterion_main!(benches);
