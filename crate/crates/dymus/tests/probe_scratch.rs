mod common;
use dymus::data::{build_dataset, generate_synthetic, leave_one_out_split, FilterOptions, SyntheticConfig};
use dymus::eval::{metrics_from_ranks, rank_of, validation_contexts};
use dymus::model::{Integrator, Model, ModelConfig, ModelKind};
use dymus::train::{train, TrainConfig};

fn data() -> (dymus::data::Dataset, dymus::data::DatasetSplit) {
    let cfg = SyntheticConfig {
        users: 200, items: 50, behaviors: 3, correlation_strength: 0.9, seed: 7,
        purchases_per_user: 20, clicks_per_purchase: 4, category_size: 5,
        anchor_window: 2, exact_share: 0.95, popular_count: 5, middle_mimic: 0.5,
    };
    let records = generate_synthetic(&cfg).unwrap();
    let dataset = build_dataset(&records, &cfg.behavior_names(), &FilterOptions::default()).unwrap();
    let split = leave_one_out_split(&dataset).unwrap();
    (dataset, split)
}

/// Hand-coded rule scorer: recent clicks first, then the popular pool.
#[test]
fn probe_bayes_ceiling() {
    let (dataset, split) = data();
    let contexts = validation_contexts(&split);
    let mut ranks = Vec::new();
    for (u, ctx) in contexts.iter().enumerate() {
        let clicks = &ctx.sequences[2];
        let mut scores = vec![0.0f64; dataset.meta.item_count];
        for (back, &(item, _)) in clicks.iter().rev().take(2).enumerate() {
            scores[item] = scores[item].max(100.0 - back as f64);
        }
        for pool in 0..5 {
            let ext = format!("i{pool}");
            if let Some(item) = dataset.meta.item_ids.iter().position(|id| *id == ext) {
                if scores[item] == 0.0 {
                    scores[item] = 50.0 - pool as f64;
                }
            }
        }
        ranks.push(rank_of(&scores, split.validation_item[u]));
    }
    let m = metrics_from_ranks(&ranks, &[10]);
    println!("BAYES-RULE ceiling: HR@10 {:.4} N@10 {:.4}", m.hr_at(10), m.ndcg_at(10));
}

fn run(tag: &str, integrator: Integrator, kind: ModelKind, d: usize, l: usize, r: usize,
       dropout: f64, seq_cap: usize, lr: f64, epochs: usize, l2: f64) {
    let (dataset, split) = data();
    let mcfg = ModelConfig {
        kind, embed_dim: d, capsule_len: l, routing_iters: r,
        behavior_count: 3, item_count: dataset.meta.item_count, dropout, seq_cap,
        integrator,
    };
    let tcfg = TrainConfig {
        learning_rate: lr, l2, batch_size: 16, max_epochs: epochs,
        patience: epochs, eval_ks: vec![10], seed: 7, sliding_window: true,
    };
    let mut model = Model::init(mcfg, dataset.meta.behavior_names.clone(), 7).unwrap();
    let t0 = std::time::Instant::now();
    let report = train(&mut model, &split, &tcfg).unwrap();
    println!("{tag:<28} best@{:<3} N@10 {:.4} HR@10 {:.4} last-loss {:.3} ({:.0}s)",
        report.best_epoch, report.best_validation.ndcg_at(10), report.best_validation.hr_at(10),
        report.epochs.last().unwrap().loss, t0.elapsed().as_secs_f64());
}

#[test]
fn probe_variants() {
    run("routing d24", Integrator::DynamicRouting, ModelKind::Dymus, 24, 4, 2, 0.1, 6, 0.01, 40, 1e-4);
    run("routing d32", Integrator::DynamicRouting, ModelKind::Dymus, 32, 4, 2, 0.1, 6, 0.01, 40, 1e-4);
    run("sum     d32", Integrator::Sum, ModelKind::Dymus, 32, 4, 2, 0.1, 6, 0.01, 40, 1e-4);
    run("attn    d32", Integrator::SelfAttention, ModelKind::Dymus, 32, 4, 2, 0.1, 6, 0.01, 40, 1e-4);
    run("plus    d16", Integrator::DynamicRouting, ModelKind::DymusPlus, 16, 4, 2, 0.1, 6, 0.01, 25, 1e-4);
    run("plus    d24", Integrator::DynamicRouting, ModelKind::DymusPlus, 24, 4, 2, 0.1, 6, 0.01, 25, 1e-4);
}
