//! Command implementations. Every command is rerunnable: artifacts land in
//! content-hashed directories and existing files are only replaced under
//! `--force`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use dymus::analysis::{
    hyperparameter_sweep, item_importance_change, routing_drift, run_ablation, AblationReport,
    AblationSpec, ReplaceSpec,
};
use dymus::data::{
    build_dataset, generate_synthetic, ingest_log, leave_one_out_split, read_dataset, write_dataset,
    Dataset, DatasetSplit, FilterOptions,
};
use dymus::eval::{evaluate, test_contexts, validation_contexts, MetricsReport};
use dymus::model::{Integrator, Model, ModelConfig, ModelKind};
use dymus::params::Checkpoint;
use dymus::train::{train, TrainConfig};

use crate::config::{DataSource, RunConfig};

/// Marker for problems that are config mistakes rather than runtime
/// failures; `main` maps these to exit code 2.
#[derive(Debug)]
pub struct ConfigProblem(pub String);

impl std::fmt::Display for ConfigProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigProblem {}

fn write_guarded(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!(
            "{} already exists for this config; pass --force to overwrite",
            path.display()
        );
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T, force: bool) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_guarded(path, &bytes, force)
}

fn load_prepared(config: &RunConfig) -> Result<Dataset> {
    let path = config.dataset_path();
    if !path.exists() {
        bail!(
            "prepared dataset {} not found — run `dymus prepare` with this config first",
            path.display()
        );
    }
    Ok(read_dataset(&path)?)
}

fn model_config(config: &RunConfig, dataset: &Dataset) -> Result<ModelConfig> {
    if let Some(order) = &config.model.behavior_order {
        if *order != dataset.meta.behavior_names {
            return Err(anyhow!(ConfigProblem(format!(
                "model.behavior_order {:?} does not match the dataset's behavior order {:?}",
                order, dataset.meta.behavior_names
            ))));
        }
    }
    Ok(ModelConfig {
        kind: config.model.kind,
        embed_dim: config.model.embed_dim,
        capsule_len: config.model.capsule_len,
        routing_iters: config.model.routing_iters,
        behavior_count: dataset.behavior_count(),
        item_count: dataset.meta.item_count,
        dropout: config.model.dropout,
        seq_cap: config.model.seq_cap,
        integrator: Integrator::DynamicRouting,
    })
}

fn train_config(config: &RunConfig) -> TrainConfig {
    TrainConfig {
        learning_rate: config.train.learning_rate,
        l2: config.train.l2,
        batch_size: config.train.batch_size,
        max_epochs: config.train.max_epochs,
        patience: config.train.patience,
        eval_ks: config.eval.ks.clone(),
        seed: config.train.seed,
        sliding_window: config.train.sliding_window,
    }
}

fn split_dataset(dataset: &Dataset) -> Result<DatasetSplit> {
    Ok(leave_one_out_split(dataset)?)
}

fn save_resolved_config(config: &RunConfig, dir: &Path, force: bool) -> Result<()> {
    let text = toml::to_string_pretty(config)?;
    write_guarded(&dir.join("config.toml"), text.as_bytes(), force)
}

#[derive(Serialize)]
struct DatasetStats<'a> {
    user_count: usize,
    item_count: usize,
    behavior_names: &'a [String],
    interaction_counts: &'a [u64],
}

pub fn cmd_prepare(config: &RunConfig, force: bool) -> Result<()> {
    let records = match config.data.source {
        DataSource::Synthetic => generate_synthetic(config.data.synthetic.as_ref().unwrap())?,
        DataSource::Log => {
            let path = config.data.path.as_ref().unwrap();
            let schema = config.data.schema.as_ref().unwrap();
            let (records, report) = ingest_log(path, schema)?;
            println!(
                "ingested {} rows: {} records, {} malformed, {} unknown-behavior",
                report.rows_total, report.records, report.malformed, report.unknown_behavior
            );
            records
        }
    };
    let behavior_names = config.behavior_names()?;
    let opts = FilterOptions {
        min_target: config.data.min_target,
        recent_cap: config.data.recent_cap,
        per_behavior_cap: config.data.recent_cap_scope == "per_behavior",
    };
    let dataset = build_dataset(&records, &behavior_names, &opts)?;

    let dir = config.dataset_dir();
    std::fs::create_dir_all(&dir)?;
    let path = config.dataset_path();
    if path.exists() && !force {
        bail!("{} already exists; pass --force to rebuild", path.display());
    }
    write_dataset(&dataset, &path)?;
    let stats = DatasetStats {
        user_count: dataset.meta.user_count,
        item_count: dataset.meta.item_count,
        behavior_names: &dataset.meta.behavior_names,
        interaction_counts: &dataset.meta.interaction_counts,
    };
    write_json(&dir.join("stats.json"), &stats, true)?;

    let mut table = String::new();
    writeln!(table, "#Users  {}", stats.user_count)?;
    writeln!(table, "#Items  {}", stats.item_count)?;
    for (name, count) in stats.behavior_names.iter().zip(stats.interaction_counts) {
        writeln!(table, "#{name}s  {count}")?;
    }
    print!("{table}");
    println!("dataset written to {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainMetricsFile {
    best_epoch: usize,
    stopped_early: bool,
    validation: MetricsReport,
    test: MetricsReport,
}

pub fn cmd_train(config: &RunConfig, force: bool) -> Result<()> {
    let dataset = load_prepared(config)?;
    let split = split_dataset(&dataset)?;
    let model_cfg = model_config(config, &dataset)?;
    let mut model = Model::init(model_cfg, dataset.meta.behavior_names.clone(), config.train.seed)?;
    let tcfg = train_config(config);

    let report = train(&mut model, &split, &tcfg)?;
    let contexts = test_contexts(&split);
    let test = evaluate(&model, &contexts, &split.test_item, &tcfg.eval_ks)?;

    let dir = config.run_dir();
    std::fs::create_dir_all(&dir)?;
    save_resolved_config(config, &dir, force)?;
    let ckpt = model.to_checkpoint()?;
    let ckpt_path = dir.join("checkpoint.json");
    if ckpt_path.exists() && !force {
        bail!("{} already exists; pass --force to overwrite", ckpt_path.display());
    }
    ckpt.save(&ckpt_path)?;

    let metrics = TrainMetricsFile {
        best_epoch: report.best_epoch,
        stopped_early: report.stopped_early,
        validation: report.best_validation.clone(),
        test,
    };
    write_json(&dir.join("metrics.json"), &metrics, force)?;

    let mut csv = String::from("epoch,loss,validation_ndcg10\n");
    for e in &report.epochs {
        writeln!(csv, "{},{},{}", e.epoch, e.loss, e.validation_ndcg10)?;
    }
    write_guarded(&dir.join("epochs.csv"), csv.as_bytes(), force)?;

    println!(
        "trained {:?} for {} epochs (best epoch {}); validation N@10 = {:.4}, test N@10 = {:.4}",
        config.model.kind,
        report.epochs.len(),
        report.best_epoch,
        metrics.validation.ndcg_at(10),
        metrics.test.ndcg_at(10),
    );
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn load_checkpoint_model(config: &RunConfig) -> Result<(Model, PathBuf)> {
    let dir = config.run_dir();
    let path = dir.join("checkpoint.json");
    if !path.exists() {
        bail!(
            "checkpoint {} not found — run `dymus train` with this config first",
            path.display()
        );
    }
    let ckpt = Checkpoint::load(&path)?;
    Ok((Model::from_checkpoint(&ckpt)?, dir))
}

#[derive(Serialize)]
struct EvalFile {
    validation: MetricsReport,
    test: MetricsReport,
}

pub fn cmd_eval(config: &RunConfig, force: bool) -> Result<()> {
    let dataset = load_prepared(config)?;
    let split = split_dataset(&dataset)?;
    let (model, dir) = load_checkpoint_model(config)?;

    let val_ctx = validation_contexts(&split);
    let validation = evaluate(&model, &val_ctx, &split.validation_item, &config.eval.ks)?;
    let test_ctx = test_contexts(&split);
    let test = evaluate(&model, &test_ctx, &split.test_item, &config.eval.ks)?;

    write_json(&dir.join("eval.json"), &EvalFile { validation: validation.clone(), test: test.clone() }, force)?;
    for &k in &config.eval.ks {
        println!(
            "k={k}: validation H={:.4} N={:.4} | test H={:.4} N={:.4}",
            validation.hr_at(k),
            validation.ndcg_at(k),
            test.hr_at(k),
            test.ndcg_at(k)
        );
    }
    Ok(())
}

pub fn cmd_ablate(config: &RunConfig, force: bool) -> Result<()> {
    let dataset = load_prepared(config)?;
    let split = split_dataset(&dataset)?;
    let base_cfg = model_config(config, &dataset)?;
    let tcfg = train_config(config);

    let specs: Vec<AblationSpec> = if config.analysis.ablations.is_empty() {
        let mut specs = vec![
            AblationSpec::identity(),
            AblationSpec { integrator: Integrator::Sum, removed_behaviors: vec![] },
            AblationSpec { integrator: Integrator::SelfAttention, removed_behaviors: vec![] },
        ];
        for b in 0..dataset.behavior_count() {
            specs.push(AblationSpec {
                integrator: Integrator::DynamicRouting,
                removed_behaviors: vec![b],
            });
        }
        specs
    } else {
        config
            .analysis
            .ablations
            .iter()
            .map(|a| AblationSpec {
                integrator: a.integrator,
                removed_behaviors: a.removed_behaviors.clone(),
            })
            .collect()
    };

    let mut reports: Vec<AblationReport> = Vec::new();
    for spec in &specs {
        let report = run_ablation(spec, config.model.kind, &base_cfg, &dataset.meta.behavior_names, &split, &tcfg)?;
        let removed: Vec<&str> = spec
            .removed_behaviors
            .iter()
            .map(|&b| dataset.meta.behavior_names[b].as_str())
            .collect();
        println!(
            "{:?} integrator={:?} removed={:?}: validation N@10 = {:.4}, test N@10 = {:.4}",
            config.model.kind,
            spec.integrator,
            removed,
            report.validation.ndcg_at(10),
            report.test.ndcg_at(10)
        );
        reports.push(report);
    }

    let dir = config.run_dir();
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("ablation.json"), &reports, force)?;
    println!("ablation report in {}", dir.join("ablation.json").display());
    Ok(())
}

pub fn cmd_analyze(config: &RunConfig, force: bool) -> Result<()> {
    let dataset = load_prepared(config)?;
    let split = split_dataset(&dataset)?;
    let (model, dir) = load_checkpoint_model(config)?;

    match model.config.kind {
        ModelKind::Dymus => {
            let report = routing_drift(&model, &split.train, config.analysis.drift_top_n)?;
            write_json(&dir.join("drift.json"), &report, force)?;
            let mut csv = String::from("user_index");
            for name in &report.behavior_names {
                write!(csv, ",rate_{name}")?;
            }
            csv.push_str(",total_change\n");
            for row in &report.rows {
                write!(csv, "{}", row.user_index)?;
                for rate in &row.rates {
                    write!(csv, ",{rate}")?;
                }
                writeln!(csv, ",{}", row.total_change)?;
            }
            write_guarded(&dir.join("drift.csv"), csv.as_bytes(), force)?;
            println!(
                "routing drift over {} users (top {}) written to {}",
                split.train.len(),
                report.rows.len(),
                dir.join("drift.csv").display()
            );
        }
        ModelKind::DymusPlus => {
            let user = config.analysis.importance_user;
            if user >= split.train.len() {
                return Err(anyhow!(ConfigProblem(format!(
                    "analysis.importance_user {user} out of range ({} users)",
                    split.train.len()
                ))));
            }
            let history = &split.train[user];
            let behavior = config
                .analysis
                .importance_behavior
                .unwrap_or(dataset.behavior_count() - 1);
            if behavior >= dataset.behavior_count() {
                return Err(anyhow!(ConfigProblem(format!(
                    "analysis.importance_behavior {behavior} out of range"
                ))));
            }
            let seq = &history.sequences[behavior];
            if seq.is_empty() || history.sequences[split.target_behavior].is_empty() {
                bail!("user {user} has an empty sequence on the replaced or target behavior");
            }
            let position = seq.len() - 1;
            // Replacement: an item from the same category as the user's
            // most recent target item, mirroring the planted correlation.
            let anchor = history.sequences[split.target_behavior].last().unwrap().0;
            let new_item = pick_category_neighbor(&dataset, anchor, seq[position].0);
            let replace = ReplaceSpec { behavior, position, new_item };
            let report = item_importance_change(&model, history, &replace)?;

            let tail = config.analysis.importance_positions.min(report.positions.len());
            let start = report.positions.len() - tail;
            let mut csv = String::from("position,before,after,change_rate\n");
            for i in start..report.positions.len() {
                writeln!(csv, "{},{},{},{}", report.positions[i], report.before[i], report.after[i], report.change_rates[i])?;
            }
            write_json(&dir.join("importance.json"), &report, force)?;
            write_guarded(&dir.join("importance.csv"), csv.as_bytes(), force)?;
            println!(
                "importance change for user {user} (replaced {} position {position} with item {new_item}) written to {}",
                dataset.meta.behavior_names[behavior],
                dir.join("importance.csv").display()
            );
        }
        ModelKind::SingleGru => {
            bail!("the single-GRU baseline has no routing to analyze");
        }
    }
    Ok(())
}

fn pick_category_neighbor(dataset: &Dataset, anchor: usize, original: usize) -> usize {
    match &dataset.meta.item_categories {
        Some(cats) => {
            let target_cat = cats[anchor];
            (0..dataset.meta.item_count)
                .find(|&i| cats[i] == target_cat && i != original)
                .unwrap_or(anchor)
        }
        None => anchor,
    }
}

pub fn cmd_sweep(config: &RunConfig, force: bool) -> Result<()> {
    let dataset = load_prepared(config)?;
    let split = split_dataset(&dataset)?;
    let base_cfg = model_config(config, &dataset)?;
    let tcfg = train_config(config);

    let report = dymus::par::with_workers(config.analysis.workers, || {
        hyperparameter_sweep(
            &config.analysis.sweep_capsule_lens,
            &config.analysis.sweep_routing_iters,
            config.model.kind,
            &base_cfg,
            &dataset.meta.behavior_names,
            &split,
            &tcfg,
        )
    })?;

    let dir = config.run_dir();
    std::fs::create_dir_all(&dir)?;
    let mut csv = String::from("capsule_len,routing_iters,validation_ndcg10\n");
    for cell in &report.cells {
        writeln!(csv, "{},{},{}", cell.capsule_len, cell.routing_iters, cell.validation_ndcg10)?;
        println!(
            "L={:<3} r={}: validation N@10 = {:.4} (best epoch {})",
            cell.capsule_len, cell.routing_iters, cell.validation_ndcg10, cell.best_epoch
        );
    }
    write_json(&dir.join("sweep.json"), &report, force)?;
    write_guarded(&dir.join("sweep.csv"), csv.as_bytes(), force)?;
    println!("sweep written to {}", dir.join("sweep.csv").display());
    Ok(())
}
