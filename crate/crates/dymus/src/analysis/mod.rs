//! Model-behavior analyses: integrator/behavior ablations, routing
//! weight-drift reports across iterations, the item-importance case study
//! for the dynamic GRU, and (L, r) hyperparameter sweeps.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, MultiBehaviorHistory};
use crate::error::{Error, Result};
use crate::eval::{evaluate, test_contexts, MetricsReport};
use crate::model::{ForwardOptions, Integrator, Model, ModelConfig, ModelKind};
use crate::par;
use crate::tensor::{Tape, Tensor};
use crate::train::{train, TrainConfig, TrainReport};

/// One ablation arm: which integrator combines the behavior encodings, and
/// which behaviors are blanked out at model input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSpec {
    pub integrator: Integrator,
    #[serde(default)]
    pub removed_behaviors: Vec<usize>,
}

impl AblationSpec {
    pub fn identity() -> Self {
        AblationSpec { integrator: Integrator::DynamicRouting, removed_behaviors: Vec::new() }
    }

    pub fn validate(&self, behavior_count: usize) -> Result<()> {
        let mut removed = self.removed_behaviors.clone();
        removed.sort();
        removed.dedup();
        if removed.len() >= behavior_count {
            return Err(Error::Config("cannot remove every behavior".into()));
        }
        if removed.iter().any(|&b| b >= behavior_count) {
            return Err(Error::Config(format!(
                "removed behavior out of range (behavior count {behavior_count})"
            )));
        }
        Ok(())
    }
}

/// Blank the removed behaviors' sequences (they encode to the zero vector).
pub fn apply_removal(split: &DatasetSplit, removed: &[usize]) -> DatasetSplit {
    let mut out = split.clone();
    for history in &mut out.train {
        for &b in removed {
            history.sequences[b].clear();
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub spec: AblationSpec,
    pub model_kind: ModelKind,
    pub validation: MetricsReport,
    pub test: MetricsReport,
    pub best_epoch: usize,
}

/// Train and evaluate one ablation arm under the shared protocol. The
/// identity spec (dynamic routing, nothing removed) reproduces the unablated
/// pipeline exactly.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    spec: &AblationSpec,
    model_kind: ModelKind,
    base_config: &ModelConfig,
    behavior_names: &[String],
    split: &DatasetSplit,
    train_config: &TrainConfig,
) -> Result<AblationReport> {
    spec.validate(split.behavior_count)?;
    let mut config = base_config.clone();
    config.kind = model_kind;
    config.integrator = spec.integrator;
    let ablated = apply_removal(split, &spec.removed_behaviors);
    let mut model = Model::init(config, behavior_names.to_vec(), train_config.seed)?;
    let report = train(&mut model, &ablated, train_config)?;
    let contexts = test_contexts(&ablated);
    let test = evaluate(&model, &contexts, &ablated.test_item, &train_config.eval_ks)?;
    Ok(AblationReport {
        spec: spec.clone(),
        model_kind,
        validation: report.best_validation,
        test,
        best_epoch: report.best_epoch,
    })
}

/// Per-user rate of change of the per-behavior routing influence between
/// the first and last iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftRow {
    pub user_index: usize,
    /// One rate per behavior: `(w_r - w_1) / w_1`.
    pub rates: Vec<f64>,
    pub total_change: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftReport {
    pub rows: Vec<DriftRow>,
    pub behavior_names: Vec<String>,
    pub iterations: usize,
}

/// Routing influence of behavior `b` on the first final capsule at one
/// iteration: `sum_d c[d][0] * |e^b_d| * ||W_{d0}[:, b]||` — the
/// coefficient-weighted norm of that behavior's contribution to each
/// candidate. Only the coefficients vary across iterations, so this is the
/// per-iteration quantity whose change the drift report measures.
#[allow(clippy::too_many_arguments)]
fn behavior_influence(
    coefficients: &Tensor,
    encodings: &[Tensor],
    routing_w: &Tensor,
    d: usize,
    c: usize,
    l: usize,
    behavior_count: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; behavior_count];
    for (b, out_b) in out.iter_mut().enumerate() {
        for dd in 0..d {
            let coeff = coefficients.data[dd * c]; // final capsule index 0
            let col_norm: f64 = (0..l)
                .map(|j| {
                    let w = routing_w.data[((dd * c) * l + j) * behavior_count + b];
                    w * w
                })
                .sum::<f64>()
                .sqrt();
            *out_b += coeff * encodings[b].data[dd].abs() * col_norm;
        }
    }
    out
}

/// Rates of change of per-behavior routing weights between iteration 1 and
/// iteration r for each user, sorted by total absolute change descending.
/// Defined for the routed sequence-level model with `r >= 2`.
pub fn routing_drift(
    model: &Model,
    users: &[MultiBehaviorHistory],
    top_n: usize,
) -> Result<DriftReport> {
    if model.config.kind != ModelKind::Dymus || model.config.integrator != Integrator::DynamicRouting {
        return Err(Error::Config("routing drift is defined for the routed sequence-level model".into()));
    }
    let r = model.config.routing_iters;
    if r < 2 {
        return Err(Error::Config("routing drift needs at least two iterations".into()));
    }
    let (d, c, l) = (model.config.embed_dim, model.config.final_capsules(), model.config.capsule_len);
    let b = model.config.behavior_count;
    let routing_w = model.params.get("dymus.routing.W")?.clone();

    let rows = par::par_map(users, |history| -> Result<DriftRow> {
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false)?;
        let out = model.forward(&mut tape, &binding, history, &mut ForwardOptions::default())?;
        let first = &out.trace.iterations[0];
        let last = &out.trace.iterations[r - 1];
        let w1 = behavior_influence(&first.coefficients, &out.encodings, &routing_w, d, c, l, b);
        let wr = behavior_influence(&last.coefficients, &out.encodings, &routing_w, d, c, l, b);
        let rates: Vec<f64> = w1
            .iter()
            .zip(&wr)
            .map(|(&a, &z)| if a.abs() < 1e-12 { 0.0 } else { (z - a) / a })
            .collect();
        let total_change = rates.iter().map(|x| x.abs()).sum();
        Ok(DriftRow { user_index: history.user_index, rates, total_change })
    });
    let mut rows: Vec<DriftRow> = rows.into_iter().collect::<Result<_>>()?;
    rows.sort_by(|a, b| {
        b.total_change
            .partial_cmp(&a.total_change)
            .unwrap()
            .then(a.user_index.cmp(&b.user_index))
    });
    rows.truncate(top_n);
    Ok(DriftReport { rows, behavior_names: model.behavior_names.clone(), iterations: r })
}

/// Replace one item of one behavior sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplaceSpec {
    pub behavior: usize,
    /// Position within the stored sequence.
    pub position: usize,
    pub new_item: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceReport {
    /// Target-behavior positions, oldest first.
    pub positions: Vec<usize>,
    /// Cosine similarity between each position's new gate and the final
    /// hidden state, before the replacement.
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    /// `(after - before) / |before|` per position.
    pub change_rates: Vec<f64>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + 1e-12)
}

/// How the importance of each target-behavior item (cosine between its new
/// gate and the final hidden state) changes when one item elsewhere is
/// replaced. Defined for the item-level model with `r >= 2`.
pub fn item_importance_change(
    model: &Model,
    history: &MultiBehaviorHistory,
    replace: &ReplaceSpec,
) -> Result<ImportanceReport> {
    if model.config.kind != ModelKind::DymusPlus {
        return Err(Error::Config("item importance is defined for the item-level model".into()));
    }
    if model.config.routing_iters < 2 {
        return Err(Error::Config("item importance needs at least two routing iterations".into()));
    }
    if replace.behavior >= history.sequences.len()
        || replace.position >= history.sequences[replace.behavior].len()
    {
        return Err(Error::Config(format!(
            "replacement position {} out of range for behavior {}",
            replace.position, replace.behavior
        )));
    }
    if replace.new_item >= model.config.item_count {
        return Err(Error::ItemOutOfRange { index: replace.new_item, count: model.config.item_count });
    }

    let gate_similarities = |h: &MultiBehaviorHistory| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false)?;
        let mut opts = ForwardOptions { dropout_rng: None, capture_gates: true };
        let out = model.forward(&mut tape, &binding, h, &mut opts)?;
        let gates = &out.gates.as_ref().unwrap()[0]; // target behavior
        Ok(gates
            .new_gates
            .iter()
            .map(|n| cosine(&n.data, &gates.final_hidden.data))
            .collect())
    };

    let before = gate_similarities(history)?;
    let mut replaced = history.clone();
    replaced.sequences[replace.behavior][replace.position].0 = replace.new_item;
    let after = gate_similarities(&replaced)?;

    let change_rates: Vec<f64> = before
        .iter()
        .zip(&after)
        .map(|(&b, &a)| if b.abs() < 1e-12 { 0.0 } else { (a - b) / b.abs() })
        .collect();
    Ok(ImportanceReport { positions: (0..before.len()).collect(), before, after, change_rates })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub capsule_len: usize,
    pub routing_iters: usize,
    pub validation_ndcg10: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
}

/// Train one model per (L, r) combination under a shared seed and epoch
/// budget; cells run in parallel.
#[allow(clippy::too_many_arguments)]
pub fn hyperparameter_sweep(
    capsule_lens: &[usize],
    routing_iters: &[usize],
    model_kind: ModelKind,
    base_config: &ModelConfig,
    behavior_names: &[String],
    split: &DatasetSplit,
    train_config: &TrainConfig,
) -> Result<SweepReport> {
    if capsule_lens.is_empty() || routing_iters.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut grid = Vec::new();
    for &l in capsule_lens {
        for &r in routing_iters {
            grid.push((l, r));
        }
    }
    let cells = par::par_map(&grid, |&(l, r)| -> Result<SweepCell> {
        let mut config = base_config.clone();
        config.kind = model_kind;
        config.capsule_len = l;
        config.routing_iters = r;
        let mut model = Model::init(config, behavior_names.to_vec(), train_config.seed)?;
        let report: TrainReport = train(&mut model, split, train_config)?;
        Ok(SweepCell {
            capsule_len: l,
            routing_iters: r,
            validation_ndcg10: report.best_validation.ndcg_at(10),
            best_epoch: report.best_epoch,
        })
    });
    let cells: Vec<SweepCell> = cells.into_iter().collect::<Result<_>>()?;
    Ok(SweepReport { cells })
}
