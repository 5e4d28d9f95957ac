//! All-item ranking evaluation: the held-out item is ranked against every
//! item (train items included), and HR@k / NDCG@k are averaged over users.
//! Users are scored in parallel; the reduction order is fixed, so results
//! are bitwise reproducible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, MultiBehaviorHistory};
use crate::error::Result;
use crate::model::Model;
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    /// Per-epoch training losses, when this report comes out of a training
    /// run (empty for standalone evaluations).
    pub epoch_losses: Vec<f64>,
    pub user_count: usize,
}

impl MetricsReport {
    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(0.0)
    }

    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(0.0)
    }
}

/// 1-based rank of `item` under descending score, ties broken by item index
/// ascending (the tied item with the smaller index ranks first).
pub fn rank_of(scores: &[f64], item: usize) -> usize {
    let target = scores[item];
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate() {
        if i == item {
            continue;
        }
        if s > target || (s == target && i < item) {
            rank += 1;
        }
    }
    rank
}

/// Discounted gain of a single relevant item at `rank` under cutoff `k`.
pub fn ndcg_gain(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn metrics_from_ranks(ranks: &[usize], ks: &[usize]) -> MetricsReport {
    let n = ranks.len().max(1) as f64;
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        let hits = ranks.iter().filter(|&&r| r <= k).count() as f64;
        let gain: f64 = ranks.iter().map(|&r| ndcg_gain(r, k)).sum();
        hr.insert(k, hits / n);
        ndcg.insert(k, gain / n);
    }
    MetricsReport { hr, ndcg, epoch_losses: Vec::new(), user_count: ranks.len() }
}

/// Rank one held-out item per user context and aggregate.
pub fn evaluate(
    model: &Model,
    contexts: &[MultiBehaviorHistory],
    targets: &[usize],
    ks: &[usize],
) -> Result<MetricsReport> {
    let pairs: Vec<(&MultiBehaviorHistory, usize)> =
        contexts.iter().zip(targets.iter().copied()).collect();
    let ranks = par::par_map(&pairs, |&(history, target)| -> Result<usize> {
        let scores = model.score(history)?;
        Ok(rank_of(&scores, target))
    });
    let ranks: Vec<usize> = ranks.into_iter().collect::<Result<_>>()?;
    Ok(metrics_from_ranks(&ranks, ks))
}

/// Always-sequential twin of [`evaluate`], kept for benchmarking the
/// parallel path against.
pub fn evaluate_sequential(
    model: &Model,
    contexts: &[MultiBehaviorHistory],
    targets: &[usize],
    ks: &[usize],
) -> Result<MetricsReport> {
    let pairs: Vec<(&MultiBehaviorHistory, usize)> =
        contexts.iter().zip(targets.iter().copied()).collect();
    let ranks = par::seq_map(&pairs, |&(history, target)| -> Result<usize> {
        let scores = model.score(history)?;
        Ok(rank_of(&scores, target))
    });
    let ranks: Vec<usize> = ranks.into_iter().collect::<Result<_>>()?;
    Ok(metrics_from_ranks(&ranks, ks))
}

/// Contexts for scoring the validation item: the training history truncated
/// to interactions strictly before the validation interaction.
pub fn validation_contexts(split: &DatasetSplit) -> Vec<MultiBehaviorHistory> {
    split
        .train
        .iter()
        .enumerate()
        .map(|(u, history)| crate::data::causal_context(history, split.validation_time[u]))
        .collect()
}

/// Contexts for scoring the test item: everything strictly before the test
/// interaction, with the validation interaction back in the target sequence
/// (it precedes the test item chronologically).
pub fn test_contexts(split: &DatasetSplit) -> Vec<MultiBehaviorHistory> {
    split
        .train
        .iter()
        .enumerate()
        .map(|(u, history)| {
            let mut h = crate::data::causal_context(history, split.test_time[u]);
            h.sequences[split.target_behavior].push((split.validation_item[u], split.validation_time[u]));
            h.sequences[split.target_behavior].sort_by_key(|&(_, t)| t);
            h
        })
        .collect()
}
