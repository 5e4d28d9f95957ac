//! Interaction-log ingestion and the dataset protocol: per-behavior user
//! sequences, >= 5 interaction filtering on the target behavior, recency
//! truncation, leave-one-out splits, and a synthetic generator with planted
//! cross-behavior correlation.

mod canonical;
mod filter;
mod ingest;
mod split;
mod synthetic;

pub use canonical::{read_dataset, write_dataset, DATASET_FORMAT_VERSION};
pub use filter::{build_dataset, FilterOptions};
pub use ingest::{ingest_log, Columns, IngestReport, SchemaConfig};
pub use split::leave_one_out_split;
pub use synthetic::{generate_synthetic, SyntheticConfig};

use serde::{Deserialize, Serialize};

/// One row of an interaction log, after behavior-label canonicalization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    /// Canonical behavior name (e.g. "purchase", "cart", "favorite", "click").
    pub behavior: String,
    pub timestamp: i64,
    /// Input position, used to break timestamp ties stably.
    pub order: u64,
    pub category: Option<String>,
}

/// Per-user, per-behavior chronological item sequences. `sequences[b]` holds
/// `(item_index, time_key)` pairs; time keys are the per-user event rank, so
/// they are comparable across behaviors of the same user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiBehaviorHistory {
    pub user_index: usize,
    pub sequences: Vec<Vec<(usize, i64)>>,
}

impl MultiBehaviorHistory {
    pub fn empty(user_index: usize, behavior_count: usize) -> Self {
        MultiBehaviorHistory { user_index, sequences: vec![Vec::new(); behavior_count] }
    }

    pub fn items(&self, behavior: usize) -> Vec<usize> {
        self.sequences[behavior].iter().map(|&(i, _)| i).collect()
    }

    pub fn total_interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    /// Behavior index -> name; the target behavior is always index 0.
    pub behavior_names: Vec<String>,
    pub target_behavior: usize,
    pub user_count: usize,
    pub item_count: usize,
    /// Interactions per behavior, after filtering and truncation.
    pub interaction_counts: Vec<u64>,
    /// Dense user index -> external id.
    pub user_ids: Vec<String>,
    /// Dense item index -> external id.
    pub item_ids: Vec<String>,
    /// Dense item index -> dense category id, when the source had categories.
    pub item_categories: Option<Vec<u32>>,
}

/// The canonical dataset: self-describing metadata plus one history per user.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub users: Vec<MultiBehaviorHistory>,
}

impl Dataset {
    pub fn behavior_count(&self) -> usize {
        self.meta.behavior_names.len()
    }

    pub fn behavior_index(&self, name: &str) -> Option<usize> {
        self.meta.behavior_names.iter().position(|b| b == name)
    }

    /// Flatten back into interaction records (used by the fixed-point checks).
    pub fn to_records(&self) -> Vec<InteractionRecord> {
        let mut out = Vec::new();
        let mut order = 0;
        for user in &self.users {
            let mut events: Vec<(i64, usize, usize)> = Vec::new();
            for (b, seq) in user.sequences.iter().enumerate() {
                for &(item, t) in seq {
                    events.push((t, b, item));
                }
            }
            events.sort();
            for (t, b, item) in events {
                out.push(InteractionRecord {
                    user_id: self.meta.user_ids[user.user_index].clone(),
                    item_id: self.meta.item_ids[item].clone(),
                    behavior: self.meta.behavior_names[b].clone(),
                    timestamp: t,
                    order,
                    category: self
                        .meta
                        .item_categories
                        .as_ref()
                        .map(|c| format!("c{}", c[item])),
                });
                order += 1;
            }
        }
        out
    }
}

/// Train/validation/test views for the leave-one-out protocol. Indices are
/// parallel to `train` (one entry per retained user).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<MultiBehaviorHistory>,
    pub validation_item: Vec<usize>,
    pub test_item: Vec<usize>,
    /// Time key of the held-out validation interaction, per user.
    pub validation_time: Vec<i64>,
    /// Time key of the held-out test interaction, per user.
    pub test_time: Vec<i64>,
    pub item_count: usize,
    pub behavior_count: usize,
    pub user_count: usize,
    pub target_behavior: usize,
}

/// A copy of `history` with every sequence truncated to interactions
/// strictly before `cutoff` — the causal context for predicting an
/// interaction at `cutoff`.
pub fn causal_context(history: &MultiBehaviorHistory, cutoff: i64) -> MultiBehaviorHistory {
    let mut out = history.clone();
    for seq in &mut out.sequences {
        seq.retain(|&(_, t)| t < cutoff);
    }
    out
}
