use std::collections::{HashMap, HashSet};

use crate::data::{Dataset, DatasetMeta, InteractionRecord, MultiBehaviorHistory, DATASET_FORMAT_VERSION};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct FilterOptions {
    /// Keep users and items with at least this many target-behavior
    /// interactions ("less than five" are dropped, i.e. keep count >= 5).
    pub min_target: usize,
    /// Keep only this many most-recent interactions per user.
    pub recent_cap: usize,
    /// Whether the cap applies per behavior sequence instead of across all
    /// behaviors of a user (the default is across all).
    pub per_behavior_cap: bool,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions { min_target: 5, recent_cap: 500, per_behavior_cap: false }
    }
}

/// Apply the dataset protocol to raw records: drop users and items with
/// fewer than `min_target` target-behavior interactions (iterated to a fixed
/// point), keep each user's `recent_cap` most recent interactions, then
/// assign dense user/item indices and build per-behavior sequences.
///
/// Truncation can push counts back under the threshold, so the whole
/// filter-then-truncate pass is itself iterated until nothing changes —
/// re-applying this function to its own output is a no-op.
pub fn build_dataset(
    records: &[InteractionRecord],
    behavior_names: &[String],
    opts: &FilterOptions,
) -> Result<Dataset> {
    if records.is_empty() {
        return Err(Error::Data("no interaction records to build a dataset from".into()));
    }
    let target = &behavior_names[0];
    let behavior_index: HashMap<&str, usize> = behavior_names
        .iter()
        .enumerate()
        .map(|(i, b)| (b.as_str(), i))
        .collect();

    // Sort key (timestamp, input order) only within each user.
    let mut retained: Vec<&InteractionRecord> = records
        .iter()
        .filter(|r| behavior_index.contains_key(r.behavior.as_str()))
        .collect();

    loop {
        let before = retained.len();
        retained = filter_pass(retained, target, opts.min_target);
        if retained.is_empty() {
            return Err(Error::Data(format!(
                "no users or items survive the >= {} target-interaction filter",
                opts.min_target
            )));
        }
        retained = truncate_pass(retained, behavior_names.len(), &behavior_index, opts);
        if retained.len() == before {
            break;
        }
    }

    // Dense indices in first-appearance order over the retained records.
    let mut user_ids: Vec<String> = Vec::new();
    let mut user_map: HashMap<&str, usize> = HashMap::new();
    let mut item_ids: Vec<String> = Vec::new();
    let mut item_map: HashMap<&str, usize> = HashMap::new();
    let mut category_ids: Vec<String> = Vec::new();
    let mut category_map: HashMap<&str, u32> = HashMap::new();
    let mut item_categories: Vec<Option<u32>> = Vec::new();
    for r in &retained {
        user_map.entry(r.user_id.as_str()).or_insert_with(|| {
            user_ids.push(r.user_id.clone());
            user_ids.len() - 1
        });
        let item = *item_map.entry(r.item_id.as_str()).or_insert_with(|| {
            item_ids.push(r.item_id.clone());
            item_categories.push(None);
            item_ids.len() - 1
        });
        if let Some(cat) = &r.category {
            let cat_id = *category_map.entry(cat.as_str()).or_insert_with(|| {
                category_ids.push(cat.clone());
                (category_ids.len() - 1) as u32
            });
            item_categories[item] = Some(cat_id);
        }
    }

    // Group per user, order by (timestamp, input order), re-key time as the
    // per-user event rank so ties stay resolved after serialization.
    let behavior_count = behavior_names.len();
    let mut users: Vec<MultiBehaviorHistory> = (0..user_ids.len())
        .map(|u| MultiBehaviorHistory::empty(u, behavior_count))
        .collect();
    let mut per_user: Vec<Vec<&InteractionRecord>> = vec![Vec::new(); user_ids.len()];
    for r in &retained {
        per_user[user_map[r.user_id.as_str()]].push(r);
    }
    let mut interaction_counts = vec![0u64; behavior_count];
    for (u, mut events) in per_user.into_iter().enumerate() {
        events.sort_by_key(|r| (r.timestamp, r.order));
        for (rank, r) in events.into_iter().enumerate() {
            let b = behavior_index[r.behavior.as_str()];
            users[u].sequences[b].push((item_map[r.item_id.as_str()], rank as i64));
            interaction_counts[b] += 1;
        }
    }

    let all_categorized = !item_categories.is_empty() && item_categories.iter().all(|c| c.is_some());
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        behavior_names: behavior_names.to_vec(),
        target_behavior: 0,
        user_count: user_ids.len(),
        item_count: item_ids.len(),
        interaction_counts,
        user_ids,
        item_ids,
        item_categories: all_categorized.then(|| item_categories.into_iter().map(Option::unwrap).collect()),
    };
    Ok(Dataset { meta, users })
}

/// Drop users then items below the target-interaction threshold, repeating
/// until neither rule removes anything.
fn filter_pass<'r>(
    mut records: Vec<&'r InteractionRecord>,
    target: &str,
    min_target: usize,
) -> Vec<&'r InteractionRecord> {
    loop {
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            if r.behavior == target {
                *user_counts.entry(r.user_id.as_str()).or_default() += 1;
            }
        }
        let keep_users: HashSet<&str> = user_counts
            .iter()
            .filter(|(_, &c)| c >= min_target)
            .map(|(&u, _)| u)
            .collect();

        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            if r.behavior == target && keep_users.contains(r.user_id.as_str()) {
                *item_counts.entry(r.item_id.as_str()).or_default() += 1;
            }
        }
        let keep_items: HashSet<&str> = item_counts
            .iter()
            .filter(|(_, &c)| c >= min_target)
            .map(|(&i, _)| i)
            .collect();

        let before = records.len();
        records.retain(|r| keep_users.contains(r.user_id.as_str()) && keep_items.contains(r.item_id.as_str()));
        if records.len() == before {
            return records;
        }
    }
}

fn truncate_pass<'r>(
    records: Vec<&'r InteractionRecord>,
    behavior_count: usize,
    behavior_index: &HashMap<&str, usize>,
    opts: &FilterOptions,
) -> Vec<&'r InteractionRecord> {
    let mut by_user: HashMap<&str, Vec<&'r InteractionRecord>> = HashMap::new();
    let mut user_order: Vec<&str> = Vec::new();
    for r in records {
        let entry = by_user.entry(r.user_id.as_str()).or_default();
        if entry.is_empty() {
            user_order.push(r.user_id.as_str());
        }
        entry.push(r);
    }
    let mut out = Vec::new();
    for u in user_order {
        let mut events = by_user.remove(u).unwrap();
        events.sort_by_key(|r| (r.timestamp, r.order));
        if opts.per_behavior_cap {
            let mut kept_counts = vec![0usize; behavior_count];
            for r in events.iter().rev() {
                let b = behavior_index[r.behavior.as_str()];
                if kept_counts[b] < opts.recent_cap {
                    kept_counts[b] += 1;
                    out.push(*r);
                }
            }
        } else if events.len() > opts.recent_cap {
            out.extend(events.split_off(events.len() - opts.recent_cap));
        } else {
            out.extend(events);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(user: &str, item: &str, behavior: &str, t: i64, order: u64) -> InteractionRecord {
        InteractionRecord {
            user_id: user.into(),
            item_id: item.into(),
            behavior: behavior.into(),
            timestamp: t,
            order,
            category: None,
        }
    }

    fn names() -> Vec<String> {
        vec!["purchase".into(), "click".into()]
    }

    /// Five users each purchasing the same five items keeps everything at the
    /// inclusive >= 5 boundary.
    #[test]
    fn boundary_counts_are_kept() {
        let mut records = Vec::new();
        let mut order = 0;
        for u in 0..5 {
            for i in 0..5 {
                records.push(rec(&format!("u{u}"), &format!("i{i}"), "purchase", i as i64, order));
                order += 1;
            }
        }
        let ds = build_dataset(&records, &names(), &FilterOptions::default()).unwrap();
        assert_eq!(ds.meta.user_count, 5);
        assert_eq!(ds.meta.item_count, 5);
    }

    #[test]
    fn user_below_threshold_is_dropped() {
        let mut records = Vec::new();
        let mut order = 0;
        // Five good users on shared items, one user with only four purchases.
        for u in 0..5 {
            for i in 0..5 {
                records.push(rec(&format!("u{u}"), &format!("i{i}"), "purchase", i as i64, order));
                order += 1;
            }
        }
        for i in 0..4 {
            records.push(rec("weak", &format!("i{i}"), "purchase", i as i64, order));
            order += 1;
        }
        let ds = build_dataset(&records, &names(), &FilterOptions::default()).unwrap();
        assert_eq!(ds.meta.user_count, 5);
        assert!(!ds.meta.user_ids.contains(&"weak".to_string()));
    }

    #[test]
    fn recent_cap_keeps_most_recent() {
        let mut records = Vec::new();
        let mut order = 0;
        for u in 0..5 {
            for i in 0..5 {
                records.push(rec(&format!("u{u}"), &format!("i{i}"), "purchase", 1000 + i as i64, order));
                order += 1;
            }
        }
        // One busy user: 5 purchases late, 595 clicks before them.
        for t in 0..595 {
            records.push(rec("busy", &format!("i{}", t % 5), "click", t, order));
            order += 1;
        }
        for i in 0..5 {
            records.push(rec("busy", &format!("i{i}"), "purchase", 1000 + i as i64, order));
            order += 1;
        }
        let opts = FilterOptions::default();
        let ds = build_dataset(&records, &names(), &opts).unwrap();
        let busy = ds
            .users
            .iter()
            .find(|u| ds.meta.user_ids[u.user_index] == "busy")
            .unwrap();
        assert_eq!(busy.total_interactions(), 500);
        // The most recent 500 of 600 events: the 5 purchases survive.
        assert_eq!(busy.sequences[0].len(), 5);
        assert_eq!(busy.sequences[1].len(), 495);
    }

    #[test]
    fn truncation_refilters_to_a_fixed_point() {
        let mut records = Vec::new();
        let mut order = 0;
        for u in 0..5 {
            for i in 0..5 {
                records.push(rec(&format!("u{u}"), &format!("i{i}"), "purchase", 1000 + i as i64, order));
                order += 1;
            }
        }
        // This user's early purchases fall off the 500-event cap, leaving
        // only 3 — the user must then be dropped entirely.
        for i in 0..5 {
            records.push(rec("edge", &format!("i{i}"), "purchase", i as i64, order));
            order += 1;
        }
        for t in 0..498 {
            records.push(rec("edge", &format!("i{}", t % 5), "click", 100 + t, order));
            order += 1;
        }
        let ds = build_dataset(&records, &names(), &FilterOptions::default()).unwrap();
        assert!(!ds.meta.user_ids.contains(&"edge".to_string()));

        // Re-applying the whole pass to its own output changes nothing.
        let again = build_dataset(&ds.to_records(), &names(), &FilterOptions::default()).unwrap();
        assert_eq!(again.meta.user_count, ds.meta.user_count);
        assert_eq!(again.meta.item_count, ds.meta.item_count);
        for (a, b) in again.users.iter().zip(&ds.users) {
            assert_eq!(a.sequences, b.sequences);
        }
    }

    #[test]
    fn indices_are_dense() {
        let mut records = Vec::new();
        let mut order = 0;
        for u in 0..6 {
            for i in 0..5 {
                records.push(rec(&format!("u{u}"), &format!("i{i}"), "purchase", i as i64, order));
                order += 1;
            }
        }
        // A rare item: purchased by only three users, so it gets dropped and
        // must leave no hole in the item index range.
        for u in 0..3 {
            records.push(rec(&format!("u{u}"), "i9", "purchase", 50, order));
            order += 1;
        }
        let ds = build_dataset(&records, &names(), &FilterOptions::default()).unwrap();
        assert_eq!(ds.meta.item_count, 5);
        let mut seen_users: Vec<usize> = ds.users.iter().map(|u| u.user_index).collect();
        seen_users.sort();
        assert_eq!(seen_users, (0..ds.meta.user_count).collect::<Vec<_>>());
        let mut max_item = 0;
        for u in &ds.users {
            for s in &u.sequences {
                for &(i, _) in s {
                    max_item = max_item.max(i);
                }
            }
        }
        assert!(max_item < ds.meta.item_count);
    }

    #[test]
    fn empty_result_is_an_error() {
        let records = vec![rec("u", "i", "purchase", 0, 0)];
        assert!(build_dataset(&records, &names(), &FilterOptions::default()).is_err());
    }
}
