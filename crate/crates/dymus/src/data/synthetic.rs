use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::InteractionRecord;
use crate::error::{Error, Result};

fn default_purchases() -> usize {
    10
}
fn default_clicks() -> usize {
    4
}
fn default_category_size() -> usize {
    5
}
fn default_anchor_window() -> usize {
    3
}
fn default_exact_share() -> f64 {
    0.85
}
fn default_popular_count() -> usize {
    10
}

/// Synthetic multi-behavior log with a planted click-to-purchase correlation.
///
/// Items are grouped into categories of `category_size`. Each user favors two
/// categories and clicks inside them. With probability `correlation_strength`
/// a purchase anchors on one of the `anchor_window` clicks right before it —
/// the anchor item itself (`exact_share`) or another item of its category;
/// otherwise the purchase is an uncorrelated draw from a global pool of
/// `popular_count` items. Middle behaviors (e.g. "cart") are pure noise, so
/// the click sequence is the one that carries the predictive signal.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub behaviors: usize,
    /// In `[0, 1]`: probability that a purchase follows the recent clicks.
    pub correlation_strength: f64,
    pub seed: u64,
    #[serde(default = "default_purchases")]
    pub purchases_per_user: usize,
    #[serde(default = "default_clicks")]
    pub clicks_per_purchase: usize,
    #[serde(default = "default_category_size")]
    pub category_size: usize,
    /// How many of the most recent clicks a correlated purchase anchors on.
    #[serde(default = "default_anchor_window")]
    pub anchor_window: usize,
    /// Probability a correlated purchase is the anchor item itself rather
    /// than a same-category neighbor.
    #[serde(default = "default_exact_share")]
    pub exact_share: f64,
    /// Size of the shared pool uncorrelated purchases draw from.
    #[serde(default = "default_popular_count")]
    pub popular_count: usize,
    /// Per-user probability that a middle behavior (e.g. "cart") echoes the
    /// user's recent clicks instead of being uniform noise. Which behaviors
    /// are informative then varies by user, so integration must adapt.
    #[serde(default = "default_mimic")]
    pub middle_mimic: f64,
}

fn default_mimic() -> f64 {
    0.5
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users < 1 || self.items < 10 || self.behaviors < 2 {
            return Err(Error::Config(format!(
                "synthetic config needs users >= 1, items >= 10, behaviors >= 2 (got {}, {}, {})",
                self.users, self.items, self.behaviors
            )));
        }
        if !(0.0..=1.0).contains(&self.correlation_strength) || !(0.0..=1.0).contains(&self.exact_share) {
            return Err(Error::Config("correlation_strength and exact_share must be in [0, 1]".into()));
        }
        if self.purchases_per_user < 5 {
            return Err(Error::Config("purchases_per_user must be >= 5".into()));
        }
        if self.anchor_window == 0 || self.anchor_window > self.clicks_per_purchase {
            return Err(Error::Config("anchor_window must be in [1, clicks_per_purchase]".into()));
        }
        if self.popular_count == 0 || self.popular_count > self.items {
            return Err(Error::Config("popular_count must be in [1, items]".into()));
        }
        if !(0.0..=1.0).contains(&self.middle_mimic) {
            return Err(Error::Config("middle_mimic must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Behavior names for this config, target ("purchase") first, with
    /// "click" as the correlated behavior at the end.
    pub fn behavior_names(&self) -> Vec<String> {
        let mut names = vec!["purchase".to_string()];
        let middles = ["cart", "favorite"];
        for m in 0..self.behaviors.saturating_sub(2) {
            match middles.get(m) {
                Some(n) => names.push((*n).to_string()),
                None => names.push(format!("aux{m}")),
            }
        }
        names.push("click".to_string());
        names
    }
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<InteractionRecord>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let names = config.behavior_names();
    let n_cat = config.items.div_ceil(config.category_size);
    let category_of = |item: usize| item / config.category_size;
    let items_in = |cat: usize| {
        let lo = cat * config.category_size;
        let hi = ((cat + 1) * config.category_size).min(config.items);
        lo..hi
    };

    let mut records = Vec::new();
    let mut order = 0u64;
    for user in 0..config.users {
        // Two favorite categories dominate this user's clicks.
        let fav_a = rng.gen_range(0..n_cat);
        let fav_b = (fav_a + 1 + rng.gen_range(0..n_cat.saturating_sub(1).max(1))) % n_cat;
        let mut weights: Vec<f64> = vec![1.0; n_cat];
        weights[fav_a] = 10.0;
        weights[fav_b] = 6.0;
        let total: f64 = weights.iter().sum();

        let sample_click = |rng: &mut ChaCha8Rng| {
            let mut x = rng.gen_range(0.0..total);
            let mut cat = n_cat - 1;
            for (c, &w) in weights.iter().enumerate() {
                if x < w {
                    cat = c;
                    break;
                }
                x -= w;
            }
            let range = items_in(cat);
            rng.gen_range(range.start..range.end)
        };

        let mut t = 0i64;
        let push = |behavior: usize, item: usize, t: &mut i64, order: &mut u64, records: &mut Vec<InteractionRecord>| {
            records.push(InteractionRecord {
                user_id: format!("u{user}"),
                item_id: format!("i{item}"),
                behavior: names[behavior].clone(),
                timestamp: *t,
                order: *order,
                category: Some(format!("c{}", category_of(item))),
            });
            *t += 1;
            *order += 1;
        };

        let click_behavior = names.len() - 1;
        // Which middle behaviors echo this user's clicks.
        let mimics: Vec<bool> = (1..click_behavior)
            .map(|_| rng.gen_bool(config.middle_mimic))
            .collect();
        for _ in 0..config.purchases_per_user {
            let mut recent_clicks = Vec::with_capacity(config.clicks_per_purchase);
            for _ in 0..config.clicks_per_purchase {
                let item = sample_click(&mut rng);
                recent_clicks.push(item);
                push(click_behavior, item, &mut t, &mut order, &mut records);
            }
            for b in 1..click_behavior {
                let item = if mimics[b - 1] {
                    recent_clicks[rng.gen_range(0..recent_clicks.len())]
                } else {
                    rng.gen_range(0..config.items)
                };
                push(b, item, &mut t, &mut order, &mut records);
            }
            let purchase = if rng.gen_bool(config.correlation_strength) {
                let window = config.anchor_window.min(recent_clicks.len());
                let anchor = recent_clicks[recent_clicks.len() - 1 - rng.gen_range(0..window)];
                if rng.gen_bool(config.exact_share) {
                    anchor
                } else {
                    let range = items_in(category_of(anchor));
                    rng.gen_range(range.start..range.end)
                }
            } else {
                rng.gen_range(0..config.popular_count)
            };
            push(0, purchase, &mut t, &mut order, &mut records);
        }
    }
    Ok(records)
}
