#![allow(dead_code)]

pub mod fdcheck;
pub mod oracle;

use dymus::data::MultiBehaviorHistory;

/// Build a history from per-behavior item lists, time-keyed by position.
pub fn history(sequences: Vec<Vec<usize>>) -> MultiBehaviorHistory {
    MultiBehaviorHistory {
        user_index: 0,
        sequences: sequences
            .into_iter()
            .map(|items| items.into_iter().enumerate().map(|(t, i)| (i, t as i64)).collect())
            .collect(),
    }
}

pub fn behavior_names(n: usize) -> Vec<String> {
    let mut names = vec!["purchase".to_string()];
    for i in 1..n {
        names.push(format!("aux{i}"));
    }
    names
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
