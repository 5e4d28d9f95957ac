use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::InteractionRecord;
use crate::error::{Error, Result};

fn default_delimiter() -> char {
    ','
}

/// Zero-based column positions in the input log.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Columns {
    pub user: usize,
    pub item: usize,
    pub behavior: usize,
    pub timestamp: usize,
    #[serde(default)]
    pub category: Option<usize>,
}

/// How to read a delimited interaction log (Taobao-style CSV by default:
/// `user,item,category,behavior,timestamp`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default)]
    pub has_header: bool,
    pub columns: Columns,
    /// Raw behavior label -> canonical behavior name. Rows whose label is
    /// absent here are skipped (and counted).
    pub behavior_map: BTreeMap<String, String>,
    pub target_behavior: String,
    /// Canonical behavior order, target first. Defaults to target first and
    /// the rest alphabetical.
    #[serde(default)]
    pub behavior_order: Option<Vec<String>>,
}

impl SchemaConfig {
    /// Canonical behavior names with the target at index 0.
    pub fn behavior_names(&self) -> Result<Vec<String>> {
        let mut canonical: Vec<String> = self.behavior_map.values().cloned().collect();
        canonical.sort();
        canonical.dedup();
        if !canonical.contains(&self.target_behavior) {
            return Err(Error::Config(format!(
                "target behavior `{}` is not produced by behavior_map",
                self.target_behavior
            )));
        }
        match &self.behavior_order {
            Some(order) => {
                let mut sorted = order.clone();
                sorted.sort();
                if sorted != canonical || order[0] != self.target_behavior {
                    return Err(Error::Config(format!(
                        "behavior_order {order:?} must list every canonical behavior exactly once, target first"
                    )));
                }
                Ok(order.clone())
            }
            None => {
                let mut names = vec![self.target_behavior.clone()];
                names.extend(canonical.into_iter().filter(|b| *b != self.target_behavior));
                Ok(names)
            }
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestReport {
    pub rows_total: usize,
    pub records: usize,
    pub malformed: usize,
    pub unknown_behavior: usize,
}

/// Parse a delimited interaction log. Malformed rows (missing columns or a
/// non-integer timestamp) are counted; more than 10% of them is treated as a
/// wrong schema and reported as an error.
pub fn ingest_log(path: &Path, schema: &SchemaConfig) -> Result<(Vec<InteractionRecord>, IngestReport)> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Data(format!("cannot open {}: {e}", path.display()))
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .has_headers(schema.has_header)
        .flexible(true)
        .from_reader(std::io::BufReader::new(file));

    let cols = &schema.columns;
    let max_col = [cols.user, cols.item, cols.behavior, cols.timestamp]
        .into_iter()
        .chain(cols.category)
        .max()
        .unwrap();

    let mut report = IngestReport::default();
    let mut records = Vec::new();
    let mut order = 0u64;
    for row in reader.records() {
        let row = row.map_err(|e| Error::Data(format!("read error in {}: {e}", path.display())))?;
        report.rows_total += 1;
        if row.len() <= max_col {
            report.malformed += 1;
            continue;
        }
        let Ok(timestamp) = row[cols.timestamp].trim().parse::<i64>() else {
            report.malformed += 1;
            continue;
        };
        let Some(behavior) = schema.behavior_map.get(row[cols.behavior].trim()) else {
            report.unknown_behavior += 1;
            continue;
        };
        records.push(InteractionRecord {
            user_id: row[cols.user].trim().to_string(),
            item_id: row[cols.item].trim().to_string(),
            behavior: behavior.clone(),
            timestamp,
            order,
            category: cols.category.map(|c| row[c].trim().to_string()),
        });
        order += 1;
        report.records += 1;
    }

    if report.rows_total > 0 && report.malformed * 10 > report.rows_total {
        return Err(Error::Data(format!(
            "{} of {} rows malformed — does the schema match the file?",
            report.malformed, report.rows_total
        )));
    }
    Ok((records, report))
}
