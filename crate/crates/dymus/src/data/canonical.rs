use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::{Dataset, DatasetMeta, MultiBehaviorHistory};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Write the canonical dataset file: line 1 is the metadata object, then one
/// JSON object per user with its per-behavior `(item, time)` arrays. Training
/// always starts from this file, never from raw logs.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &dataset.meta)?;
    w.write_all(b"\n")?;
    for user in &dataset.users {
        serde_json::to_writer(&mut w, user)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Data(format!("cannot open dataset {}: {e}", path.display()))
    })?;
    let mut lines = BufReader::new(file).lines();
    let meta_line = lines
        .next()
        .ok_or_else(|| Error::Data("dataset file is empty".into()))??;
    let meta: DatasetMeta = serde_json::from_str(&meta_line)?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported dataset format version {}",
            meta.format_version
        )));
    }
    let mut users = Vec::with_capacity(meta.user_count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let user: MultiBehaviorHistory = serde_json::from_str(&line)?;
        if user.sequences.len() != meta.behavior_names.len() {
            return Err(Error::Data(format!(
                "user {} has {} behavior sequences, metadata says {}",
                user.user_index,
                user.sequences.len(),
                meta.behavior_names.len()
            )));
        }
        users.push(user);
    }
    if users.len() != meta.user_count {
        return Err(Error::Data(format!(
            "dataset has {} user lines, metadata says {}",
            users.len(),
            meta.user_count
        )));
    }
    Ok(Dataset { meta, users })
}
