//! The single declarative run config. Unknown keys are rejected everywhere;
//! artifact directories are named by content hashes of the parsed config so
//! identical configs land in identical places.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dymus::data::{SchemaConfig, SyntheticConfig};
use dymus::model::{Integrator, ModelKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { out_dir: PathBuf::from("runs") }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Log,
}

fn default_min_target() -> usize {
    5
}
fn default_recent_cap() -> usize {
    500
}
fn default_cap_scope() -> String {
    "all".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Input log path (required for `source = "log"`).
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<SchemaConfig>,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default = "default_min_target")]
    pub min_target: usize,
    #[serde(default = "default_recent_cap")]
    pub recent_cap: usize,
    /// "all": the recency cap counts interactions across behaviors;
    /// "per_behavior": each behavior sequence is capped separately.
    #[serde(default = "default_cap_scope")]
    pub recent_cap_scope: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub capsule_len: usize,
    pub routing_iters: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_seq_cap")]
    pub seq_cap: usize,
    /// Optional pin of the behavior order; must match the dataset exactly
    /// (the dataset file fixes behavior indices at prepare time).
    #[serde(default)]
    pub behavior_order: Option<Vec<String>>,
}

fn default_seq_cap() -> usize {
    50
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    #[serde(default)]
    pub l2: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    pub seed: u64,
    #[serde(default)]
    pub sliding_window: bool,
}

fn default_batch() -> usize {
    64
}
fn default_patience() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
}

fn default_ks() -> Vec<usize> {
    vec![10, 20]
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { ks: default_ks() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationEntry {
    pub integrator: Integrator,
    #[serde(default)]
    pub removed_behaviors: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default = "default_top_n")]
    pub drift_top_n: usize,
    #[serde(default = "default_sweep_lens")]
    pub sweep_capsule_lens: Vec<usize>,
    #[serde(default = "default_sweep_iters")]
    pub sweep_routing_iters: Vec<usize>,
    /// Ablation arms; when empty, a default set is used (sum,
    /// self-attention, and each single-behavior removal).
    #[serde(default)]
    pub ablations: Vec<AblationEntry>,
    /// User whose history the importance case study perturbs.
    #[serde(default)]
    pub importance_user: usize,
    /// Behavior whose last item gets replaced (defaults to the last
    /// behavior, i.e. clicks).
    #[serde(default)]
    pub importance_behavior: Option<usize>,
    /// How many most-recent target positions to report.
    #[serde(default = "default_positions")]
    pub importance_positions: usize,
    /// Parallel sweep workers; 0 means the library default.
    #[serde(default)]
    pub workers: usize,
}

fn default_top_n() -> usize {
    100
}
fn default_sweep_lens() -> Vec<usize> {
    vec![2, 4, 8, 16, 32]
}
fn default_sweep_iters() -> Vec<usize> {
    vec![1, 2, 3, 4]
}
fn default_positions() -> usize {
    5
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            drift_top_n: default_top_n(),
            sweep_capsule_lens: default_sweep_lens(),
            sweep_routing_iters: default_sweep_iters(),
            ablations: Vec::new(),
            importance_user: 0,
            importance_behavior: None,
            importance_positions: default_positions(),
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut config: RunConfig = toml::from_str(&text).context("config parse failure")?;
        if let Some(seed) = seed_override {
            config.train.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        match self.data.source {
            DataSource::Synthetic => {
                let Some(synth) = &self.data.synthetic else {
                    bail!("data.synthetic is required when data.source = \"synthetic\"");
                };
                synth.validate().map_err(|e| anyhow::anyhow!("data.synthetic: {e}"))?;
            }
            DataSource::Log => {
                if self.data.path.is_none() || self.data.schema.is_none() {
                    bail!("data.path and data.schema are required when data.source = \"log\"");
                }
                self.data
                    .schema
                    .as_ref()
                    .unwrap()
                    .behavior_names()
                    .map_err(|e| anyhow::anyhow!("data.schema: {e}"))?;
            }
        }
        if !matches!(self.data.recent_cap_scope.as_str(), "all" | "per_behavior") {
            bail!("data.recent_cap_scope must be \"all\" or \"per_behavior\"");
        }
        if self.model.embed_dim == 0 || self.model.capsule_len == 0 || self.model.routing_iters == 0 {
            bail!("model.embed_dim, model.capsule_len and model.routing_iters must be >= 1");
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            bail!("model.dropout must be in [0, 1)");
        }
        if self.train.learning_rate <= 0.0 || !self.train.learning_rate.is_finite() {
            bail!("train.learning_rate must be > 0");
        }
        if self.eval.ks.is_empty() || self.eval.ks.windows(2).any(|w| w[0] >= w[1]) {
            bail!("eval.ks must be non-empty and sorted ascending");
        }
        Ok(())
    }

    /// Behavior names of the configured data source (target first).
    pub fn behavior_names(&self) -> Result<Vec<String>> {
        match self.data.source {
            DataSource::Synthetic => Ok(self.data.synthetic.as_ref().unwrap().behavior_names()),
            DataSource::Log => Ok(self.data.schema.as_ref().unwrap().behavior_names()?),
        }
    }

    /// Content hash of the whole config; names the run directory.
    pub fn run_hash(&self) -> String {
        hash_of(&self)
    }

    /// Content hash of the data section only; names the dataset directory,
    /// so every run over the same data shares one prepared file.
    pub fn data_hash(&self) -> String {
        hash_of(&self.data)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.run.out_dir.join(format!("data-{}", self.data_hash()))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset_dir().join("dataset.jsonl")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run.out_dir.join(format!("run-{}", self.run_hash()))
    }
}

fn hash_of<T: Serialize>(value: &T) -> String {
    // Round-trip through a sorted JSON map so hashing is order-insensitive.
    let json = serde_json::to_value(value).expect("config serializes");
    let canonical = canonical_json(&json);
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    hex_prefix(&digest, 12)
}

fn canonical_json(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::Object(map) => {
            let entries: BTreeMap<&String, &serde_json::Value> = map.iter().collect();
            let inner: Vec<String> = entries
                .into_iter()
                .map(|(k, v)| format!("{}:{}", serde_json::to_string(k).unwrap(), canonical_json(v)))
                .collect();
            format!("{{{}}}", inner.join(","))
        }
        serde_json::Value::Array(items) => {
            let inner: Vec<String> = items.iter().map(canonical_json).collect();
            format!("[{}]", inner.join(","))
        }
        other => serde_json::to_string(other).unwrap(),
    }
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut out = String::new();
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
        if out.len() >= chars {
            break;
        }
    }
    out.truncate(chars);
    out
}
