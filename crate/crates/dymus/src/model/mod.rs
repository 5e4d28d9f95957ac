//! The model family: a per-behavior GRU encoder whose outputs are combined
//! by iterative dynamic routing over candidate capsules (`dymus`), a variant
//! whose encoder hidden state is itself made of capsules adjusted across
//! routing iterations (`dymus_plus`), a plain single-behavior GRU baseline,
//! and sum / self-attention integrators for ablations.

pub mod dymus;
pub mod dymus_plus;
pub mod gru;
pub mod integrators;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultiBehaviorHistory;
use crate::error::{Error, Result};
use crate::params::{Checkpoint, ParamBinding, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dymus,
    DymusPlus,
    SingleGru,
}

impl ModelKind {
    pub fn prefix(&self) -> &'static str {
        match self {
            ModelKind::Dymus => "dymus",
            ModelKind::DymusPlus => "dymus_plus",
            ModelKind::SingleGru => "single_gru",
        }
    }
}

/// How per-behavior encodings are combined into the user representation.
/// `DynamicRouting` is the real model; the others are ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    DynamicRouting,
    Sum,
    SelfAttention,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Embedding dimension D; the number of final capsules C equals D.
    pub embed_dim: usize,
    /// Capsule length L.
    pub capsule_len: usize,
    /// Routing iterations r.
    pub routing_iters: usize,
    pub behavior_count: usize,
    pub item_count: usize,
    pub dropout: f64,
    /// Most recent items kept per behavior sequence at model input.
    pub seq_cap: usize,
    pub integrator: Integrator,
}

impl ModelConfig {
    /// Number of final capsules (the efficiency design pins C = D).
    pub fn final_capsules(&self) -> usize {
        self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.capsule_len == 0 {
            return Err(Error::Config("embed_dim and capsule_len must be >= 1".into()));
        }
        if self.routing_iters < 1 {
            return Err(Error::Config("routing_iters must be >= 1".into()));
        }
        if self.behavior_count == 0 || self.item_count == 0 {
            return Err(Error::Config("behavior_count and item_count must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if self.seq_cap == 0 {
            return Err(Error::Config("seq_cap must be >= 1".into()));
        }
        if self.kind == ModelKind::SingleGru && self.integrator != Integrator::DynamicRouting {
            return Err(Error::Config("the single-GRU baseline has no integrator to ablate".into()));
        }
        Ok(())
    }
}

/// One per-iteration record of the routing internals.
#[derive(Debug, Clone)]
pub struct RoutingIteration {
    /// Logits `b` (D x C); all zeros at the first iteration.
    pub logits: Tensor,
    /// Coefficients `c` (D x C); softmax of the logits row-wise.
    pub coefficients: Tensor,
    /// Final capsules stacked as rows (C x L).
    pub capsules: Tensor,
    /// Final representation `v` (length C).
    pub representation: Tensor,
    /// Predicted item embedding `p` (length D); present when the iteration
    /// updates the logits (every iteration but the last).
    pub predicted_embedding: Option<Tensor>,
    /// Logit increment `u . r` (D x C) added for the next iteration.
    pub logit_increment: Option<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct RoutingTrace {
    pub iterations: Vec<RoutingIteration>,
}

/// Per-position new gates and the final hidden state of one dynamic GRU at
/// the last routing iteration (consumed by the item-importance analysis).
#[derive(Debug, Clone)]
pub struct BehaviorGates {
    pub new_gates: Vec<Tensor>,
    pub final_hidden: Tensor,
}

pub struct ForwardOutput {
    /// Probability over all items (softmax scores).
    pub scores: Var,
    /// The representation that scored the items (`v` for routed models, the
    /// GRU encoding for the baseline).
    pub representation: Var,
    pub trace: RoutingTrace,
    /// Final per-behavior encodings, cloned off the tape (length D for
    /// `dymus`, D x L for `dymus_plus`).
    pub encodings: Vec<Tensor>,
    /// `dymus_plus` gate capture, when requested.
    pub gates: Option<Vec<BehaviorGates>>,
    /// How many behavior-sequence encodes this forward performed.
    pub encode_calls: usize,
}

/// Per-call forward options. A `Some` dropout RNG marks training mode;
/// evaluation never applies dropout.
#[derive(Default)]
pub struct ForwardOptions<'r> {
    pub dropout_rng: Option<&'r mut ChaCha8Rng>,
    pub capture_gates: bool,
}

/// A model: its config, the behavior vocabulary (target first) and the
/// parameter store.
pub struct Model {
    pub config: ModelConfig,
    pub behavior_names: Vec<String>,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, behavior_names: Vec<String>, seed: u64) -> Result<Model> {
        config.validate()?;
        if behavior_names.len() != config.behavior_count {
            return Err(Error::Config(format!(
                "{} behavior names for behavior_count {}",
                behavior_names.len(),
                config.behavior_count
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&config, &behavior_names, &mut rng);
        Ok(Model { config, behavior_names, params })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<ParamBinding> {
        self.params.bind(tape, trainable)
    }

    /// Run the forward pass for this model's kind on one user history.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        history: &MultiBehaviorHistory,
        opts: &mut ForwardOptions,
    ) -> Result<ForwardOutput> {
        match self.config.kind {
            ModelKind::Dymus => dymus::forward(tape, binding, &self.config, &self.behavior_names, history, opts),
            ModelKind::DymusPlus => {
                dymus_plus::forward(tape, binding, &self.config, &self.behavior_names, history, opts)
            }
            ModelKind::SingleGru => {
                dymus::forward_single_gru(tape, binding, &self.config, &self.behavior_names, history, opts)
            }
        }
    }

    /// Convenience: eval-mode scores for one history as plain data.
    pub fn score(&self, history: &MultiBehaviorHistory) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false)?;
        let out = self.forward(&mut tape, &binding, history, &mut ForwardOptions::default())?;
        Ok(tape.data(out.scores).to_vec())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let model = serde_json::to_value(CheckpointMeta {
            config: self.config.clone(),
            behavior_names: self.behavior_names.clone(),
        })?;
        Ok(Checkpoint::new(model, self.params.snapshot()))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
        let meta: CheckpointMeta = serde_json::from_value(ckpt.model.clone())?;
        let mut model = Model::init(meta.config, meta.behavior_names, 0)?;
        model.params.load_values(&ckpt.params)?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    behavior_names: Vec<String>,
}

fn init_params(config: &ModelConfig, behavior_names: &[String], rng: &mut ChaCha8Rng) -> ParamStore {
    let d = config.embed_dim;
    let l = config.capsule_len;
    let c = config.final_capsules();
    let b = config.behavior_count;
    let bound = 1.0 / (d as f64).sqrt();
    let prefix = config.kind.prefix();
    let mut store = ParamStore::new();

    store.insert(
        format!("{prefix}.item_embeddings"),
        Tensor::uniform(&[config.item_count, d], bound, rng),
        true,
    );

    match config.kind {
        ModelKind::Dymus | ModelKind::SingleGru => {
            let encoded: &[String] = if config.kind == ModelKind::SingleGru {
                &behavior_names[..1]
            } else {
                behavior_names
            };
            for name in encoded {
                let base = format!("{prefix}.gru.{name}");
                for w in ["W_ir", "W_hr", "W_iz", "W_hz", "W_in", "W_hn"] {
                    store.insert(format!("{base}.{w}"), Tensor::uniform(&[d, d], bound, rng), true);
                }
                for bias in ["b_r", "b_z", "b_n"] {
                    store.insert(format!("{base}.{bias}"), Tensor::uniform(&[d], bound, rng), false);
                }
            }
        }
        ModelKind::DymusPlus => {
            for name in behavior_names {
                let base = format!("{prefix}.dyngru.{name}");
                for w in ["W_ir", "W_iz", "W_in"] {
                    store.insert(format!("{base}.{w}"), Tensor::uniform(&[d, l, d], bound, rng), true);
                }
                for w in ["W_hr", "W_hz", "W_hn", "W_cr", "W_cz", "W_cn"] {
                    store.insert(format!("{base}.{w}"), Tensor::uniform(&[d, l, l], bound, rng), true);
                }
                for bias in ["B_cr", "B_cz", "B_cn", "B_r", "B_z", "B_n"] {
                    store.insert(format!("{base}.{bias}"), Tensor::uniform(&[d, l], bound, rng), false);
                }
            }
        }
    }

    if config.kind != ModelKind::SingleGru {
        match config.integrator {
            Integrator::DynamicRouting => {
                let routing_shape: Vec<usize> = match config.kind {
                    ModelKind::Dymus => vec![d, c, l, b],
                    ModelKind::DymusPlus => vec![d, l, c, b],
                    ModelKind::SingleGru => unreachable!(),
                };
                store.insert(format!("{prefix}.routing.W"), Tensor::uniform(&routing_shape, bound, rng), true);
                store.insert(format!("{prefix}.routing.alpha"), Tensor::scalar(1.0), false);
                store.insert(format!("{prefix}.routing.w"), Tensor::ones(&[c]), true);
                store.insert(format!("{prefix}.routing.b"), Tensor::zeros(&[c]), false);
                store.insert(
                    format!("{prefix}.routing.W_coef"),
                    Tensor::uniform(&[c, l, l + d], bound, rng),
                    true,
                );
            }
            Integrator::Sum => {
                if config.kind == ModelKind::DymusPlus {
                    store.insert(format!("{prefix}.routing.w"), Tensor::ones(&[c]), true);
                    store.insert(format!("{prefix}.routing.b"), Tensor::zeros(&[c]), false);
                }
            }
            Integrator::SelfAttention => {
                let q_len = match config.kind {
                    ModelKind::Dymus => d,
                    ModelKind::DymusPlus => d * l,
                    ModelKind::SingleGru => unreachable!(),
                };
                store.insert(format!("{prefix}.integrator.query"), Tensor::uniform(&[q_len], bound, rng), true);
                if config.kind == ModelKind::DymusPlus {
                    store.insert(format!("{prefix}.routing.w"), Tensor::ones(&[c]), true);
                    store.insert(format!("{prefix}.routing.b"), Tensor::zeros(&[c]), false);
                }
            }
        }
    }
    store
}

/// Look up one item embedding row, with a range check that reports the item
/// rather than a generic shape error.
pub(crate) fn embed_item(
    tape: &mut Tape,
    item_embeddings: Var,
    item: usize,
    item_count: usize,
) -> Result<Var> {
    if item >= item_count {
        return Err(Error::ItemOutOfRange { index: item, count: item_count });
    }
    tape.slice_row(item_embeddings, item)
}

/// Inverted-dropout mask application during training; identity in eval mode
/// or when the rate is zero.
pub(crate) fn maybe_dropout(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            use rand::Rng;
            let keep = 1.0 - rate;
            let mask: Vec<f64> = (0..tape.value(x).numel())
                .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
                .collect();
            tape.dropout_mask(x, mask)
        }
        _ => Ok(x),
    }
}

/// The per-behavior input sequence after the recency cap.
pub(crate) fn capped_items(history: &MultiBehaviorHistory, behavior: usize, cap: usize) -> Vec<usize> {
    let seq = &history.sequences[behavior];
    let start = seq.len().saturating_sub(cap);
    seq[start..].iter().map(|&(item, _)| item).collect()
}
