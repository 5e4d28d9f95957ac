//! Mini-batch training with the full-softmax binary cross-entropy objective,
//! Adam, L2 regularization, and early stopping on validation NDCG@10.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, MultiBehaviorHistory};
use crate::error::{Error, Result};
use crate::eval::{evaluate, validation_contexts, MetricsReport};
use crate::model::{ForwardOptions, Model};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

/// Probability clamp inside the BCE logs (softmax outputs can underflow with
/// a large item set).
pub const BCE_EPS: f64 = 1e-12;

fn default_patience() -> usize {
    10
}
fn default_eval_ks() -> Vec<usize> {
    vec![10, 20]
}
fn default_batch() -> usize {
    64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// L2 coefficient; applies to weights, not biases or alpha.
    #[serde(default)]
    pub l2: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_eval_ks")]
    pub eval_ks: Vec<usize>,
    pub seed: u64,
    /// Emit one example per target-sequence position instead of one per user.
    #[serde(default)]
    pub sliding_window: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return Err(Error::Config("batch_size and max_epochs must be >= 1".into()));
        }
        if self.eval_ks.is_empty() || self.eval_ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("eval_ks must be non-empty and sorted ascending".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() || self.l2 < 0.0 {
            return Err(Error::Config("learning_rate must be > 0 and l2 >= 0".into()));
        }
        Ok(())
    }
}

/// Early-stopping state machine: tracks the best validation metric and the
/// parameter snapshot that produced it; fires after exactly `patience`
/// consecutive non-improving epochs.
pub struct EarlyStop {
    pub patience: usize,
    pub best_metric: f64,
    pub best_epoch: usize,
    pub epochs_since_improve: usize,
    pub best_checkpoint: Option<BTreeMap<String, Tensor>>,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best_metric: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_since_improve: 0,
            best_checkpoint: None,
        }
    }

    /// Record one epoch's validation metric. Returns `true` when training
    /// should stop.
    pub fn observe(&mut self, epoch: usize, metric: f64, params: &ParamStore) -> bool {
        if metric > self.best_metric {
            self.best_metric = metric;
            self.best_epoch = epoch;
            self.epochs_since_improve = 0;
            self.best_checkpoint = Some(params.snapshot());
            false
        } else {
            self.epochs_since_improve += 1;
            self.epochs_since_improve == self.patience
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub validation_ndcg10: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Validation metrics of the restored (best) parameters, with the
    /// training loss curve attached.
    pub best_validation: MetricsReport,
    pub stopped_early: bool,
}

struct Example {
    history: MultiBehaviorHistory,
    label: usize,
}

/// One example per user: the last train-target item is the label and the
/// causally-truncated remaining history (everything strictly before the
/// label interaction) is the context. With `sliding_window`, every target
/// position becomes an example.
fn build_examples(split: &DatasetSplit, sliding_window: bool) -> Vec<Example> {
    let target = split.target_behavior;
    let mut examples = Vec::new();
    for history in &split.train {
        let tseq = history.sequences[target].clone();
        if tseq.is_empty() {
            continue;
        }
        let positions: Vec<usize> = if sliding_window {
            (0..tseq.len()).collect()
        } else {
            vec![tseq.len() - 1]
        };
        for pos in positions {
            let (label, label_time) = tseq[pos];
            examples.push(Example {
                history: crate::data::causal_context(history, label_time),
                label,
            });
        }
    }
    examples
}

/// Train `model` on the split; on return the model holds the parameters of
/// the best validation epoch.
pub fn train(model: &mut Model, split: &DatasetSplit, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let examples = build_examples(split, config.sliding_window);
    if examples.is_empty() {
        return Err(Error::Data("no training examples (all target sequences empty)".into()));
    }
    let val_contexts = validation_contexts(split);

    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e3779b97f4a7c15));
    let mut stopper = EarlyStop::new(config.patience);
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    model.params.zero_grads();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        let mut batch_count = 0usize;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let mut batch_loss = 0.0;
            for &ex_idx in batch {
                let ex = &examples[ex_idx];
                let mut tape = Tape::new();
                let binding = model.bind(&mut tape, true)?;
                let mut opts = ForwardOptions { dropout_rng: Some(&mut dropout_rng), capture_gates: false };
                let out = model.forward(&mut tape, &binding, &ex.history, &mut opts)?;
                let loss = tape.bce_loss(out.scores, ex.label, BCE_EPS)?;
                let loss_value = tape.data(loss)[0];
                if !loss_value.is_finite() {
                    return Err(Error::Diverged { epoch, batch: batch_idx });
                }
                batch_loss += loss_value;
                tape.backward(loss)?;
                binding.accumulate_grads(&tape, &mut model.params)?;
            }
            model.params.scale_grads(1.0 / batch.len() as f64);
            let penalty = model.params.l2_penalty();
            model.params.apply_weight_decay(config.l2);
            model.params.adam_step(config.learning_rate)?;
            epoch_loss += batch_loss / batch.len() as f64 + config.l2 * penalty;
            batch_count += 1;
        }
        let epoch_loss = epoch_loss / batch_count as f64;

        let report = evaluate(model, &val_contexts, &split.validation_item, &[10])?;
        let ndcg10 = report.ndcg_at(10);
        epochs.push(EpochRecord { epoch, loss: epoch_loss, validation_ndcg10: ndcg10 });
        if stopper.observe(epoch, ndcg10, &model.params) {
            stopped_early = true;
            break;
        }
    }

    if let Some(best) = &stopper.best_checkpoint {
        model.params.load_values(best)?;
    }
    let mut best_validation = evaluate(model, &val_contexts, &split.validation_item, &config.eval_ks)?;
    best_validation.epoch_losses = epochs.iter().map(|e| e.loss).collect();
    Ok(TrainReport { epochs, best_epoch: stopper.best_epoch, best_validation, stopped_early })
}
