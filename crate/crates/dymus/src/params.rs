//! Named parameter store: tensors, persistent gradient buffers, Adam state,
//! and JSON checkpoints keyed by symbol path (e.g. `dymus.gru.purchase.W_ir`).

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AdamState, Tape, Tensor, Var};

pub struct Param {
    pub tensor: Tensor,
    pub grad: Vec<f64>,
    pub grad_ready: bool,
    /// Whether L2 regularization applies (off for biases and alpha).
    pub weight_decay: bool,
    adam: Option<AdamState>,
}

/// Ordered collection of named parameters. Iteration order is insertion
/// order, which keeps training runs reproducible.
#[derive(Default)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, weight_decay: bool) {
        let numel = tensor.numel();
        self.entries.insert(
            name.into(),
            Param { tensor, grad: vec![0.0; numel], grad_ready: false, weight_decay, adam: None },
        );
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&[f64]> {
        self.entries
            .get(name)
            .map(|p| p.grad.as_slice())
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
            p.grad_ready = false;
        }
    }

    /// Add `delta` into the persistent gradient buffer of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &[f64]) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if delta.len() != p.grad.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                details: format!("{name}: {} vs {}", delta.len(), p.grad.len()),
            });
        }
        for (g, d) in p.grad.iter_mut().zip(delta) {
            *g += d;
        }
        p.grad_ready = true;
        Ok(())
    }

    /// Scale all gradient buffers (used to average over a batch).
    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Add the L2 term `2 * lambda * theta` to gradients of decayed params.
    pub fn apply_weight_decay(&mut self, lambda: f64) {
        if lambda == 0.0 {
            return;
        }
        for p in self.entries.values_mut() {
            if p.weight_decay {
                for (g, t) in p.grad.iter_mut().zip(&p.tensor.data) {
                    *g += 2.0 * lambda * t;
                }
            }
        }
    }

    /// Sum of squared values over decayed params (the L2 penalty before the
    /// lambda factor).
    pub fn l2_penalty(&self) -> f64 {
        self.entries
            .values()
            .filter(|p| p.weight_decay)
            .map(|p| p.tensor.data.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// One Adam step over every parameter; requires every gradient buffer to
    /// have been populated since the last step. Gradients are zeroed after.
    pub fn adam_step(&mut self, learning_rate: f64) -> Result<()> {
        for (name, p) in &self.entries {
            if !p.grad_ready {
                return Err(Error::MissingGrad(name.clone()));
            }
        }
        for p in self.entries.values_mut() {
            let state = p
                .adam
                .get_or_insert_with(|| AdamState::new(p.tensor.numel(), learning_rate));
            state.learning_rate = learning_rate;
            state.step(&mut p.tensor.data, &p.grad);
        }
        self.zero_grads();
        Ok(())
    }

    pub fn reset_optimizer(&mut self) {
        for p in self.entries.values_mut() {
            p.adam = None;
        }
    }

    /// Register every parameter on `tape` (in store order) as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<ParamBinding> {
        let mut vars = IndexMap::with_capacity(self.entries.len());
        for (name, p) in &self.entries {
            let var = tape.leaf(p.tensor.clone(), trainable)?;
            vars.insert(name.clone(), var);
        }
        Ok(ParamBinding { vars })
    }

    /// Deep copy of parameter values (checkpoint snapshot, no optimizer state).
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.tensor.clone()))
            .collect()
    }

    /// Overwrite parameter values from a snapshot; names and shapes must
    /// match the store exactly.
    pub fn load_values(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: checkpoint has {}, model expects {}",
                values.len(),
                self.entries.len()
            )));
        }
        for (name, p) in &mut self.entries {
            let t = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape != p.tensor.shape {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: {:?} vs {:?}",
                    t.shape, p.tensor.shape
                )));
            }
            p.tensor = t.clone();
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ParamStore`].
pub struct ParamBinding {
    vars: IndexMap<String, Var>,
}

impl ParamBinding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Pull gradients off the tape into the store. Parameters unreachable
    /// from the loss get zero gradient (and still count as populated).
    pub fn accumulate_grads(&self, tape: &Tape, store: &mut ParamStore) -> Result<()> {
        for (name, &var) in &self.vars {
            match tape.grad(var) {
                Some(g) => store.accumulate_grad(name, g)?,
                None => {
                    let p = store
                        .entries
                        .get_mut(name)
                        .ok_or_else(|| Error::UnknownParam(name.clone()))?;
                    p.grad_ready = true;
                }
            }
        }
        Ok(())
    }
}

/// On-disk checkpoint: parameter values keyed by symbol path, plus a model
/// metadata blob the caller uses to rebuild the matching architecture.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: serde_json::Value,
    pub params: BTreeMap<String, Tensor>,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(model: serde_json::Value, params: BTreeMap<String, Tensor>) -> Self {
        Checkpoint { format_version: CHECKPOINT_FORMAT_VERSION, model, params }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {}",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }
}
