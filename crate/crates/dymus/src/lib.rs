//! Multi-behavior sequential recommenders built on capsule dynamic routing.
//!
//! The crate bundles everything needed to train and study the DyMuS family
//! of models at desk scale:
//!
//! - [`tensor`]: a minimal dense-tensor engine with reverse-mode autodiff
//!   and Adam, all in f64;
//! - [`data`]: interaction-log ingestion, filtering/truncation, leave-one-out
//!   splits, and a synthetic generator with planted cross-behavior structure;
//! - [`model`]: the per-behavior GRU encoder, candidate capsules, iterative
//!   dynamic routing, and the capsule-state dynamic GRU variant;
//! - [`train`] / [`eval`]: BCE training with early stopping, and all-item
//!   HR@k / NDCG@k ranking evaluation;
//! - [`analysis`]: ablations, routing-drift reports, item-importance case
//!   studies, and hyperparameter sweeps.

pub mod analysis;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod par;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
