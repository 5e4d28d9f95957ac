//! Ablation integrators that replace dynamic routing: an elementwise sum of
//! the per-behavior encodings, and single-head scaled dot-product attention
//! with a learned query over them.

use crate::error::Result;
use crate::params::ParamBinding;
use crate::tensor::{Tape, Tensor, Var};

/// `v = sum_b e^b` over vector encodings.
pub fn sum_vectors(tape: &mut Tape, encodings: &[Var]) -> Result<Var> {
    let mut acc = encodings[0];
    for &e in &encodings[1..] {
        acc = tape.add(acc, e)?;
    }
    Ok(acc)
}

/// `v = sum_b beta_b e^b` with `beta = softmax_b(q . e^b / sqrt(D))`.
pub fn self_attention_vectors(
    tape: &mut Tape,
    binding: &ParamBinding,
    prefix: &str,
    encodings: &[Var],
) -> Result<Var> {
    let query = binding.var(&format!("{prefix}.integrator.query"))?;
    let d = tape.value(query).numel();
    attention_pool(tape, query, encodings, d, (d as f64).sqrt())
}

/// Capsule-matrix sum for the dynamic-GRU variant: encodings are summed to a
/// single D x L matrix whose row lengths form the representation (the same
/// length-affine readout the routed model uses).
pub fn sum_capsules(tape: &mut Tape, encodings: &[Var], w: Var, b: Var) -> Result<Var> {
    let mut acc = encodings[0];
    for &e in &encodings[1..] {
        acc = tape.add(acc, e)?;
    }
    capsule_lengths(tape, acc, w, b)
}

/// Attention pooling over capsule-matrix encodings, queried on the flattened
/// matrices, followed by the length-affine readout.
pub fn self_attention_capsules(
    tape: &mut Tape,
    binding: &ParamBinding,
    prefix: &str,
    encodings: &[Var],
    w: Var,
    b: Var,
) -> Result<Var> {
    let query = binding.var(&format!("{prefix}.integrator.query"))?;
    let numel = tape.value(query).numel();
    let shape = tape.shape(encodings[0]).to_vec();
    let flat: Vec<Var> = encodings
        .iter()
        .map(|&e| tape.reshape(e, &[numel]))
        .collect::<Result<_>>()?;
    let pooled = attention_pool(tape, query, &flat, numel, (numel as f64).sqrt())?;
    let pooled = tape.reshape(pooled, &shape)?;
    capsule_lengths(tape, pooled, w, b)
}

fn capsule_lengths(tape: &mut Tape, capsules: Var, w: Var, b: Var) -> Result<Var> {
    let lengths = tape.l2_norm(capsules)?;
    let scaled = tape.mul(w, lengths)?;
    tape.add(scaled, b)
}

fn attention_pool(tape: &mut Tape, query: Var, encodings: &[Var], dim: usize, scale: f64) -> Result<Var> {
    let inv_scale = tape.constant(Tensor::scalar(1.0 / scale))?;
    let mut scores = Vec::with_capacity(encodings.len());
    for &e in encodings {
        let qe = tape.mul(query, e)?;
        scores.push(tape.sum_all(qe)?);
    }
    let logits = tape.concat(&scores, 0)?; // [B]
    let logits = tape.scalar_scale(inv_scale, logits)?;
    let weights = tape.softmax(logits)?;

    let rows: Vec<Var> = encodings
        .iter()
        .map(|&e| tape.reshape(e, &[1, dim]))
        .collect::<Result<_>>()?;
    let stacked = tape.concat(&rows, 0)?; // [B, dim]
    tape.matmul_t(stacked, weights, true, false) // [dim]
}
