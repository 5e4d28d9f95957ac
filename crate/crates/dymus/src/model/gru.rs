//! The per-behavior GRU cell:
//!
//! ```text
//! r_k = sigma(W_ir i_k + W_hr h_{k-1} + b_r)
//! z_k = sigma(W_iz i_k + W_hz h_{k-1} + b_z)
//! n_k = tanh(W_in i_k + r_k * (W_hn h_{k-1}) + b_n)
//! h_k = z_k * n_k + (1 - z_k) * h_{k-1},   h_0 = 0
//! ```
//!
//! The last hidden state summarizes the sequence; an empty sequence encodes
//! to the zero vector (`h_0`).

use crate::error::Result;
use crate::params::ParamBinding;
use crate::tensor::{Tape, Var};

pub struct GruVars {
    pub w_ir: Var,
    pub w_hr: Var,
    pub w_iz: Var,
    pub w_hz: Var,
    pub w_in: Var,
    pub w_hn: Var,
    pub b_r: Var,
    pub b_z: Var,
    pub b_n: Var,
}

impl GruVars {
    pub fn bind(binding: &ParamBinding, base: &str) -> Result<GruVars> {
        Ok(GruVars {
            w_ir: binding.var(&format!("{base}.W_ir"))?,
            w_hr: binding.var(&format!("{base}.W_hr"))?,
            w_iz: binding.var(&format!("{base}.W_iz"))?,
            w_hz: binding.var(&format!("{base}.W_hz"))?,
            w_in: binding.var(&format!("{base}.W_in"))?,
            w_hn: binding.var(&format!("{base}.W_hn"))?,
            b_r: binding.var(&format!("{base}.b_r"))?,
            b_z: binding.var(&format!("{base}.b_z"))?,
            b_n: binding.var(&format!("{base}.b_n"))?,
        })
    }
}

/// Encode a sequence of already-embedded items into the last hidden state.
pub fn encode(tape: &mut Tape, gru: &GruVars, inputs: &[Var], dim: usize) -> Result<Var> {
    let mut h = tape.zeros(&[dim]);
    if inputs.is_empty() {
        return Ok(h);
    }
    let ones = tape.constant(crate::tensor::Tensor::ones(&[dim]))?;
    for &input in inputs {
        h = step(tape, gru, input, h, ones)?;
    }
    Ok(h)
}

fn step(tape: &mut Tape, gru: &GruVars, input: Var, h_prev: Var, ones: Var) -> Result<Var> {
    let ri = tape.matmul(gru.w_ir, input)?;
    let rh = tape.matmul(gru.w_hr, h_prev)?;
    let r_pre = tape.add(ri, rh)?;
    let r_pre = tape.add(r_pre, gru.b_r)?;
    let r = tape.sigmoid(r_pre)?;

    let zi = tape.matmul(gru.w_iz, input)?;
    let zh = tape.matmul(gru.w_hz, h_prev)?;
    let z_pre = tape.add(zi, zh)?;
    let z_pre = tape.add(z_pre, gru.b_z)?;
    let z = tape.sigmoid(z_pre)?;

    let ni = tape.matmul(gru.w_in, input)?;
    let nh = tape.matmul(gru.w_hn, h_prev)?;
    let gated = tape.mul(r, nh)?;
    let n_pre = tape.add(ni, gated)?;
    let n_pre = tape.add(n_pre, gru.b_n)?;
    let n = tape.tanh(n_pre)?;

    let zn = tape.mul(z, n)?;
    let keep = tape.sub(ones, z)?;
    let carried = tape.mul(keep, h_prev)?;
    tape.add(zn, carried)
}
