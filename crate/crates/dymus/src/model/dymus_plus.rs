//! Item-level dynamic routing: each behavior is encoded by a dynamic GRU
//! whose hidden state is a D x L capsule matrix and whose input gates are
//! modulated by a per-position adjusting state. Sequences are re-encoded at
//! every routing iteration with the adjusting states refined from the
//! previous integration result, so the role of each item can shift based on
//! the other sequences.

use crate::data::MultiBehaviorHistory;
use crate::error::{Error, Result};
use crate::model::dymus::{RoutingState, RoutingVars};
use crate::model::{
    capped_items, embed_item, integrators, maybe_dropout, BehaviorGates, ForwardOptions,
    ForwardOutput, Integrator, ModelConfig, RoutingTrace,
};
use crate::params::ParamBinding;
use crate::tensor::{Tape, Tensor, Var};

/// Capsule-wise multiplication: for weights `[D, L2, L1]` and capsules
/// `[D, L1]`, row `d` of the result is `W_d h_d` — capsules never mix.
pub fn capsule_multiply(tape: &mut Tape, weights: Var, capsules: Var) -> Result<Var> {
    let ws = tape.shape(weights).to_vec();
    let hs = tape.shape(capsules).to_vec();
    if ws.len() != 3 || hs.len() != 2 || ws[0] != hs[0] || ws[2] != hs[1] {
        return Err(Error::ShapeMismatch {
            op: "capsule_multiply",
            details: format!("weights {ws:?} x capsules {hs:?}"),
        });
    }
    let col = tape.reshape(capsules, &[hs[0], hs[1], 1])?;
    let out = tape.bmm(weights, col)?;
    tape.reshape(out, &[ws[0], ws[1]])
}

/// Handles for one behavior's dynamic GRU. The input projections are bound
/// pre-flattened to `[D*L, D]` so each step is a single matrix-vector
/// product.
pub struct DynGruVars {
    w_ir_flat: Var,
    w_iz_flat: Var,
    w_in_flat: Var,
    w_hr: Var,
    w_hz: Var,
    w_hn: Var,
    w_cr: Var,
    w_cz: Var,
    w_cn: Var,
    b_cr: Var,
    b_cz: Var,
    b_cn: Var,
    b_r: Var,
    b_z: Var,
    b_n: Var,
    ones: Var,
    d: usize,
    l: usize,
}

impl DynGruVars {
    pub fn bind(tape: &mut Tape, binding: &ParamBinding, base: &str, d: usize, l: usize) -> Result<DynGruVars> {
        let flat = |tape: &mut Tape, v: Var| tape.reshape(v, &[d * l, d]);
        let w_ir = binding.var(&format!("{base}.W_ir"))?;
        let w_iz = binding.var(&format!("{base}.W_iz"))?;
        let w_in = binding.var(&format!("{base}.W_in"))?;
        Ok(DynGruVars {
            w_ir_flat: flat(tape, w_ir)?,
            w_iz_flat: flat(tape, w_iz)?,
            w_in_flat: flat(tape, w_in)?,
            w_hr: binding.var(&format!("{base}.W_hr"))?,
            w_hz: binding.var(&format!("{base}.W_hz"))?,
            w_hn: binding.var(&format!("{base}.W_hn"))?,
            w_cr: binding.var(&format!("{base}.W_cr"))?,
            w_cz: binding.var(&format!("{base}.W_cz"))?,
            w_cn: binding.var(&format!("{base}.W_cn"))?,
            b_cr: binding.var(&format!("{base}.B_cr"))?,
            b_cz: binding.var(&format!("{base}.B_cz"))?,
            b_cn: binding.var(&format!("{base}.B_cn"))?,
            b_r: binding.var(&format!("{base}.B_r"))?,
            b_z: binding.var(&format!("{base}.B_z"))?,
            b_n: binding.var(&format!("{base}.B_n"))?,
            ones: tape.constant(Tensor::ones(&[d, l]))?,
            d,
            l,
        })
    }

    /// Input projection followed by the multiplicative adjusting-state gate:
    /// `W_i* i * (W_c* (x) C_k + B_c*)`.
    fn gated_input(
        &self,
        tape: &mut Tape,
        w_i_flat: Var,
        w_c: Var,
        b_c: Var,
        input: Var,
        adjusting: Var,
    ) -> Result<Var> {
        let proj = tape.matmul(w_i_flat, input)?;
        let proj = tape.reshape(proj, &[self.d, self.l])?;
        let adj = capsule_multiply(tape, w_c, adjusting)?;
        let adj = tape.add(adj, b_c)?;
        tape.mul(proj, adj)
    }
}

/// One dynamic-GRU step; returns the next hidden state and the new gate
/// `N_k` (the update step and the importance analysis both need it).
pub fn dynamic_gru_step(
    tape: &mut Tape,
    vars: &DynGruVars,
    input: Var,
    h_prev: Var,
    adjusting: Var,
) -> Result<(Var, Var)> {
    let r_in = vars.gated_input(tape, vars.w_ir_flat, vars.w_cr, vars.b_cr, input, adjusting)?;
    let r_h = capsule_multiply(tape, vars.w_hr, h_prev)?;
    let r_pre = tape.add(r_in, r_h)?;
    let r_pre = tape.add(r_pre, vars.b_r)?;
    let r = tape.sigmoid(r_pre)?;

    let z_in = vars.gated_input(tape, vars.w_iz_flat, vars.w_cz, vars.b_cz, input, adjusting)?;
    let z_h = capsule_multiply(tape, vars.w_hz, h_prev)?;
    let z_pre = tape.add(z_in, z_h)?;
    let z_pre = tape.add(z_pre, vars.b_z)?;
    let z = tape.sigmoid(z_pre)?;

    let n_in = vars.gated_input(tape, vars.w_in_flat, vars.w_cn, vars.b_cn, input, adjusting)?;
    let n_h = capsule_multiply(tape, vars.w_hn, h_prev)?;
    let n_gated = tape.mul(r, n_h)?;
    let n_pre = tape.add(n_in, n_gated)?;
    let n_pre = tape.add(n_pre, vars.b_n)?;
    let n = tape.tanh(n_pre)?;

    let zn = tape.mul(z, n)?;
    let keep = tape.sub(vars.ones, z)?;
    let carried = tape.mul(keep, h_prev)?;
    let h = tape.add(zn, carried)?;
    Ok((h, n))
}

pub struct DynEncodeOutput {
    /// `E^b = H_{t^b}`, the last hidden state (D x L); zero for an empty
    /// sequence.
    pub encoding: Var,
    /// Per-position new gates `N_k`.
    pub new_gates: Vec<Var>,
}

/// Encode a full sequence with one adjusting-state slice per position.
pub fn dynamic_encode(
    tape: &mut Tape,
    vars: &DynGruVars,
    inputs: &[Var],
    adjusting: &[Var],
) -> Result<DynEncodeOutput> {
    if inputs.len() != adjusting.len() {
        return Err(Error::ShapeMismatch {
            op: "dynamic_encode",
            details: format!("{} inputs vs {} adjusting slices", inputs.len(), adjusting.len()),
        });
    }
    let mut h = tape.zeros(&[vars.d, vars.l]);
    let mut new_gates = Vec::with_capacity(inputs.len());
    for (&input, &adj) in inputs.iter().zip(adjusting) {
        let (next_h, n) = dynamic_gru_step(tape, vars, input, h, adj)?;
        h = next_h;
        new_gates.push(n);
    }
    Ok(DynEncodeOutput { encoding: h, new_gates })
}

/// Candidate capsules from capsule-matrix encodings:
/// `u[d][c][j] = sum_b W[d][j][c][b] * E^b[d][j]` — per-dimension,
/// per-component mixing across behaviors. Weights are `[D, L, C, B]`,
/// encodings `[D, L]` each, result `[D, C, L]`.
pub fn candidate_capsules_plus(
    tape: &mut Tape,
    routing_w: Var,
    encodings: &[Var],
    config: &ModelConfig,
) -> Result<Var> {
    let d = config.embed_dim;
    let c = config.final_capsules();
    let l = config.capsule_len;
    let b = encodings.len();
    let mut cols = Vec::with_capacity(b);
    for &e in encodings {
        cols.push(tape.reshape(e, &[d * l, 1])?);
    }
    let stacked = tape.concat(&cols, 1)?; // [D*L, B], row (d, j)
    let stacked = tape.reshape(stacked, &[d * l, b, 1])?;
    let w = tape.reshape(routing_w, &[d * l, c, b])?;
    let u = tape.bmm(w, stacked)?; // [D*L, C, 1]
    let u = tape.reshape(u, &[d, l, c])?;
    tape.swap_last2(u) // [D, C, L]
}

/// Eq.-style adjusting-state update: `C_k += N_k * r_stack`, where `r_stack`
/// stacks the integration results as rows (C x L, which is D x L since
/// C = D). Only legal between iterations.
pub fn update_adjusting_state(
    tape: &mut Tape,
    adjusting: Var,
    new_gate: Var,
    r_stack: Var,
    iteration: usize,
    total_iters: usize,
) -> Result<Var> {
    if iteration >= total_iters {
        return Err(Error::Config(format!(
            "adjusting-state update called at iteration {iteration} of {total_iters}"
        )));
    }
    let delta = tape.mul(new_gate, r_stack)?;
    tape.add(adjusting, delta)
}

pub fn forward(
    tape: &mut Tape,
    binding: &ParamBinding,
    config: &ModelConfig,
    behavior_names: &[String],
    history: &MultiBehaviorHistory,
    opts: &mut ForwardOptions,
) -> Result<ForwardOutput> {
    let prefix = config.kind.prefix();
    if history.sequences.len() != config.behavior_count {
        return Err(Error::Config(format!(
            "history has {} behaviors, model expects {}",
            history.sequences.len(),
            config.behavior_count
        )));
    }
    let d = config.embed_dim;
    let l = config.capsule_len;
    let iters = if config.integrator == Integrator::DynamicRouting { config.routing_iters } else { 1 };
    let item_embeddings = binding.var(&format!("{prefix}.item_embeddings"))?;

    // Embed once; dropout masks (inputs and encodings) are drawn once per
    // forward and reused across iterations, so no fresh randomness enters
    // the routing loop.
    let mut per_behavior_inputs = Vec::with_capacity(config.behavior_count);
    let mut gru_vars = Vec::with_capacity(config.behavior_count);
    let mut encoding_masks: Vec<Option<Vec<f64>>> = Vec::with_capacity(config.behavior_count);
    for (b, name) in behavior_names.iter().enumerate() {
        let items = capped_items(history, b, config.seq_cap);
        let mut inputs = Vec::with_capacity(items.len());
        for &item in &items {
            let e = embed_item(tape, item_embeddings, item, config.item_count)?;
            inputs.push(maybe_dropout(tape, e, config.dropout, &mut opts.dropout_rng)?);
        }
        per_behavior_inputs.push(inputs);
        gru_vars.push(DynGruVars::bind(tape, binding, &format!("{prefix}.dyngru.{name}"), d, l)?);
        let mask = match &mut opts.dropout_rng {
            Some(rng) if config.dropout > 0.0 => {
                use rand::Rng;
                let keep = 1.0 - config.dropout;
                Some((0..d * l).map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 }).collect())
            }
            _ => None,
        };
        encoding_masks.push(mask);
    }

    // Adjusting states start at zero for every behavior and position.
    let mut adjusting: Vec<Vec<Var>> = per_behavior_inputs
        .iter()
        .map(|inputs| (0..inputs.len()).map(|_| tape.zeros(&[d, l])).collect())
        .collect();

    let mut routing = RoutingState::new(tape, config);
    let routing_vars = if config.integrator == Integrator::DynamicRouting {
        Some(RoutingVars::bind(binding, prefix)?)
    } else {
        None
    };

    let mut encode_calls = 0;
    let mut v_final = None;
    let mut final_encodings: Vec<Tensor> = Vec::new();
    let mut gates_out = None;
    for iter in 1..=iters {
        let last = iter == iters;
        let mut encodings = Vec::with_capacity(config.behavior_count);
        let mut gates_iter = Vec::with_capacity(config.behavior_count);
        for b in 0..config.behavior_count {
            let out = dynamic_encode(tape, &gru_vars[b], &per_behavior_inputs[b], &adjusting[b])?;
            encode_calls += 1;
            let enc = match &encoding_masks[b] {
                Some(mask) => tape.dropout_mask(out.encoding, mask.clone())?,
                None => out.encoding,
            };
            encodings.push(enc);
            gates_iter.push(out.new_gates);
        }

        let v = match config.integrator {
            Integrator::DynamicRouting => {
                let vars = routing_vars.as_ref().unwrap();
                let routing_w = binding.var(&format!("{prefix}.routing.W"))?;
                let u = candidate_capsules_plus(tape, routing_w, &encodings, config)?;
                let phase = routing.phase(tape, u, vars, config, last)?;
                if let Some(r_stack) = phase.r_stack {
                    // One shared integration result adjusts every behavior
                    // and position; per-position variation enters via N_k.
                    for b in 0..config.behavior_count {
                        for k in 0..adjusting[b].len() {
                            adjusting[b][k] = update_adjusting_state(
                                tape,
                                adjusting[b][k],
                                gates_iter[b][k],
                                r_stack,
                                iter,
                                iters,
                            )?;
                        }
                    }
                }
                phase.v
            }
            Integrator::Sum => {
                let w = binding.var(&format!("{prefix}.routing.w"))?;
                let bb = binding.var(&format!("{prefix}.routing.b"))?;
                integrators::sum_capsules(tape, &encodings, w, bb)?
            }
            Integrator::SelfAttention => {
                let w = binding.var(&format!("{prefix}.routing.w"))?;
                let bb = binding.var(&format!("{prefix}.routing.b"))?;
                integrators::self_attention_capsules(tape, binding, prefix, &encodings, w, bb)?
            }
        };

        if last {
            v_final = Some(v);
            final_encodings = encodings.iter().map(|&e| tape.value(e).clone()).collect();
            if opts.capture_gates {
                gates_out = Some(
                    encodings
                        .iter()
                        .zip(&gates_iter)
                        .map(|(&enc, gates)| BehaviorGates {
                            new_gates: gates.iter().map(|&g| tape.value(g).clone()).collect(),
                            final_hidden: tape.value(enc).clone(),
                        })
                        .collect::<Vec<_>>(),
                );
            }
        }
    }

    let v = v_final.unwrap();
    let scores = tape.matmul(item_embeddings, v).and_then(|logits| tape.softmax(logits))?;
    Ok(ForwardOutput {
        scores,
        representation: v,
        trace: if config.integrator == Integrator::DynamicRouting { routing.trace } else { RoutingTrace::default() },
        encodings: final_encodings,
        gates: gates_out,
        encode_calls,
    })
}
