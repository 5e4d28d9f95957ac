//! Sequence-level dynamic routing: per-behavior GRU encodings are sliced
//! per embedding dimension into primary capsules, mapped to candidate
//! capsules, and integrated by softmax-routed coefficients that are refined
//! over `r` iterations against the integration result.

use crate::data::MultiBehaviorHistory;
use crate::error::{Error, Result};
use crate::model::gru::{self, GruVars};
use crate::model::{
    capped_items, embed_item, integrators, maybe_dropout, ForwardOptions, ForwardOutput, Integrator,
    ModelConfig, RoutingIteration, RoutingTrace,
};
use crate::params::ParamBinding;
use crate::tensor::{Tape, Var};

/// Candidate capsules `u[d][c] = W_dc . [e^1_d .. e^B_d]` for all `d, c` at
/// once: `[D, C, L]` from routing weights `[D, C, L, B]` and `B` encodings
/// of length `D`.
pub fn candidate_capsules(
    tape: &mut Tape,
    routing_w: Var,
    encodings: &[Var],
    config: &ModelConfig,
) -> Result<Var> {
    let d = config.embed_dim;
    let c = config.final_capsules();
    let l = config.capsule_len;
    let b = encodings.len();
    let mut rows = Vec::with_capacity(b);
    for &e in encodings {
        rows.push(tape.reshape(e, &[1, d])?);
    }
    let stacked = tape.concat(&rows, 0)?; // [B, D]
    let primary = tape.transpose(stacked)?; // [D, B]: row d is the d-th primary capsule
    let primary = tape.reshape(primary, &[d, b, 1])?;
    let w = tape.reshape(routing_w, &[d, c * l, b])?;
    let u = tape.bmm(w, primary)?; // [D, C*L, 1]
    tape.reshape(u, &[d, c, l])
}

/// Parameter handles shared by every routing phase.
pub struct RoutingVars {
    pub alpha: Var,
    pub w: Var,
    pub b: Var,
    pub w_coef: Var,
    pub item_embeddings: Var,
}

impl RoutingVars {
    pub fn bind(binding: &ParamBinding, prefix: &str) -> Result<RoutingVars> {
        Ok(RoutingVars {
            alpha: binding.var(&format!("{prefix}.routing.alpha"))?,
            w: binding.var(&format!("{prefix}.routing.w"))?,
            b: binding.var(&format!("{prefix}.routing.b"))?,
            w_coef: binding.var(&format!("{prefix}.routing.W_coef"))?,
            item_embeddings: binding.var(&format!("{prefix}.item_embeddings"))?,
        })
    }
}

/// One iteration's outputs that later stages consume.
pub struct PhaseOutput {
    /// Final representation `v` (length C).
    pub v: Var,
    /// Integration results `r_c` stacked as rows (C x L); present when the
    /// logits were updated (i.e. this was not the last iteration).
    pub r_stack: Option<Var>,
}

/// Carries the routing logits across iterations. The logits start at zero,
/// so the first iteration integrates every candidate equally, and they are
/// cumulative: `b^(l+1) = b^(l) + u . r`.
pub struct RoutingState {
    logits: Var,
    pub trace: RoutingTrace,
}

impl RoutingState {
    pub fn new(tape: &mut Tape, config: &ModelConfig) -> Self {
        let logits = tape.zeros(&[config.embed_dim, config.final_capsules()]);
        RoutingState { logits, trace: RoutingTrace::default() }
    }

    /// Run one routing phase against candidates `u` (`[D, C, L]`); updates
    /// the logits unless this is the last iteration.
    pub fn phase(
        &mut self,
        tape: &mut Tape,
        u: Var,
        vars: &RoutingVars,
        config: &ModelConfig,
        last: bool,
    ) -> Result<PhaseOutput> {
        let d = config.embed_dim;
        let c = config.final_capsules();
        let l = config.capsule_len;

        let coeff = tape.softmax(self.logits)?; // [D, C], rows sum to 1
        let coeff_l = tape.repeat_last(coeff, l)?; // [D, C, L]
        let weighted = tape.mul(u, coeff_l)?;
        let summed = tape.sum_axis(weighted, 0)?; // [C, L]
        let capsules = tape.scalar_scale(vars.alpha, summed)?;

        let lengths = tape.l2_norm(capsules)?; // [C]
        let scaled = tape.mul(vars.w, lengths)?;
        let v = tape.add(scaled, vars.b)?;

        let mut record = RoutingIteration {
            logits: tape.value(self.logits).clone(),
            coefficients: tape.value(coeff).clone(),
            capsules: tape.value(capsules).clone(),
            representation: tape.value(v).clone(),
            predicted_embedding: None,
            logit_increment: None,
        };

        let r_stack = if last {
            None
        } else {
            // Predicted item embedding from the current representation.
            let item_logits = tape.matmul(vars.item_embeddings, v)?; // [I]
            let item_probs = tape.softmax(item_logits)?;
            let p = tape.matmul_t(vars.item_embeddings, item_probs, true, false)?; // [D]

            let p_rows = tape.repeat_first(p, c)?; // [C, D]
            let cat = tape.concat(&[capsules, p_rows], 1)?; // [C, L + D]
            let cat3 = tape.reshape(cat, &[c, l + d, 1])?;
            let r_raw = tape.bmm(vars.w_coef, cat3)?; // [C, L, 1]
            let r_stack = tape.reshape(r_raw, &[c, l])?;

            let r_rows = tape.repeat_first(r_stack, d)?; // [D, C, L]
            let agreement = tape.mul(u, r_rows)?;
            let increment = tape.sum_axis(agreement, 2)?; // [D, C]
            record.predicted_embedding = Some(tape.value(p).clone());
            record.logit_increment = Some(tape.value(increment).clone());
            self.logits = tape.add(self.logits, increment)?;
            Some(r_stack)
        };

        self.trace.iterations.push(record);
        Ok(PhaseOutput { v, r_stack })
    }
}

/// Full routing over fixed candidates: `r` phases, returning the final
/// representation and the per-iteration trace.
pub fn route(
    tape: &mut Tape,
    u: Var,
    vars: &RoutingVars,
    config: &ModelConfig,
    iters: usize,
) -> Result<(Var, RoutingTrace)> {
    if iters < 1 {
        return Err(Error::Config("routing needs at least one iteration".into()));
    }
    let mut state = RoutingState::new(tape, config);
    let mut v = None;
    for l in 1..=iters {
        let out = state.phase(tape, u, vars, config, l == iters)?;
        v = Some(out.v);
    }
    Ok((v.unwrap(), state.trace))
}

/// All-item scores: softmax over `v . i_i`.
pub fn score_items(tape: &mut Tape, v: Var, item_embeddings: Var) -> Result<Var> {
    let logits = tape.matmul(item_embeddings, v)?;
    tape.softmax(logits)
}

/// Embed one behavior sequence (capped, with dropout in training mode) and
/// run it through that behavior's GRU.
#[allow(clippy::too_many_arguments)]
fn encode_behavior(
    tape: &mut Tape,
    binding: &ParamBinding,
    config: &ModelConfig,
    prefix: &str,
    behavior_name: &str,
    items: &[usize],
    item_embeddings: Var,
    opts: &mut ForwardOptions,
) -> Result<Var> {
    let gru_vars = GruVars::bind(binding, &format!("{prefix}.gru.{behavior_name}"))?;
    let mut inputs = Vec::with_capacity(items.len());
    for &item in items {
        let e = embed_item(tape, item_embeddings, item, config.item_count)?;
        inputs.push(maybe_dropout(tape, e, config.dropout, &mut opts.dropout_rng)?);
    }
    let encoded = gru::encode(tape, &gru_vars, &inputs, config.embed_dim)?;
    maybe_dropout(tape, encoded, config.dropout, &mut opts.dropout_rng)
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
    let item_embeddings = binding.var(&format!("{prefix}.item_embeddings"))?;

    let mut encodings = Vec::with_capacity(config.behavior_count);
    for (b, name) in behavior_names.iter().enumerate() {
        let items = capped_items(history, b, config.seq_cap);
        let e = if items.is_empty() {
            tape.zeros(&[config.embed_dim])
        } else {
            encode_behavior(tape, binding, config, prefix, name, &items, item_embeddings, opts)?
        };
        encodings.push(e);
    }
    let encode_calls = config.behavior_count;

    let (v, trace) = match config.integrator {
        Integrator::DynamicRouting => {
            let routing_w = binding.var(&format!("{prefix}.routing.W"))?;
            let vars = RoutingVars::bind(binding, prefix)?;
            let u = candidate_capsules(tape, routing_w, &encodings, config)?;
            route(tape, u, &vars, config, config.routing_iters)?
        }
        Integrator::Sum => (integrators::sum_vectors(tape, &encodings)?, RoutingTrace::default()),
        Integrator::SelfAttention => (
            integrators::self_attention_vectors(tape, binding, prefix, &encodings)?,
            RoutingTrace::default(),
        ),
    };

    let scores = score_items(tape, v, item_embeddings)?;
    Ok(ForwardOutput {
        scores,
        representation: v,
        trace,
        encodings: encodings.iter().map(|&e| tape.value(e).clone()).collect(),
        gates: None,
        encode_calls,
    })
}

/// The single-behavior baseline: the target GRU encoding scores items
/// directly, no capsules or routing involved.
pub fn forward_single_gru(
    tape: &mut Tape,
    binding: &ParamBinding,
    config: &ModelConfig,
    behavior_names: &[String],
    history: &MultiBehaviorHistory,
    opts: &mut ForwardOptions,
) -> Result<ForwardOutput> {
    let prefix = config.kind.prefix();
    let item_embeddings = binding.var(&format!("{prefix}.item_embeddings"))?;
    let items = capped_items(history, 0, config.seq_cap);
    let e = if items.is_empty() {
        tape.zeros(&[config.embed_dim])
    } else {
        encode_behavior(tape, binding, config, prefix, &behavior_names[0], &items, item_embeddings, opts)?
    };
    let scores = score_items(tape, e, item_embeddings)?;
    Ok(ForwardOutput {
        scores,
        representation: e,
        trace: RoutingTrace::default(),
        encodings: vec![tape.value(e).clone()],
        gates: None,
        encode_calls: 1,
    })
}
