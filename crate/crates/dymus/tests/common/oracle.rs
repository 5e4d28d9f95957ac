//! Straight-line, tape-free re-implementations of both forward passes, used
//! as independent oracles. Everything is plain nested loops over flat
//! slices; parameters are read from the store by symbol path only.

use dymus::params::ParamStore;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn get<'s>(store: &'s ParamStore, name: &str) -> &'s [f64] {
    &store.get(name).unwrap().data
}

/// One plain GRU pass over a sequence of item indices; returns the last
/// hidden state (zeros for an empty sequence).
pub fn gru_encode(store: &ParamStore, prefix: &str, behavior: &str, items: &[usize], d: usize) -> Vec<f64> {
    let emb = get(store, &format!("{prefix}.item_embeddings"));
    let base = format!("{prefix}.gru.{behavior}");
    let w_ir = get(store, &format!("{base}.W_ir"));
    let w_hr = get(store, &format!("{base}.W_hr"));
    let w_iz = get(store, &format!("{base}.W_iz"));
    let w_hz = get(store, &format!("{base}.W_hz"));
    let w_in = get(store, &format!("{base}.W_in"));
    let w_hn = get(store, &format!("{base}.W_hn"));
    let b_r = get(store, &format!("{base}.b_r"));
    let b_z = get(store, &format!("{base}.b_z"));
    let b_n = get(store, &format!("{base}.b_n"));

    let matvec = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..d).map(|i| (0..d).map(|j| w[i * d + j] * x[j]).sum()).collect()
    };

    let mut h = vec![0.0; d];
    for &item in items {
        let x = &emb[item * d..(item + 1) * d];
        let ri = matvec(w_ir, x);
        let rh = matvec(w_hr, &h);
        let zi = matvec(w_iz, x);
        let zh = matvec(w_hz, &h);
        let ni = matvec(w_in, x);
        let nh = matvec(w_hn, &h);
        let mut next = vec![0.0; d];
        for i in 0..d {
            let r = sigmoid(ri[i] + rh[i] + b_r[i]);
            let z = sigmoid(zi[i] + zh[i] + b_z[i]);
            let n = (ni[i] + r * nh[i] + b_n[i]).tanh();
            next[i] = z * n + (1.0 - z) * h[i];
        }
        h = next;
    }
    h
}

/// Scores for the single-behavior baseline: softmax over `e . i_i`.
pub fn single_gru_scores(store: &ParamStore, items: &[usize], d: usize, item_count: usize) -> Vec<f64> {
    let e = gru_encode(store, "single_gru", "purchase", items, d);
    let emb = get(store, "single_gru.item_embeddings");
    let logits: Vec<f64> = (0..item_count)
        .map(|i| (0..d).map(|j| emb[i * d + j] * e[j]).sum())
        .collect();
    softmax(&logits)
}

/// Shared routing loop: candidates are fixed (`u`, laid out `[D][C][L]`);
/// logits accumulate across iterations. Returns the final representation.
#[allow(clippy::too_many_arguments)]
fn route(
    store: &ParamStore,
    prefix: &str,
    u: &[f64],
    d: usize,
    c: usize,
    l: usize,
    iters: usize,
    item_count: usize,
) -> Vec<f64> {
    let emb = get(store, &format!("{prefix}.item_embeddings"));
    let alpha = get(store, &format!("{prefix}.routing.alpha"))[0];
    let w_len = get(store, &format!("{prefix}.routing.w"));
    let b_len = get(store, &format!("{prefix}.routing.b"));
    let w_coef = get(store, &format!("{prefix}.routing.W_coef"));

    let mut logits = vec![0.0; d * c];
    let mut v = vec![0.0; c];
    for iter in 1..=iters {
        let mut coeff = vec![0.0; d * c];
        for dd in 0..d {
            let row = softmax(&logits[dd * c..(dd + 1) * c]);
            coeff[dd * c..(dd + 1) * c].copy_from_slice(&row);
        }
        let mut capsules = vec![0.0; c * l];
        for cc in 0..c {
            for j in 0..l {
                let mut acc = 0.0;
                for dd in 0..d {
                    acc += coeff[dd * c + cc] * u[(dd * c + cc) * l + j];
                }
                capsules[cc * l + j] = alpha * acc;
            }
        }
        for cc in 0..c {
            let norm = (capsules[cc * l..(cc + 1) * l].iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
            v[cc] = w_len[cc] * norm + b_len[cc];
        }
        if iter < iters {
            let item_logits: Vec<f64> = (0..item_count)
                .map(|i| (0..c).map(|j| emb[i * c + j] * v[j]).sum())
                .collect();
            let probs = softmax(&item_logits);
            let mut p = vec![0.0; d];
            for (i, &pi) in probs.iter().enumerate() {
                for j in 0..d {
                    p[j] += emb[i * d + j] * pi;
                }
            }
            // r_c = W_c_coef . [v_c || p]
            let mut r_stack = vec![0.0; c * l];
            for cc in 0..c {
                let mut cat = capsules[cc * l..(cc + 1) * l].to_vec();
                cat.extend_from_slice(&p);
                for j in 0..l {
                    let row = &w_coef[(cc * l + j) * (l + d)..(cc * l + j + 1) * (l + d)];
                    r_stack[cc * l + j] = row.iter().zip(&cat).map(|(a, b)| a * b).sum();
                }
            }
            for dd in 0..d {
                for cc in 0..c {
                    let agree: f64 = (0..l)
                        .map(|j| u[(dd * c + cc) * l + j] * r_stack[cc * l + j])
                        .sum();
                    logits[dd * c + cc] += agree;
                }
            }
        }
    }
    v
}

fn score(emb: &[f64], v: &[f64], d: usize, item_count: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..item_count)
        .map(|i| (0..d).map(|j| emb[i * d + j] * v[j]).sum())
        .collect();
    softmax(&logits)
}

/// Full sequence-level forward: per-behavior GRUs, candidate capsules from
/// primary-capsule slices, `iters` routing phases, all-item softmax.
pub fn dymus_scores(
    store: &ParamStore,
    behavior_names: &[String],
    sequences: &[Vec<usize>],
    d: usize,
    l: usize,
    iters: usize,
    item_count: usize,
) -> Vec<f64> {
    let c = d;
    let b = behavior_names.len();
    let encodings: Vec<Vec<f64>> = behavior_names
        .iter()
        .zip(sequences)
        .map(|(name, items)| gru_encode(store, "dymus", name, items, d))
        .collect();

    let w = get(store, "dymus.routing.W"); // [D, C, L, B]
    let mut u = vec![0.0; d * c * l];
    for dd in 0..d {
        for cc in 0..c {
            for j in 0..l {
                let mut acc = 0.0;
                for bb in 0..b {
                    acc += w[((dd * c + cc) * l + j) * b + bb] * encodings[bb][dd];
                }
                u[(dd * c + cc) * l + j] = acc;
            }
        }
    }
    let v = route(store, "dymus", &u, d, c, l, iters, item_count);
    score(get(store, "dymus.item_embeddings"), &v, d, item_count)
}

/// Full item-level forward: dynamic GRUs with per-position adjusting states
/// refined across iterations, row-wise candidate capsules, shared routing.
pub fn dymus_plus_scores(
    store: &ParamStore,
    behavior_names: &[String],
    sequences: &[Vec<usize>],
    d: usize,
    l: usize,
    iters: usize,
    item_count: usize,
) -> Vec<f64> {
    let c = d;
    let b = behavior_names.len();
    let emb = get(store, "dymus_plus.item_embeddings");
    let alpha = get(store, "dymus_plus.routing.alpha")[0];
    let w_len = get(store, "dymus_plus.routing.w");
    let b_len = get(store, "dymus_plus.routing.b");
    let w_coef = get(store, "dymus_plus.routing.W_coef");
    let w_route = get(store, "dymus_plus.routing.W"); // [D, L, C, B]

    // adjusting[b][k] is a D x L matrix, zero at the first iteration.
    let mut adjusting: Vec<Vec<Vec<f64>>> = sequences
        .iter()
        .map(|s| vec![vec![0.0; d * l]; s.len()])
        .collect();
    let mut logits = vec![0.0; d * c];
    let mut v = vec![0.0; c];

    for iter in 1..=iters {
        // Encode every behavior with the current adjusting states.
        let mut encodings: Vec<Vec<f64>> = Vec::with_capacity(b);
        let mut gates: Vec<Vec<Vec<f64>>> = Vec::with_capacity(b);
        for (bb, name) in behavior_names.iter().enumerate() {
            let base = format!("dymus_plus.dyngru.{name}");
            let w_ir = get(store, &format!("{base}.W_ir"));
            let w_iz = get(store, &format!("{base}.W_iz"));
            let w_in = get(store, &format!("{base}.W_in"));
            let w_hr = get(store, &format!("{base}.W_hr"));
            let w_hz = get(store, &format!("{base}.W_hz"));
            let w_hn = get(store, &format!("{base}.W_hn"));
            let w_cr = get(store, &format!("{base}.W_cr"));
            let w_cz = get(store, &format!("{base}.W_cz"));
            let w_cn = get(store, &format!("{base}.W_cn"));
            let b_cr = get(store, &format!("{base}.B_cr"));
            let b_cz = get(store, &format!("{base}.B_cz"));
            let b_cn = get(store, &format!("{base}.B_cn"));
            let b_r = get(store, &format!("{base}.B_r"));
            let b_z = get(store, &format!("{base}.B_z"));
            let b_n = get(store, &format!("{base}.B_n"));

            // (W_i* x)[dd][j], W_i* laid out [D, L, D]
            let proj_in = |w: &[f64], x: &[f64]| -> Vec<f64> {
                let mut out = vec![0.0; d * l];
                for dd in 0..d {
                    for j in 0..l {
                        out[dd * l + j] = (0..d).map(|m| w[(dd * l + j) * d + m] * x[m]).sum();
                    }
                }
                out
            };
            // (W (x) M)[dd][j], W laid out [D, L, L]
            let caps_mul = |w: &[f64], m: &[f64]| -> Vec<f64> {
                let mut out = vec![0.0; d * l];
                for dd in 0..d {
                    for j in 0..l {
                        out[dd * l + j] = (0..l).map(|m2| w[(dd * l + j) * l + m2] * m[dd * l + m2]).sum();
                    }
                }
                out
            };

            let mut h = vec![0.0; d * l];
            let mut seq_gates = Vec::with_capacity(sequences[bb].len());
            for (k, &item) in sequences[bb].iter().enumerate() {
                let x = &emb[item * d..(item + 1) * d];
                let adj = &adjusting[bb][k];
                let ir = proj_in(w_ir, x);
                let iz = proj_in(w_iz, x);
                let in_ = proj_in(w_in, x);
                let cr = caps_mul(w_cr, adj);
                let cz = caps_mul(w_cz, adj);
                let cn = caps_mul(w_cn, adj);
                let hr = caps_mul(w_hr, &h);
                let hz = caps_mul(w_hz, &h);
                let hn = caps_mul(w_hn, &h);
                let mut next = vec![0.0; d * l];
                let mut n_gate = vec![0.0; d * l];
                for i in 0..d * l {
                    let r = sigmoid(ir[i] * (cr[i] + b_cr[i]) + hr[i] + b_r[i]);
                    let z = sigmoid(iz[i] * (cz[i] + b_cz[i]) + hz[i] + b_z[i]);
                    let n = (in_[i] * (cn[i] + b_cn[i]) + r * hn[i] + b_n[i]).tanh();
                    n_gate[i] = n;
                    next[i] = z * n + (1.0 - z) * h[i];
                }
                h = next;
                seq_gates.push(n_gate);
            }
            encodings.push(h);
            gates.push(seq_gates);
        }

        // Candidates u[dd][cc][j] = sum_b W[dd][j][cc][b] * E_b[dd][j].
        let mut u = vec![0.0; d * c * l];
        for dd in 0..d {
            for cc in 0..c {
                for j in 0..l {
                    let mut acc = 0.0;
                    for bb in 0..b {
                        acc += w_route[((dd * l + j) * c + cc) * b + bb] * encodings[bb][dd * l + j];
                    }
                    u[(dd * c + cc) * l + j] = acc;
                }
            }
        }

        // One routing phase with carried logits.
        let mut coeff = vec![0.0; d * c];
        for dd in 0..d {
            let row = softmax(&logits[dd * c..(dd + 1) * c]);
            coeff[dd * c..(dd + 1) * c].copy_from_slice(&row);
        }
        let mut capsules = vec![0.0; c * l];
        for cc in 0..c {
            for j in 0..l {
                let mut acc = 0.0;
                for dd in 0..d {
                    acc += coeff[dd * c + cc] * u[(dd * c + cc) * l + j];
                }
                capsules[cc * l + j] = alpha * acc;
            }
        }
        for cc in 0..c {
            let norm = (capsules[cc * l..(cc + 1) * l].iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
            v[cc] = w_len[cc] * norm + b_len[cc];
        }

        if iter < iters {
            let item_logits: Vec<f64> = (0..item_count)
                .map(|i| (0..c).map(|j| emb[i * c + j] * v[j]).sum())
                .collect();
            let probs = softmax(&item_logits);
            let mut p = vec![0.0; d];
            for (i, &pi) in probs.iter().enumerate() {
                for j in 0..d {
                    p[j] += emb[i * d + j] * pi;
                }
            }
            let mut r_stack = vec![0.0; c * l];
            for cc in 0..c {
                let mut cat = capsules[cc * l..(cc + 1) * l].to_vec();
                cat.extend_from_slice(&p);
                for j in 0..l {
                    let row = &w_coef[(cc * l + j) * (l + d)..(cc * l + j + 1) * (l + d)];
                    r_stack[cc * l + j] = row.iter().zip(&cat).map(|(a, b)| a * b).sum();
                }
            }
            for dd in 0..d {
                for cc in 0..c {
                    let agree: f64 = (0..l)
                        .map(|j| u[(dd * c + cc) * l + j] * r_stack[cc * l + j])
                        .sum();
                    logits[dd * c + cc] += agree;
                }
            }
            // Adjusting-state update: C_k += N_k * r_stack (C = D).
            for bb in 0..b {
                for k in 0..sequences[bb].len() {
                    for i in 0..d * l {
                        adjusting[bb][k][i] += gates[bb][k][i] * r_stack[i];
                    }
                }
            }
        }
    }
    score(emb, &v, d, item_count)
}
