//! Shared finite-difference gradient checker for whole-model losses.

use dymus::data::MultiBehaviorHistory;
use dymus::model::{ForwardOptions, Model};
use dymus::tensor::Tape;
use dymus::train::BCE_EPS;

pub fn loss_value(model: &Model, h: &MultiBehaviorHistory, label: usize) -> f64 {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, false).unwrap();
    let out = model
        .forward(&mut tape, &binding, h, &mut ForwardOptions::default())
        .unwrap();
    let loss = tape.bce_loss(out.scores, label, BCE_EPS).unwrap();
    tape.data(loss)[0]
}

/// Worst relative error between autodiff and central finite differences
/// over every entry of every parameter.
pub fn max_rel_err(model: &mut Model, h: &MultiBehaviorHistory, label: usize) -> f64 {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, true).unwrap();
    let out = model
        .forward(&mut tape, &binding, h, &mut ForwardOptions::default())
        .unwrap();
    let loss = tape.bce_loss(out.scores, label, BCE_EPS).unwrap();
    tape.backward(loss).unwrap();
    let names: Vec<String> = model.params.names().map(String::from).collect();
    let grads: Vec<Vec<f64>> = names
        .iter()
        .map(|n| {
            let v = binding.var(n).unwrap();
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; model.params.get(n).unwrap().numel()])
        })
        .collect();
    drop(tape);

    let h_step = 1e-5;
    let mut worst = 0.0f64;
    for (name, grad) in names.iter().zip(&grads) {
        for (idx, &ad) in grad.iter().enumerate() {
            let orig = model.params.get(name).unwrap().data[idx];
            model.params.get_mut(name).unwrap().data[idx] = orig + h_step;
            let plus = loss_value(model, h, label);
            model.params.get_mut(name).unwrap().data[idx] = orig - h_step;
            let minus = loss_value(model, h, label);
            model.params.get_mut(name).unwrap().data[idx] = orig;
            let fd = (plus - minus) / (2.0 * h_step);
            let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-3);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}
