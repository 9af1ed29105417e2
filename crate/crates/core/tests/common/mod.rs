//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use csikit::autodiff::{Tape, Var};
use csikit::conformer::{Ablation, ConformerConfig, ConformerModel, Dropout};
use csikit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub type OpFn = Box<dyn Fn(&mut Tape<'_>, &[Var]) -> Var>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Reduces `y` to a scalar with fixed pseudo-random weights so every
/// output entry contributes a distinct amount.
pub fn weighted_sum(tape: &mut Tape<'_>, y: Var) -> Var {
    let t = tape.value(y);
    let w: Vec<f64> = (0..t.len()).map(|i| ((i * 7919 % 113) as f64 / 113.0) - 0.37).collect();
    let w = tape.constant(Tensor::new(t.shape().to_vec(), w).unwrap());
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

/// Largest relative error between the reverse-mode gradient of
/// `weighted_sum(f(inputs))` and central differences.
pub fn op_max_error(inputs: &[Tensor], f: &OpFn) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let y = f(&mut tape, &vars);
        let l = weighted_sum(&mut tape, y);
        tape.value(l).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let y = f(&mut tape, &vars);
    let l = weighted_sum(&mut tape, y);
    let grads = tape.backward(l).unwrap();

    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for (i, a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(*a, numeric));
        }
    }
    worst
}

/// Every differentiable tape operation with random inputs of small
/// shapes. The straight-through estimator has no finite-difference
/// counterpart and is checked separately.
pub fn op_cases() -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let r = &mut rng(11);
    let mut cases: Vec<(&'static str, Vec<Tensor>, OpFn)> = Vec::new();
    let pair = vec![random(&[2, 3], r), random(&[2, 3], r)];
    cases.push(("matmul", vec![random(&[3, 4], r), random(&[4, 5], r)], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())));
    cases.push(("add", pair.clone(), Box::new(|t, v| t.add(v[0], v[1]).unwrap())));
    cases.push(("sub", pair.clone(), Box::new(|t, v| t.sub(v[0], v[1]).unwrap())));
    cases.push(("mul", pair.clone(), Box::new(|t, v| t.mul(v[0], v[1]).unwrap())));
    cases.push(("mul_shared_input", pair, Box::new(|t, v| t.mul(v[0], v[0]).unwrap())));
    cases.push(("scale", vec![random(&[2, 3], r)], Box::new(|t, v| t.scale(v[0], -1.7))));
    cases.push(("add_bias", vec![random(&[4, 3], r), random(&[3], r)], Box::new(|t, v| t.add_bias(v[0], v[1]).unwrap())));
    cases.push((
        "layer_norm",
        vec![random(&[3, 6], r), random(&[6], r), random(&[6], r)],
        Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
    ));
    cases.push(("softmax", vec![random(&[3, 5], r)], Box::new(|t, v| t.softmax(v[0]))));
    cases.push(("sigmoid", vec![random(&[3, 5], r)], Box::new(|t, v| t.sigmoid(v[0]))));
    cases.push(("swish", vec![random(&[3, 5], r)], Box::new(|t, v| t.swish(v[0]))));
    cases.push(("glu", vec![random(&[3, 8], r)], Box::new(|t, v| t.glu(v[0]).unwrap())));
    cases.push((
        "depthwise_conv1d",
        vec![random(&[3, 7], r), random(&[3, 5], r)],
        Box::new(|t, v| t.depthwise_conv1d(v[0], v[1]).unwrap()),
    ));
    cases.push(("transpose", vec![random(&[3, 4], r)], Box::new(|t, v| t.transpose(v[0]).unwrap())));
    cases.push(("reshape", vec![random(&[3, 4], r)], Box::new(|t, v| t.reshape(v[0], &[2, 6]).unwrap())));
    cases.push(("slice_cols", vec![random(&[3, 6], r)], Box::new(|t, v| t.slice_cols(v[0], 2, 3).unwrap())));
    cases.push((
        "concat_cols",
        vec![random(&[3, 2], r), random(&[3, 4], r)],
        Box::new(|t, v| t.concat_cols(&[v[0], v[1], v[0]]).unwrap()),
    ));
    cases.push(("gather_rows", vec![random(&[4, 3], r)], Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2, 3]).unwrap())));
    cases.push(("sum_squares", vec![random(&[4, 3], r)], Box::new(|t, v| t.sum_squares(v[0]))));
    cases.push((
        "mask_mul",
        vec![random(&[2, 3], r)],
        Box::new(|t, v| t.mask_mul(v[0], vec![2.0, 0.0, 1.0, 0.0, 2.0, 2.0]).unwrap()),
    ));
    cases
}

pub fn toy_config(ablation: Ablation) -> ConformerConfig {
    ConformerConfig {
        n_layers: 2,
        d_model: 8,
        seq_len: 2,
        n_heads: 2,
        conv_kernel: 3,
        dropout_rate: 0.0,
        cr: 2,
        ..Default::default()
    }
    .ablation(ablation)
}

fn model_loss(model: &ConformerModel, x: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let cw = model.encode(&mut tape, xv, &mut Dropout::eval()).unwrap();
    let y = model.decode(&mut tape, cw, &mut Dropout::eval()).unwrap();
    let l = weighted_sum(&mut tape, y);
    tape.value(l).data()[0]
}

/// Largest relative error over every parameter of a toy model whose
/// output head has random weights, with the parameter name it occurs at.
pub fn model_max_error(ablation: Ablation) -> (f64, String) {
    let mut model = ConformerModel::new(toy_config(ablation), 5).unwrap();
    let r = &mut rng(11);
    let head = model.output.weight;
    let d = model.config.d_model;
    model.params.get_mut(head).value = random(&[d, d], r);
    let x = random(&[model.config.seq_len, d], r);
    let grads = {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let cw = model.encode(&mut tape, xv, &mut Dropout::eval()).unwrap();
        let y = model.decode(&mut tape, cw, &mut Dropout::eval()).unwrap();
        let l = weighted_sum(&mut tape, y);
        tape.backward(l).unwrap().into_params()
    };
    let ids: Vec<_> = model.params.iter().map(|(id, p)| (id, p.name.clone(), p.value.len())).collect();
    let mut worst = (0.0, String::new());
    for (id, name, len) in ids {
        let analytic = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len]);
        for (i, a) in analytic.iter().enumerate() {
            let orig = model.params.value(id).data()[i];
            model.params.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let up = model_loss(&model, &x);
            model.params.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let down = model_loss(&model, &x);
            model.params.get_mut(id).value.data_mut()[i] = orig;
            let e = rel_err(*a, (up - down) / (2.0 * FD_STEP));
            if e > worst.0 {
                worst = (e, format!("{name}[{i}]"));
            }
        }
    }
    worst
}
