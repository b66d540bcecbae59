#![allow(dead_code)]

pub mod grad_cases;
pub mod oracles;
pub mod reference;

use kgstory::features::{DetectedObject, ImageSequence, ObjectFeatureSet};
use kgstory::neural::{NeuralError, ParameterStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// `||a - b|| / max(||a||, ||b||, 1e-8)`
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

/// Reduces a non-scalar output to a scalar with fixed random weights so
/// every output element contributes a distinct gradient.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, NeuralError> {
    let shape = tape.value(out).shape().to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let (rows, cols) = (shape[0], shape[1]);
    let w = tape.constant(random_tensor(&mut r, rows, cols));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Compares tape gradients of `f(inputs)` w.r.t. each input leaf with central
/// differences. Returns the worst relative error over inputs.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NeuralError>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone().with_grad(true))).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone().with_grad(true))).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap().data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..numeric.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Same as [`check_inputs`] but differentiates w.r.t. every parameter in
/// `store`.
pub fn check_params<F>(store: &ParameterStore, f: F) -> f64
where
    F: for<'t> Fn(&mut Tape<'t>, &'t ParameterStore) -> Result<Var, NeuralError>,
{
    let eval = |s: &ParameterStore| -> f64 {
        let mut tape = Tape::new();
        let out = f(&mut tape, s).unwrap();
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let out = f(&mut tape, store).unwrap();
    let grads = tape.backward(out).unwrap().into_named();

    let mut worst: f64 = 0.0;
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let n = store.get(&name).unwrap().numel();
        let analytic = grads
            .get(&name)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        let mut s = store.clone();
        for j in 0..n {
            let orig = s.get(&name).unwrap().data()[j];
            s.get_mut(&name).unwrap().data_mut()[j] = orig + FD_STEP;
            let up = eval(&s);
            s.get_mut(&name).unwrap().data_mut()[j] = orig - FD_STEP;
            let down = eval(&s);
            s.get_mut(&name).unwrap().data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        let err = rel_err(&analytic, &numeric);
        assert!(err.is_finite(), "{name}: non-finite error");
        worst = worst.max(err);
    }
    worst
}

/// A story of `slots` images with `per_slot` random objects of width `dim`.
pub fn random_sequence(seed: u64, slots: usize, per_slot: usize, dim: usize) -> ImageSequence {
    let mut r = rng(seed);
    ImageSequence {
        story_id: format!("seq{seed}"),
        slots: (0..slots)
            .map(|t| ObjectFeatureSet {
                image_index: t,
                objects: (0..per_slot)
                    .map(|_| DetectedObject {
                        confidence: r.gen_range(0.0..1.0),
                        feature: (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect(),
                    })
                    .collect(),
            })
            .collect(),
    }
}

pub fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}
