//! Helpers shared by the integration tests.
#![allow(dead_code)]

use fsad::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| randn(rng)).collect()).unwrap()
}

pub fn vec64(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| randn(rng)).collect()
}

pub fn mat32(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| randn(rng) as f32).collect()).unwrap()
}

pub fn rows64(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect()
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

/// A graph under test: inputs become tape parameters, `build` returns any
/// tensor-valued node.
pub struct GradCase {
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

fn weighted(tape: &mut Tape<f64>, out: Var, w: &[f64]) -> Var {
    let p = tape.mul_const(out, w.to_vec()).unwrap();
    tape.sum(p).unwrap()
}

/// Norm-wise relative error between the tape gradient and 64-bit central
/// differences of `Σ w ⊙ build(inputs)` for fixed random weights `w`.
pub fn gradcheck(case: &GradCase, rng: &mut ChaCha8Rng, h: f64) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars);
    let n = tape.value(out).len();
    let w = vec64(rng, n);
    let loss = weighted(&mut tape, out, &w);
    tape.backward(loss).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .zip(&case.inputs)
        .flat_map(|(&v, t)| tape.grad(v).map_or(vec![0.0; t.len()], |g| g.to_vec()))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = (case.build)(&mut tape, &vars);
        let l = weighted(&mut tape, out, &w);
        tape.value(l).data()[0]
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut inputs = case.inputs.clone();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            inputs[i].data_mut()[j] = x + h;
            let up = eval(&inputs);
            inputs[i].data_mut()[j] = x - h;
            let down = eval(&inputs);
            inputs[i].data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    l2(&diff) / l2(&analytic).max(l2(&numeric)).max(1e-12)
}
