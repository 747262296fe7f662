#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s4mt::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Norm-wise relative error between analytic and central-difference
/// gradients of `Σ w ⊙ f(inputs)` for fixed random weights `w`.
///
/// Returns one error per input tensor.
pub fn grad_check<F>(inputs: &[Tensor], eps: f32, f: F) -> Vec<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let n = tape.value(out).numel();
    let mut r = rng(9);
    let w = Tensor::randn(&[n], 1.0, &mut r).into_data();
    let weighted = tape.mul_const(out, w.clone()).unwrap();
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss).unwrap();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.param(x.clone())).collect();
        let o = f(&mut t, &vs);
        t.value(o)
            .data()
            .iter()
            .zip(&w)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    };

    let mut errs = Vec::new();
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads.tensor_or_zeros(vars[idx]);
        let mut num = vec![0.0f64; input.numel()];
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[j] -= eps;
            let hp = (plus[idx].data()[j] - minus[idx].data()[j]) as f64;
            num[j] = (eval(&plus) - eval(&minus)) / hp;
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&num)
            .map(|(a, b)| (*a as f64 - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
        let nn = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        errs.push(diff / na.max(nn).max(1e-8));
    }
    errs
}
