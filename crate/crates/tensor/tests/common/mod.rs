#![allow(dead_code)]

use cednet_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Relative error with an absolute fallback for near-zero analytic values.
pub fn grad_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < 1e-8 {
        diff
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Checks the gradient of `sum(f(inputs) * r)` against central differences
/// for every element of every input. Returns the worst error.
pub fn check_op(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let step = 1e-5;
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.detached())).collect();
        let out = f(&mut tape, &vars);
        let weights = random(tape.value(out).shape(), 99);
        tape.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.detached().with_grad())).collect();
    let out = f(&mut tape, &vars);
    let weights = tape.leaf(random(tape.value(out).shape(), 99));
    let prod = tape.mul(out, weights).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).expect("gradient populated").to_vec();
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            worst = worst.max(grad_error(analytic[i], numeric));
        }
    }
    worst
}
