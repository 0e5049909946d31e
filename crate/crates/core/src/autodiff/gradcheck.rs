//! Central finite-difference gradient checks for graph-built functions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all inputs.
    pub relative_error: f64,
    /// Largest elementwise absolute difference.
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compares the reverse-mode gradient of `build` with respect to every
/// input against central differences with the given `step`.
///
/// `build` must return a scalar node; it is re-run for every perturbation.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .map(|x| x.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).data()[0]
    };

    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut checked = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for k in 0..inputs.len() {
        for idx in 0..inputs[k].len() {
            let orig = inputs[k].data()[idx];
            work[k].data_mut()[idx] = orig + step;
            let up = eval(&work);
            work[k].data_mut()[idx] = orig - step;
            let down = eval(&work);
            work[k].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[k][idx];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
            checked += 1;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt()).max(1e-300);
    GradCheckReport {
        relative_error: diff2.sqrt() / denom,
        max_abs_error: max_abs,
        checked,
    }
}

/// Fixed random weights for turning a tensor output into a scalar.
pub fn random_weights(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}
