//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// Worst-case comparison between analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-3)` over
    /// every checked coordinate. The floor keeps round-off on near-zero
    /// coordinates from dominating the ratio.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Largest analytic gradient magnitude seen; guards against vacuous checks.
    pub max_abs_grad: f64,
}

pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Reduce any tensor to a scalar with fixed pseudo-random weights so every
/// output coordinate contributes a distinct gradient.
pub fn weighted_reduce(g: &mut Graph, y: Var, seed: u64) -> Var {
    let n = g.value(y).len();
    let w = random_tensor(&[n], seed, 1.0);
    let value: f64 = g.value(y).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
    let grad = w.reshape(g.value(y).shape()).expect("same size");
    g.scalar_with_grads(&[y], value, vec![grad])
}

const STEP: f64 = 1e-6;
const FLOOR: f64 = 1e-3;

/// Compare tape gradients of `f` with central differences at every input
/// coordinate (all inputs are treated as trainable leaves).
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> GradReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let mut report = GradReport {
        max_rel_error: 0.0,
        checked: 0,
        max_abs_grad: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + STEP;
            let plus = eval(&work);
            work[k].data_mut()[i] = orig - STEP;
            let minus = eval(&work);
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(FLOOR);
            report.max_rel_error = report.max_rel_error.max((a - numeric).abs() / denom);
            report.max_abs_grad = report.max_abs_grad.max(a.abs());
            report.checked += 1;
        }
    }
    report
}

/// Panic with a readable message when a report exceeds `tolerance`.
pub fn assert_gradients(report: &GradReport, tolerance: f64) {
    assert!(report.checked > 0, "no coordinates checked");
    assert!(report.max_abs_grad > 0.0, "all gradients are zero");
    assert!(
        report.max_rel_error < tolerance,
        "gradient check failed: max relative error {:.3e} ≥ {:.1e} over {} coordinates",
        report.max_rel_error,
        tolerance,
        report.checked
    );
}
