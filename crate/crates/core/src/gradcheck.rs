//! Finite-difference gradient verification. 64-bit only; every backward rule
//! in the crate is tested through this oracle.

use crate::error::Result;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Central-difference step used by the verification suites.
pub const DEFAULT_H: f64 = 1e-5;

/// Max over coordinates of |analytic - numeric| / max(1, |analytic|), where
/// numeric is the central difference (f(x+h) - f(x-h)) / 2h.
///
/// `f` must build a scalar output; panics on non-scalar (test-only code).
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> f64
where
    F: Fn(&mut GradTape<f64>, Var) -> Result<Var>,
{
    finite_diff_check_multi(|tape, vars| f(tape, vars[0]), &[x.clone()], h)
}

/// Multi-input variant: checks the gradient w.r.t. every listed tensor
/// (inputs and parameters alike) and returns the worst relative error.
pub fn finite_diff_check_multi<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> f64
where
    F: Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars).expect("gradcheck forward failed");
        assert_eq!(tape.value(out).numel(), 1, "gradcheck needs a scalar output");
        tape.value(out).item()
    };

    // Analytic gradients in one pass.
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).expect("gradcheck forward failed");
    assert_eq!(tape.value(out).numel(), 1, "gradcheck needs a scalar output");
    let grads = tape.backward(out).expect("gradcheck backward failed");

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let zero;
        let analytic = match grads.get(*var) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(inputs[ti].shape());
                &zero
            }
        };
        for i in 0..inputs[ti].numel() {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + h;
            let up = eval(&work);
            work[ti].data_mut()[i] = orig - h;
            let down = eval(&work);
            work[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
