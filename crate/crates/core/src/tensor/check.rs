//! Central finite-difference checking of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|, GRAD_CHECK_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Maximum element-wise relative error between tape gradients of `f` at
/// `inputs` and their central differences with step `eps`.
///
/// `f` must build a scalar on the given tape from the supplied input vars and be
/// a deterministic function of the inputs.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    assert!(eps > 0.0, "eps must be positive");
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).expect("every param gets a gradient");
        for i in 0..inputs[k].numel() {
            let base = inputs[k].data()[i];
            probe[k] = with_value(&inputs[k], i, base + eps);
            let up = eval(&probe)?;
            probe[k] = with_value(&inputs[k], i, base - eps);
            let down = eval(&probe)?;
            probe[k] = inputs[k].clone();
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

fn with_value(t: &Tensor<f64>, i: usize, v: f64) -> Tensor<f64> {
    let mut data = t.data().to_vec();
    data[i] = v;
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}
