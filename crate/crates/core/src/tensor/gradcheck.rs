//! Finite-difference verification of tape gradients at double precision.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// `|a - c| / (|a| + |c| + 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Checks the tape gradient of the scalar built by `f` from leaf `x`
/// against central differences. Returns the max relative error over all
/// coordinates of `x`.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_grad());
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    gradcheck_tensor(x, &analytic, h, |probe| {
        let mut tape = Tape::new();
        let v = tape.leaf(probe);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out)[0])
    })
}

/// Compares a precomputed `analytic` gradient of `eval` at `x` with
/// central differences, coordinate by coordinate.
pub fn gradcheck_tensor<F>(x: &Tensor<f64>, analytic: &[f64], h: f64, mut eval: F) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    assert_eq!(analytic.len(), x.numel());
    let mut probe = x.clone();
    probe.requires_grad = false;
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
