//! Central finite-difference check of reverse-mode gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a [`gradcheck`] run.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub pass: bool,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, x: Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = f(&mut tape, v)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(TensorError::Usage(format!("gradcheck needs a scalar function, got shape {:?}", value.shape())));
    }
    let y = value.item();
    if !y.is_finite() {
        return Err(TensorError::Evaluation(format!("function value is not finite ({y})")));
    }
    Ok(y)
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences with step `h`, coordinate by coordinate.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !x.is_finite() {
        return Err(TensorError::Evaluation("gradcheck input is not finite".into()));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone().with_requires_grad(true));
    let out = f(&mut tape, leaf)?;
    if !tape.value(out).item().is_finite() {
        return Err(TensorError::Evaluation(format!("function value is not finite ({})", tape.value(out).item())));
    }
    tape.backward(out)?;
    let analytic = tape.grad(leaf).expect("leaf requires grad").to_vec();

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval_scalar(&f, probe.clone())?;
        probe.data_mut()[i] = orig - h;
        let minus = eval_scalar(&f, probe.clone())?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }

    let (worst_index, max_rel_err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &b)| relative_error(a, b))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradcheckReport { max_rel_err, worst_index, analytic, numeric, pass: max_rel_err <= tol })
}
