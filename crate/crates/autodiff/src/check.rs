use crate::{Result, Tape, Tensor, Var};

/// Evaluate a scalar program and its exact reverse-mode gradient at `at`.
pub fn evaluate_with_gradient<F>(f: F, at: &Tensor) -> Result<(f64, Tensor)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.input(at.clone())?;
    let out = f(&mut tape, x)?;
    let value = tape.value(out).scalar_value()?;
    let mut grads = tape.backward(out)?;
    Ok((value, grads.take(x, at)))
}

/// Compare a claimed gradient against central finite differences of `f`.
/// Returns max over coordinates of |claimed - numeric| / (|claimed| + 1e-12).
pub fn gradient_discrepancy<F>(f: F, at: &Tensor, step: f64, claimed: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    assert!(step > 0.0, "step must be positive");
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.input(point.clone())?;
        let out = f(&mut tape, x)?;
        tape.value(out).scalar_value()
    };
    let mut max_rel = 0.0f64;
    for i in 0..at.numel() {
        let mut hi = at.clone();
        hi.data_mut()[i] += step;
        let mut lo = at.clone();
        lo.data_mut()[i] -= step;
        let numeric = (eval(&hi)? - eval(&lo)?) / (2.0 * step);
        let analytic = claimed.data()[i];
        let rel = (analytic - numeric).abs() / (analytic.abs() + 1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Max relative error between the tape gradient of `f` and central
/// finite differences with the given step.
pub fn finite_difference_check<F>(f: F, at: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let (_, grad) = evaluate_with_gradient(&f, at)?;
    gradient_discrepancy(&f, at, step, &grad)
}
