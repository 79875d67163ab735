use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor for relative errors, so components whose true
/// gradient is ~0 are judged on absolute error instead. Central
/// differences at step 1e-5 carry rounding noise near 1e-11 per unit of
/// |f|, which a smaller floor would amplify past 1e-5.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the component with the largest error.
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the tape gradient of a scalar function against central finite
/// differences at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    let analytic = if tape.requires_grad(out) {
        tape.backward(out)?;
        tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()))
    } else {
        // f ignores its input entirely.
        Tensor::zeros(x.shape())
    };

    let numeric = finite_difference(eval, x, step)?;
    let (worst_index, max_rel_error) = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        tol,
        passed: max_rel_error <= tol,
    })
}

/// Central finite-difference gradient of a scalar function.
pub fn finite_difference<F>(f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), grad)
}
