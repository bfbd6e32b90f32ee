use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{MocaError, Result};

/// Gradient magnitudes below this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, REL_ERR_FLOOR)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `backward()` against central differences
/// `(f(x+h) − f(x−h)) / 2h` for every element of `x`.
///
/// `f` must build a scalar on the tape it is given from the input variable.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    finite_difference_check_at(f, x, h, 0..x.numel())
}

/// As [`finite_difference_check`], restricted to the listed flat indices.
pub fn finite_difference_check_at<F>(
    f: F,
    x: &Tensor<f64>,
    h: f64,
    indices: impl IntoIterator<Item = usize>,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let root = f(&tape, xv)?;
    let analytic = tape.backward(root)?.get_or_zeros(xv);

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let tape = Tape::no_grad();
        let v = tape.leaf(probe);
        let out = f(&tape, v)?.value();
        if out.numel() != 1 {
            return Err(MocaError::Contract("gradient check needs a scalar function".into()));
        }
        Ok(out.item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        if rel > report.max_rel_err || !rel.is_finite() {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
        report.max_abs_err = report.max_abs_err.max(abs);
        report.checked += 1;
    }
    Ok(report)
}
