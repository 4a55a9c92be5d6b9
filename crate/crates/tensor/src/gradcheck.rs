//! Central-difference verification of reverse-mode gradients.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Max over checked elements of `|a - n| / max(|a|, |n|, 1e-8)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn evaluate<T: Element, F>(f: &F, x: &Tensor<T>) -> Result<T>
where
    F: for<'t> Fn(Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let out = f(tape.constant(x.clone()))?;
    let v = out.value();
    if !v.is_scalar() {
        return Err(TensorError::NonScalarRoot(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Analytic gradient of scalar `f` at `x`, along with the value.
pub fn gradient<T: Element, F>(f: &F, x: &Tensor<T>) -> Result<(T, Tensor<T>)>
where
    F: for<'t> Fn(Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let input = tape.param(x.clone());
    let out = f(input)?;
    let grads = tape.backward(out)?;
    Ok((out.item(), grads.get_or_zeros(input)))
}

/// Checks the tape gradient of `f` at every element of `x`.
pub fn grad_check<T: Element, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(Var<'t, T>) -> Result<Var<'t, T>>,
{
    let (_, analytic) = gradient(&f, x)?;
    compare_gradient(|t| evaluate(&f, t), &analytic, x, eps, 0..x.len())
}

/// Compares a supplied gradient against central differences of `value` on the
/// given element indices.
pub fn compare_gradient<T: Element>(
    value: impl Fn(&Tensor<T>) -> Result<T>,
    analytic: &Tensor<T>,
    x: &Tensor<T>,
    eps: f64,
    indices: impl IntoIterator<Item = usize>,
) -> Result<GradCheck> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(TensorError::invalid("grad_check", format!("eps must be positive, got {eps}")));
    }
    if analytic.shape() != x.shape() {
        return Err(TensorError::shape("grad_check", x.shape(), analytic.shape()));
    }
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = x.clone();
    for i in indices {
        let orig = probe.data()[i];
        let step = T::lit(eps);
        probe.data_mut()[i] = orig + step;
        let hi = value(&probe)?;
        probe.data_mut()[i] = orig - step;
        let lo = value(&probe)?;
        probe.data_mut()[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(TensorError::NonFinite(format!("objective at element {i}")));
        }
        // The actual perturbation after rounding, not the nominal eps.
        let h = (orig + step).as_f64() - (orig - step).as_f64();
        let numeric = (hi.as_f64() - lo.as_f64()) / h;
        let a = analytic.data()[i].as_f64();
        if !a.is_finite() {
            return Err(TensorError::NonFinite(format!("analytic gradient at element {i}")));
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}
