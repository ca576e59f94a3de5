//! Central finite-difference gradient checker.
//!
//! The checker re-evaluates the function at `x ± eps·e_i` for every
//! coordinate, so it is meant for micro-sized instances. Run it on `f64`
//! tensors: the networks train in f32, but finite differences at the
//! tolerances asserted by the test suites need the wider type.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// One evaluation of the function under check: the scalar value, and the
/// analytic gradient when requested.
pub struct GradCheckEval<T: Scalar> {
    pub value: f64,
    pub grad: Option<Tensor<T>>,
}

/// Maximum over coordinates of
/// `|analytic - central_difference| / max(1, |analytic|, |numeric|)`.
///
/// `f` is called once with `need_grad = true` at `x`, then twice per
/// coordinate with `need_grad = false` at the perturbed points.
pub fn grad_check<T, F>(mut f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&Tensor<T>, bool) -> Result<GradCheckEval<T>>,
{
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::Param(format!("grad_check eps must be in [1e-6, 1e-2], got {eps}")));
    }
    let base = f(x, true)?;
    if !base.value.is_finite() {
        return Err(Error::Eval(format!("function value is not finite: {}", base.value)));
    }
    let analytic = base
        .grad
        .ok_or_else(|| Error::Eval("function did not return an analytic gradient".into()))?;
    if analytic.shape() != x.shape() {
        return Err(Error::Dim(format!(
            "analytic gradient shape {:?} does not match input {:?}",
            analytic.shape(),
            x.shape()
        )));
    }

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += T::from_f64(eps);
        let mut minus = x.clone();
        minus.data_mut()[i] -= T::from_f64(eps);
        let fp = f(&plus, false)?.value;
        let fm = f(&minus, false)?.value;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Eval(format!("perturbed function value not finite at coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i].to_f64();
        let denom = 1.0f64.max(a.abs()).max(numeric.abs());
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.3 - 0.7);
        let err = grad_check(
            |x, need_grad| {
                Ok(GradCheckEval {
                    value: ops::sum_all(x).to_f64(),
                    grad: need_grad.then(|| Tensor::full(x.shape(), 1.0)),
                })
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn eps_bounds_are_enforced() {
        let x = Tensor::<f64>::zeros(&[2]);
        let f = |x: &Tensor<f64>, need_grad: bool| {
            Ok(GradCheckEval {
                value: ops::sum_all(x).to_f64(),
                grad: need_grad.then(|| Tensor::full(x.shape(), 1.0)),
            })
        };
        assert!(grad_check(f, &x, 1e-7).is_err());
        assert!(grad_check(f, &x, 0.1).is_err());
    }
}
