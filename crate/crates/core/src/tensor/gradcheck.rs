use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Difference quotient used to estimate each partial derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²).
    Central,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, error O(h⁴).
    FivePoint,
}

/// Compares `analytic` gradients with central differences of `f` at `params`.
///
/// Every coordinate of every tensor in `params` is perturbed by `±eps` in turn
/// (and restored afterwards). Returns the worst relative error, with the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<T, F>(f: F, params: &mut [Tensor<T>], analytic: &[Tensor<T>], eps: T) -> Result<T>
where
    T: Scalar,
    F: FnMut(&[Tensor<T>]) -> Result<T>,
{
    finite_difference_check_with(f, params, analytic, eps, Stencil::Central)
}

pub fn finite_difference_check_with<T, F>(
    f: F,
    params: &mut [Tensor<T>],
    analytic: &[Tensor<T>],
    eps: T,
    stencil: Stencil,
) -> Result<T>
where
    T: Scalar,
    F: FnMut(&[Tensor<T>]) -> Result<T>,
{
    Ok(gradient_errors(f, params, analytic, eps, stencil)?.elementwise)
}

/// Disagreement between analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientErrors<T> {
    /// Worst coordinate: `|a − n| / max(|a|, |n|, 1e-8)`.
    pub elementwise: T,
    /// Per tensor: `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
    pub per_tensor: Vec<T>,
}

impl<T: Scalar> GradientErrors<T> {
    pub fn worst_tensor(&self) -> T {
        self.per_tensor.iter().fold(T::zero(), |m, &e| m.max(e))
    }
}

pub fn gradient_errors<T, F>(
    mut f: F,
    params: &mut [Tensor<T>],
    analytic: &[Tensor<T>],
    eps: T,
    stencil: Stencil,
) -> Result<GradientErrors<T>>
where
    T: Scalar,
    F: FnMut(&[Tensor<T>]) -> Result<T>,
{
    if eps <= T::zero() {
        return Err(Error::Usage("finite-difference step must be positive".into()));
    }
    if params.len() != analytic.len() {
        return Err(Error::Dimension(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    for (p, g) in params.iter().zip(analytic) {
        p.expect_same_shape(g)?;
    }
    let offsets: &[(f64, f64)] = match stencil {
        Stencil::Central => &[(1.0, 0.5), (-1.0, -0.5)],
        Stencil::FivePoint => &[(2.0, -1.0 / 12.0), (1.0, 8.0 / 12.0), (-1.0, -8.0 / 12.0), (-2.0, 1.0 / 12.0)],
    };
    let floor = T::lit(1e-8);
    let mut elementwise = T::zero();
    let mut per_tensor = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let (mut diff2, mut exact2, mut numeric2) = (T::zero(), T::zero(), T::zero());
        for i in 0..params[t].len() {
            let original = params[t].data()[i];
            let mut numeric = T::zero();
            for &(step, weight) in offsets {
                params[t].data_mut()[i] = original + T::lit(step) * eps;
                let value = f(params);
                params[t].data_mut()[i] = original;
                let value = value?;
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "objective is non-finite near parameter {t}[{i}]"
                    )));
                }
                numeric += T::lit(weight) * value;
            }
            numeric /= eps;
            let exact = analytic[t].data()[i];
            let denom = exact.abs().max(numeric.abs()).max(floor);
            elementwise = elementwise.max((exact - numeric).abs() / denom);
            diff2 += (exact - numeric) * (exact - numeric);
            exact2 += exact * exact;
            numeric2 += numeric * numeric;
        }
        let scale = exact2.sqrt().max(numeric2.sqrt());
        per_tensor.push(if scale > T::zero() { diff2.sqrt() / scale } else { T::zero() });
    }
    Ok(GradientErrors { elementwise, per_tensor })
}
