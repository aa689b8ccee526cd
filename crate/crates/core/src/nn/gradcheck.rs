//! Central finite differences, the oracle for every analytic gradient.

use crate::error::{ConfuError, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Estimates `∂loss/∂θ` for each coordinate of one parameter as
/// `(loss(θ+h) − loss(θ−h)) / 2h`. The store is restored bit-exactly.
pub fn finite_diff_grad<S: Scalar>(
    store: &mut ParamStore<S>,
    id: ParamId,
    loss_fn: impl Fn(&ParamStore<S>) -> Result<S>,
    h: S,
) -> Result<Tensor<S>> {
    let original = store.get(id).data().to_vec();
    let mut grad = Vec::with_capacity(original.len());
    for i in 0..original.len() {
        store.get_mut(id).data_mut()[i] = original[i] + h;
        let up = loss_fn(store);
        store.get_mut(id).data_mut()[i] = original[i] - h;
        let down = loss_fn(store);
        store.get_mut(id).data_mut()[i] = original[i];
        let (up, down) = (up?, down?);
        if !up.is_finite() || !down.is_finite() {
            return Err(ConfuError::Numeric(format!("non-finite loss at coordinate {i}")));
        }
        grad.push((up - down) / (h + h));
    }
    Tensor::new(store.get(id).shape().to_vec(), grad)
}

/// Largest coordinate-wise relative error `|a − b| / max(|a|, |b|, floor)`.
/// The floor keeps coordinates whose true gradient is ~0 from dividing
/// finite-difference noise by zero.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative_is_theta() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("g", "theta", Tensor::scalar(3.0)).unwrap();
        let g = finite_diff_grad(&mut s, id, |s| Ok(0.5 * s.get(id).data()[0].powi(2)), 1e-5).unwrap();
        assert!((g.data()[0] - 3.0).abs() < 1e-8);
        assert_eq!(s.get(id).data()[0], 3.0);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut s = ParamStore::new();
        let id = s.add("g", "w", Tensor::row_vector(vec![1.0, -2.0, 0.5])).unwrap();
        let g = finite_diff_grad(&mut s, id, |_| Ok(7.0), 1e-5).unwrap();
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_loss_is_a_numeric_error() {
        let mut s = ParamStore::new();
        let id = s.add("g", "w", Tensor::scalar(1.0)).unwrap();
        let r = finite_diff_grad(&mut s, id, |_| Ok(f64::NAN), 1e-5);
        assert!(matches!(r, Err(ConfuError::Numeric(_))));
    }
}
