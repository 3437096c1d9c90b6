//! Central finite differences, the independent oracle for every backward pass.

use super::tensor::Tensor;

/// Floor on the denominator of [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every element `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let indices: Vec<usize> = (0..x.numel()).collect();
    let values = finite_diff_at(&mut f, x, eps, &indices);
    Tensor::new(x.shape(), values).expect("same shape as x")
}

/// Central differences at the given flat indices only.
pub fn finite_diff_at(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    eps: f64,
    indices: &[usize],
) -> Vec<f64> {
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - eps;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Largest element-wise [`relative_error`] between two equally long slices.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(&[3], vec![0.5, -2.0, 7.0]).unwrap();
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| t.item() * t.item(), &x, 1e-4);
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
