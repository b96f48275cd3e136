//! Central finite differences, used as an independent oracle for gradients.

use crate::autodiff::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for [`relative_error`]; below it the comparison is absolute.
pub const REL_FLOOR: f64 = 1e-6;

/// `∂f/∂x` at `x0` by central differences with step `h`, one coordinate at a time.
pub fn finite_difference(x0: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut x = x0.clone();
    (0..x0.numel())
        .map(|i| {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + h;
            let up = f(&x);
            x.data_mut()[i] = orig - h;
            let down = f(&x);
            x.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, REL_FLOOR)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(REL_FLOOR)
}
