//! Central finite differences for checking analytic gradients.

use crate::scalar::Scalar;

/// Denominator floor for [`max_relative_error`]; below this magnitude both
/// gradients are treated as numerically zero.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `(f(θ + h eᵢ) − f(θ − h eᵢ)) / 2h` for every coordinate.
pub fn central_difference<T, F>(f: F, point: &[T], h: T) -> Vec<T>
where
    T: Scalar,
    F: Fn(&[T]) -> T,
{
    let mut probe = point.to_vec();
    let two_h = h + h;
    (0..point.len())
        .map(|i| {
            probe[i] = point[i] + h;
            let plus = f(&probe);
            probe[i] = point[i] - h;
            let minus = f(&probe);
            probe[i] = point[i];
            (plus - minus) / two_h
        })
        .collect()
}

/// `max |a − n| / max(|a|, |n|, floor)` over all coordinates.
pub fn max_relative_error<T: Scalar>(analytic: &[T], numeric: &[T]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_ERROR_FLOOR)
        })
        .fold(0.0, f64::max)
}
