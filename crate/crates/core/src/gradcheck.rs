//! Finite-difference helpers for checking analytic gradients.

/// `|a - b| / max(|a|, |b|, floor)`. The floor keeps components whose true
/// value is near zero from turning round-off into a large relative error.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference `(f(x + h) - f(x - h)) / 2h` of a scalar function of
/// one coordinate.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Default floor for [`relative_error`] in gradient checks.
pub const GRADIENT_FLOOR: f64 = 1e-6;
