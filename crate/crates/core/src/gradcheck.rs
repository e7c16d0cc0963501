//! Central finite differences for verifying tape gradients.

use crate::tape::Matrix;

/// Magnitude below which gradient entries are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-4;

/// Central-difference gradient of `f` at `point`, one entry at a time.
pub fn numeric_grad<F>(f: F, point: &Matrix, eps: f64) -> Matrix
where
    F: Fn(&Matrix) -> f64,
{
    let mut grad = Matrix::zeros(point.dim());
    let mut perturbed = point.clone();
    for (idx, &x) in point.indexed_iter() {
        perturbed[idx] = x + eps;
        let plus = f(&perturbed);
        perturbed[idx] = x - eps;
        let minus = f(&perturbed);
        perturbed[idx] = x;
        grad[idx] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Largest relative error `|a - n| / max(|a|, |n|, floor)` over all entries.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix, floor: f64) -> f64 {
    assert_eq!(analytic.dim(), numeric.dim(), "gradient shapes differ");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Panics with a readable message when the gradients disagree.
pub fn assert_grad_close(analytic: &Matrix, numeric: &Matrix, tol: f64, what: &str) {
    let err = max_relative_error(analytic, numeric, GRAD_FLOOR);
    assert!(
        err <= tol,
        "{what}: max relative gradient error {err:.3e} > {tol:.1e}\nanalytic:\n{analytic:.6}\nnumeric:\n{numeric:.6}"
    );
}
