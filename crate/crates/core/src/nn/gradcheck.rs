//! Central finite-difference gradient checking.

/// Compares `analytic` against central differences of `f` around `point`.
///
/// Each coordinate is perturbed by `±step` in `f32`; the realized perturbation
/// is used as the denominator so rounding of `x ± step` does not bias the
/// estimate. Returns the maximum per-coordinate relative error, where entries
/// smaller than 10% of the largest gradient magnitude are compared against
/// that floor instead of their own magnitude. With `f32` forwards the central
/// difference carries noise of roughly `1e-7 * |f| / step`, which swamps
/// anything much smaller.
pub fn finite_difference_check<F>(point: &[f32], analytic: &[f32], step: f32, mut f: F) -> f64
where
    F: FnMut(&[f32]) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "gradient length must match point");
    let numeric = numeric_gradient(point, step, &mut f);
    relative_error(analytic, &numeric)
}

pub fn numeric_gradient<F>(point: &[f32], step: f32, f: &mut F) -> Vec<f64>
where
    F: FnMut(&[f32]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = x[i];
            let plus = orig + step;
            let minus = orig - step;
            x[i] = plus;
            let fp = f(&x);
            x[i] = minus;
            let fm = f(&x);
            x[i] = orig;
            (fp - fm) / (plus as f64 - minus as f64)
        })
        .collect()
}

pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .map(|&a| (a as f64).abs())
        .chain(numeric.iter().map(|n| n.abs()))
        .fold(0.0f64, f64::max);
    let floor = (scale * 0.1).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let a = a as f64;
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
