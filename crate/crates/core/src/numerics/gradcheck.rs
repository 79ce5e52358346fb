/// Central-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares an analytic gradient against central differences.
///
/// `f` returns `(value, gradient)` at a point. The result is the maximum over
/// coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<Func>(mut f: Func, point: &[f64]) -> f64
where
    Func: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(point);
    assert_eq!(analytic.len(), point.len(), "gradient length");
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + GRAD_CHECK_STEP;
        let (up, _) = f(&x);
        x[i] = orig - GRAD_CHECK_STEP;
        let (down, _) = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let err = grad_check(|x| (x[0] * x[0], vec![2.0 * x[0]]), &[3.0]);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = grad_check(|x| (x[0] * x[0], vec![3.0 * x[0]]), &[3.0]);
        assert!(err > 0.1);
    }
}
