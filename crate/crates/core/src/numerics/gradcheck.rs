//! Central-difference verification of analytic gradients.

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub pass: bool,
}

/// Compares the analytic gradient of `f` at `at` against central finite
/// differences with the given step. `f` returns (value, gradient).
///
/// The relative error for coordinate k is
/// |g_k − fd_k| / max(1, |g_k|, |fd_k|).
pub fn grad_check<F>(f: &F, at: &[f64], step: f64, tolerance: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(at);
    assert_eq!(
        analytic.len(),
        at.len(),
        "gradient length must match parameter length"
    );
    let mut max_rel_err = 0.0_f64;
    let mut worst_index = 0;
    let mut point = at.to_vec();
    for k in 0..at.len() {
        let original = point[k];
        point[k] = original + step;
        let up = f(&point).0;
        point[k] = original - step;
        let down = f(&point).0;
        point[k] = original;
        let fd = (up - down) / (2.0 * step);
        let denom = 1.0_f64.max(analytic[k].abs()).max(fd.abs());
        let rel = (analytic[k] - fd).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = k;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_index,
        pass: max_rel_err <= tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_has_near_zero_error() {
        let f = |x: &[f64]| {
            let v = 3.0 * x[0] - 2.0 * x[1] + 0.5;
            (v, vec![3.0, -2.0])
        };
        let report = grad_check(&f, &[0.7, -0.4], 1e-5, 1e-10);
        assert!(report.pass, "max_rel_err = {}", report.max_rel_err);
    }

    #[test]
    fn exponential_at_zero_is_tight() {
        let f = |x: &[f64]| (x[0].exp(), vec![x[0].exp()]);
        let report = grad_check(&f, &[0.0], 1e-5, 1e-9);
        assert!(report.pass, "max_rel_err = {}", report.max_rel_err);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let f = |x: &[f64]| (x[0] * x[0], vec![3.0 * x[0]]);
        let report = grad_check(&f, &[1.0], 1e-5, 1e-4);
        assert!(!report.pass);
        assert_eq!(report.worst_index, 0);
    }
}
