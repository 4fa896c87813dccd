//! Central-difference gradient estimates, used as the oracle for the tape.

/// Default step for [`finite_diff_gradient`].
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for [`relative_error`]. Gradients smaller than this are
/// compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `(f(θ + h e_i) - f(θ - h e_i)) / 2h` for every scalar `i` of `params`.
///
/// `f` is evaluated on a scratch copy; `params` is never modified.
pub fn finite_diff_gradient<F>(mut f: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut theta = params.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = theta[i];
            theta[i] = orig + h;
            let plus = f(&theta);
            theta[i] = orig - h;
            let minus = f(&theta);
            theta[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Index of the scalar with the largest error.
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        checked: analytic.len(),
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n);
        if e > report.max_relative_error || e.is_nan() {
            report.max_relative_error = e;
            report.worst_index = i;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_at_three() {
        let g = finite_diff_gradient(|t| t[0] * t[0], &[3.0], DEFAULT_STEP);
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function() {
        let g = finite_diff_gradient(|_| 4.25, &[1.0, -2.0, 0.5], DEFAULT_STEP);
        assert!(g.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn report_tracks_worst() {
        let r = compare_gradients(&[1.0, 2.0, 3.0], &[1.0, 2.2, 3.0]);
        assert_eq!(r.worst_index, 1);
        assert!((r.max_relative_error - 0.2 / 2.2).abs() < 1e-12);
        assert!(!r.passes(1e-4));
    }
}
