use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Central-difference gradient `(f(x + h·eᵢⱼ) − f(x − h·eᵢⱼ)) / 2h` of a scalar function.
pub fn finite_difference_grad<F>(mut f: F, at: &Matrix, step: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::arg(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = at.clone();
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    for idx in 0..at.len() {
        let (i, j) = (idx / at.cols(), idx % at.cols());
        let orig = probe.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + step;
        let plus = f(&probe)?;
        probe.as_mut_slice()[idx] = orig - step;
        let minus = f(&probe)?;
        probe.as_mut_slice()[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function value while differentiating entry ({i}, {j})"
            )));
        }
        grad[(i, j)] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Entrywise `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Worst entrywise discrepancy between an analytic and a numeric gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn compare(name: impl Into<String>, analytic: &Matrix, numeric: &Matrix, floor: f64) -> Result<Self> {
        if analytic.shape() != numeric.shape() {
            return Err(Error::shape("gradient comparison", analytic.shape(), numeric.shape()));
        }
        let mut report = GradCheckReport {
            name: name.into(),
            max_rel_error: 0.0,
            worst_index: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
        };
        let cols = analytic.cols().max(1);
        for (idx, (&a, &n)) in analytic.as_slice().iter().zip(numeric.as_slice()).enumerate() {
            let err = relative_error(a, n, floor);
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = err;
                report.worst_index = (idx / cols, idx % cols);
                report.analytic = a;
                report.numeric = n;
            }
        }
        Ok(report)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    #[test]
    fn linear_function_gives_ones() {
        let x = RngState::new(1).normal_matrix(3, 2);
        let g = finite_difference_grad(|m| Ok(m.sum()), &x, 1e-5).unwrap();
        for &v in g.as_slice() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn half_squared_norm_gives_identity() {
        let x = RngState::new(2).normal_matrix(4, 3);
        let g = finite_difference_grad(|m| Ok(0.5 * m.frobenius_dot(m)?), &x, 1e-5).unwrap();
        assert!(g.max_abs_diff(&x) < 1e-8);
    }

    #[test]
    fn non_finite_reports_index() {
        let x = Matrix::from_rows(&[[1.0, 0.0]]);
        let err = finite_difference_grad(
            |m| Ok(if m[(0, 1)] != 0.0 { f64::NAN } else { 0.0 }),
            &x,
            1e-3,
        )
        .unwrap_err();
        assert!(err.to_string().contains("(0, 1)"), "{err}");
        assert!(finite_difference_grad(|m| Ok(m.sum()), &x, 0.0).is_err());
    }

    #[test]
    fn report_finds_worst_entry() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]);
        let n = Matrix::from_rows(&[[1.0, 2.2]]);
        let r = GradCheckReport::compare("x", &a, &n, 1e-8).unwrap();
        assert_eq!(r.worst_index, (0, 1));
        assert!((r.max_rel_error - 0.2 / 2.2).abs() < 1e-12);
        assert!(!r.passes(1e-4));
    }
}
