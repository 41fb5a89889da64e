use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// `log Σ exp(vᵢ)` with a max shift.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::arg("log_sum_exp of an empty vector"));
    }
    Ok(lse_unchecked(values))
}

#[inline]
pub(crate) fn lse_unchecked(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Replaces `values` with `softmax(values)`.
pub fn softmax_in_place(values: &mut [f64]) {
    let lse = lse_unchecked(values);
    for v in values.iter_mut() {
        *v = (*v - lse).exp();
    }
}

/// Row-wise `softmax(m / temperature)`.
pub fn row_softmax(m: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0) {
        return Err(Error::arg(format!("temperature must be positive, got {temperature}")));
    }
    let mut out = m.scale(1.0 / temperature);
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

/// Shannon entropy `−Σ q log q` with `0·log 0 = 0`.
pub fn entropy(q: &Matrix) -> Result<f64> {
    let mut h = 0.0;
    for (idx, &v) in q.as_slice().iter().enumerate() {
        if v < 0.0 {
            return Err(Error::arg(format!(
                "entropy of negative entry {v} at ({}, {})",
                idx / q.cols().max(1),
                idx % q.cols().max(1)
            )));
        }
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;
    use std::f64::consts::LN_2;

    #[test]
    fn lse_analytic_cases() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - LN_2).abs() < 1e-15);
        let big = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + LN_2)).abs() < 1e-12);
        let direct = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((log_sum_exp(&[1.0, 2.0, 3.0]).unwrap() - direct).abs() < 1e-14);
        assert!(log_sum_exp(&[-700.0, 700.0]).unwrap().is_finite());
    }

    #[test]
    fn lse_empty_is_an_error() {
        assert!(matches!(log_sum_exp(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn softmax_cases() {
        let uniform = row_softmax(&Matrix::filled(1, 4, 3.3), 0.5).unwrap();
        for &v in uniform.as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let p = row_softmax(&Matrix::from_rows(&[[0.0, 3f64.ln()]]), 1.0).unwrap();
        assert!((p[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((p[(0, 1)] - 0.75).abs() < 1e-15);
        assert!(row_softmax(&p, 0.0).is_err());
        assert!(row_softmax(&p, -1.0).is_err());
    }

    #[test]
    fn softmax_matches_naive_oracle() {
        let mut rng = RngState::new(3);
        let m = rng.uniform_matrix(4, 6, -0.1, 0.1);
        let tau = 0.07;
        let fast = row_softmax(&m, tau).unwrap();
        for i in 0..4 {
            let exps: Vec<f64> = m.row(i).iter().map(|v| (v / tau).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..6 {
                assert!((fast[(i, j)] - exps[j] / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn entropy_cases() {
        let u = Matrix::filled(2, 2, 0.25);
        assert!((entropy(&u).unwrap() - 4f64.ln()).abs() < 1e-15);
        let p = Matrix::from_rows(&[[0.5, 0.0], [0.0, 0.5]]);
        assert!((entropy(&p).unwrap() - LN_2).abs() < 1e-15);
        assert!(entropy(&Matrix::from_rows(&[[0.5, -0.1]])).is_err());
    }

    #[test]
    fn entropy_matches_elementwise_sum() {
        let mut rng = RngState::new(8);
        let raw = rng.uniform_matrix(3, 5, 0.0, 1.0);
        let q = raw.scale(1.0 / raw.sum());
        let mut oracle = 0.0;
        for i in 0..3 {
            for j in 0..5 {
                let v = q[(i, j)];
                oracle += -v * v.ln();
            }
        }
        assert!((entropy(&q).unwrap() - oracle).abs() < 1e-14);
    }
}
