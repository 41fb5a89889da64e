//! Training objectives: the transport-plan contrastive loss, token
//! cross-entropy and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::reduce::{lse_unchecked, softmax_in_place};
use crate::numerics::Matrix;
use crate::sinkhorn::{SimilarityMatrix, TransportPlan};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_ot: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ce: 1.0,
            lambda_ot: 0.3,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::arg(format!("tau must be positive, got {}", self.tau)));
        }
        if self.lambda_ce < 0.0 || self.lambda_ot < 0.0 {
            return Err(Error::arg("loss weights must be nonnegative"));
        }
        if !(self.lambda_ce > 0.0 || self.lambda_ot > 0.0) {
            return Err(Error::arg("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ot: f64,
    pub ce: f64,
    pub total: f64,
}

/// Contrastive alignment loss between a transport plan and the similarities it was solved from.
///
/// For the audio side, row `i` of `Q` is scored against every row `j` of `S` with
/// logit `⟨qᵢ, sⱼ⟩/τ` and the matching row `j = i` is the positive; the visual
/// side does the same with columns. The loss is the sum of all those
/// cross-entropies. The returned gradient is `∂L/∂S` with `Q` held constant.
pub fn ot_loss(q: &TransportPlan, s: &SimilarityMatrix, tau: f64) -> Result<(f64, Matrix)> {
    let (q, s) = (q.matrix(), s.matrix());
    if q.shape() != s.shape() {
        return Err(Error::shape("ot_loss", q.shape(), s.shape()));
    }
    if !(tau > 0.0) {
        return Err(Error::arg(format!("tau must be positive, got {tau}")));
    }

    // audio: logits = Q Sᵀ / τ  (N_a × N_a), ∂L/∂S = Gᵀ Q / τ
    let logits_a = q.matmul_t(s)?.scale(1.0 / tau);
    let (loss_a, g_a) = diagonal_cross_entropy(&logits_a);
    // visual: logits = Qᵀ S / τ  (N_v × N_v), ∂L/∂S = Q G / τ
    let logits_v = q.t_matmul(s)?.scale(1.0 / tau);
    let (loss_v, g_v) = diagonal_cross_entropy(&logits_v);

    let mut grad = g_a.t_matmul(q)?;
    grad.add_assign(&q.matmul(&g_v)?)?;
    Ok((loss_a + loss_v, grad.scale(1.0 / tau)))
}

// Σᵢ −log softmax(logitsᵢ)[i] and its gradient softmax − I.
fn diagonal_cross_entropy(logits: &Matrix) -> (f64, Matrix) {
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        // clamp: a single-candidate softmax is exactly 1 but lse may round
        loss += (lse_unchecked(row) - row[i]).max(0.0);
        let g = grad.row_mut(i);
        softmax_in_place(g);
        g[i] -= 1.0;
    }
    (loss, grad)
}

/// Mean next-token cross-entropy over `T` positions.
pub fn ce_loss(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    let (t, vocab) = logits.shape();
    if targets.len() != t {
        return Err(Error::arg(format!("{} targets for {t} logit rows", targets.len())));
    }
    if t == 0 {
        return Err(Error::arg("cross-entropy needs at least one position"));
    }
    if let Some((pos, &y)) = targets.iter().enumerate().find(|(_, &y)| y >= vocab) {
        return Err(Error::arg(format!("target {y} at position {pos} is outside vocabulary of {vocab}")));
    }
    let scale = 1.0 / t as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        loss += lse_unchecked(logits.row(i)) - logits[(i, y)];
        let g = grad.row_mut(i);
        softmax_in_place(g);
        g[y] -= 1.0;
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss * scale, grad))
}

pub fn total_loss(ot: f64, ce: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        ot,
        ce,
        total: w.lambda_ce * ce + w.lambda_ot * ot,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_grad, GradCheckReport, RngState};
    use crate::sinkhorn::{similarity, sinkhorn_solve, SinkhornConfig};
    use std::f64::consts::LN_2;

    // Scalar re-implementation: every inner product and softmax by explicit loops.
    fn ot_loss_oracle(q: &Matrix, s: &Matrix, tau: f64) -> f64 {
        let (na, nv) = q.shape();
        let mut total = 0.0;
        for i in 0..na {
            let logit = |j: usize| (0..nv).map(|k| q[(i, k)] * s[(j, k)]).sum::<f64>() / tau;
            let denom: f64 = (0..na).map(|j| logit(j).exp()).sum();
            total -= (logit(i).exp() / denom).ln();
        }
        for i in 0..nv {
            let logit = |j: usize| (0..na).map(|k| q[(k, i)] * s[(k, j)]).sum::<f64>() / tau;
            let denom: f64 = (0..nv).map(|j| logit(j).exp()).sum();
            total -= (logit(i).exp() / denom).ln();
        }
        total
    }

    fn solved_instance(seed: u64, na: usize, nv: usize) -> (TransportPlan, SimilarityMatrix) {
        let mut rng = RngState::new(seed);
        let s = similarity(&rng.normal_matrix(na, 5), &rng.normal_matrix(nv, 5)).unwrap();
        let plan = sinkhorn_solve(&s, &SinkhornConfig::default()).unwrap().plan;
        (plan, s)
    }

    #[test]
    fn singleton_is_exactly_zero() {
        let q = TransportPlan(Matrix::from_rows(&[[1.0]]));
        for (s, tau) in [(0.3, 0.07), (-0.9, 1.0), (1.0, 1e-3)] {
            let (loss, grad) = ot_loss(&q, &SimilarityMatrix(Matrix::from_rows(&[[s]])), tau).unwrap();
            assert_eq!(loss, 0.0);
            assert_eq!(grad[(0, 0)], 0.0);
        }
    }

    #[test]
    fn constant_similarity_gives_four_ln_two() {
        let (loss, _) = ot_loss(
            &TransportPlan::uniform(2, 2),
            &SimilarityMatrix(Matrix::filled(2, 2, 0.6)),
            0.07,
        )
        .unwrap();
        assert!((loss - 4.0 * LN_2).abs() < 1e-9);
    }

    #[test]
    fn matches_explicit_loop_oracle() {
        let (q, s) = solved_instance(7, 3, 4);
        let (loss, _) = ot_loss(&q, &s, 0.07).unwrap();
        let oracle = ot_loss_oracle(q.matrix(), s.matrix(), 0.07);
        assert!((loss - oracle).abs() < 1e-12 * oracle.max(1.0), "{loss} vs {oracle}");
    }

    #[test]
    fn gradient_with_plan_fixed_matches_finite_differences() {
        for (seed, na, nv) in [(1, 3, 4), (2, 6, 9), (3, 5, 2)] {
            let (q, s) = solved_instance(seed, na, nv);
            let (_, grad) = ot_loss(&q, &s, 0.07).unwrap();
            let numeric = finite_difference_grad(
                |m| Ok(ot_loss(&q, &SimilarityMatrix(m.clone()), 0.07)?.0),
                s.matrix(),
                1e-5,
            )
            .unwrap();
            let report = GradCheckReport::compare("grad_s", &grad, &numeric, 1e-6).unwrap();
            assert!(report.passes(1e-4), "{report:?}");
        }
    }

    #[test]
    fn ot_loss_errors() {
        let q = TransportPlan::uniform(2, 3);
        assert!(matches!(
            ot_loss(&q, &SimilarityMatrix(Matrix::zeros(3, 2)), 0.1),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            ot_loss(&q, &SimilarityMatrix(Matrix::zeros(2, 3)), 0.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn ce_uniform_logits() {
        let (loss, grad) = ce_loss(&Matrix::zeros(4, 8), &[0, 3, 7, 1]).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
        for i in 0..4 {
            assert!(grad.row(i).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn ce_perfect_prediction_limit() {
        let targets = [2, 0, 1];
        let logits = Matrix::from_fn(3, 4, |i, j| if targets[i] == j { 60.0 } else { 0.0 });
        let (loss, _) = ce_loss(&logits, &targets).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn ce_matches_explicit_oracle_and_finite_differences() {
        let mut rng = RngState::new(17);
        let logits = rng.normal_matrix(5, 11).scale(2.0);
        let targets = [0, 10, 4, 4, 7];
        let (loss, grad) = ce_loss(&logits, &targets).unwrap();
        let mut oracle = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let denom: f64 = logits.row(i).iter().map(|v| v.exp()).sum();
            oracle -= (logits[(i, y)].exp() / denom).ln();
        }
        oracle /= 5.0;
        assert!((loss - oracle).abs() < 1e-12);
        let numeric = finite_difference_grad(|m| Ok(ce_loss(m, &targets)?.0), &logits, 1e-5).unwrap();
        let report = GradCheckReport::compare("grad_logits", &grad, &numeric, 1e-6).unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn ce_rejects_out_of_range_target() {
        let err = ce_loss(&Matrix::zeros(3, 4), &[0, 4, 1]).unwrap_err();
        assert!(err.to_string().contains("position 1"), "{err}");
        assert!(ce_loss(&Matrix::zeros(3, 4), &[0, 1]).is_err());
    }

    #[test]
    fn total_weighting() {
        let w = |ce, ot| LossWeights { lambda_ce: ce, lambda_ot: ot, tau: 0.07 };
        assert_eq!(total_loss(4.0, 2.0, &w(1.0, 0.0)).total, 2.0);
        assert_eq!(total_loss(4.0, 2.0, &w(0.0, 1.0)).total, 4.0);
        let b = total_loss(4.0, 2.0, &w(1.0, 0.5));
        assert_eq!((b.ot, b.ce, b.total), (4.0, 2.0, 4.0));
        assert!(w(0.0, 0.0).validate().is_err());
        assert!(LossWeights { tau: 0.0, ..Default::default() }.validate().is_err());
    }
}
