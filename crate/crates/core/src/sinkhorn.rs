//! Entropy-regularized assignment between two token sets with uniform marginals.
//!
//! The plan maximizes `tr(QᵀS) + ε H(Q)` subject to every row summing to `1/N_a`
//! and every column to `1/N_v`. Its solution has the form
//! `Q = Diag(u) exp(S/ε) Diag(v)`; the scalings are found by alternating row and
//! column normalization, carried out on `log u` and `log v` so that small `ε`
//! never overflows the kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};
use crate::numerics::reduce::lse_unchecked;

/// Pairwise similarity between audio tokens (rows) and visual tokens (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix(pub Matrix);

impl SimilarityMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

/// Nonnegative coupling with (approximately) uniform marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan(pub Matrix);

impl TransportPlan {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    /// Uniform coupling `1/(N_a·N_v)` everywhere.
    pub fn uniform(rows: usize, cols: usize) -> Self {
        TransportPlan(Matrix::filled(rows, cols, 1.0 / (rows * cols) as f64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.1,
            tolerance: 1e-8,
            max_iters: 1000,
        }
    }
}

impl SinkhornConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        SinkhornConfig {
            epsilon,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::arg(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::arg(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_iters == 0 {
            return Err(Error::arg("max_iters must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornResult {
    pub plan: TransportPlan,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub log_u: Vec<f64>,
    pub log_v: Vec<f64>,
}

/// Cosine similarity between every row of `h_a` and every row of `h_v`.
pub fn similarity(h_a: &Matrix, h_v: &Matrix) -> Result<SimilarityMatrix> {
    if h_a.cols() != h_v.cols() {
        return Err(Error::shape("similarity", h_a.shape(), h_v.shape()));
    }
    let a_hat = normalize_rows(h_a, "audio")?;
    let v_hat = normalize_rows(h_v, "visual")?;
    let s = a_hat.matmul_t(&v_hat)?.map(|x| x.clamp(-1.0, 1.0));
    Ok(SimilarityMatrix(s))
}

/// Gradients of a scalar through [`similarity`] given `∂L/∂S`.
pub fn similarity_backward(h_a: &Matrix, h_v: &Matrix, grad_s: &Matrix) -> Result<(Matrix, Matrix)> {
    let a_hat = normalize_rows(h_a, "audio")?;
    let v_hat = normalize_rows(h_v, "visual")?;
    if grad_s.shape() != (h_a.rows(), h_v.rows()) {
        return Err(Error::shape("similarity_backward", grad_s.shape(), (h_a.rows(), h_v.rows())));
    }
    let grad_a_hat = grad_s.matmul(&v_hat)?;
    let grad_v_hat = grad_s.t_matmul(&a_hat)?;
    Ok((
        unnormalize_grad(h_a, &a_hat, &grad_a_hat),
        unnormalize_grad(h_v, &v_hat, &grad_v_hat),
    ))
}

fn normalize_rows(m: &Matrix, which: &str) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let norm = dot(m.row(i), m.row(i)).sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("{which} token row {i} has a non-finite norm")));
        }
        if norm == 0.0 {
            return Err(Error::arg(format!("{which} token row {i} has zero norm")));
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

// d(x/|x|) applied to an upstream gradient g: (g − x̂ (x̂·g)) / |x|
fn unnormalize_grad(x: &Matrix, x_hat: &Matrix, g_hat: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let norm = dot(x.row(i), x.row(i)).sqrt();
        let proj = dot(x_hat.row(i), g_hat.row(i));
        for ((o, &g), &xh) in out.row_mut(i).iter_mut().zip(g_hat.row(i)).zip(x_hat.row(i)) {
            *o = (g - xh * proj) / norm;
        }
    }
    out
}

/// Largest deviation of any row sum from `1/N_a` or column sum from `1/N_v`.
pub fn marginal_residual(plan: &TransportPlan) -> f64 {
    let q = plan.matrix();
    let (n_a, n_v) = q.shape();
    if n_a == 0 || n_v == 0 {
        return 0.0;
    }
    let row_target = 1.0 / n_a as f64;
    let col_target = 1.0 / n_v as f64;
    let rows = q.row_sums().into_iter().map(|s| (s - row_target).abs());
    let cols = q.col_sums().into_iter().map(|s| (s - col_target).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// Log-domain Sinkhorn-Knopp iteration with uniform marginals.
pub fn sinkhorn_solve(s: &SimilarityMatrix, config: &SinkhornConfig) -> Result<SinkhornResult> {
    sinkhorn_solve_observed(s, config, |_, _| {})
}

/// [`sinkhorn_solve`] reporting `(iteration, residual)` after every row+column sweep.
pub fn sinkhorn_solve_observed<F>(s: &SimilarityMatrix, config: &SinkhornConfig, mut observe: F) -> Result<SinkhornResult>
where
    F: FnMut(usize, f64),
{
    config.validate()?;
    let s = s.matrix();
    let (n_a, n_v) = s.shape();
    if n_a == 0 || n_v == 0 {
        return Err(Error::arg("similarity matrix has no tokens"));
    }
    if !s.is_finite() {
        return Err(Error::Numeric("similarity matrix has non-finite entries".into()));
    }

    let log_kernel = s.scale(1.0 / config.epsilon);
    let log_row_target = -(n_a as f64).ln();
    let log_col_target = -(n_v as f64).ln();
    let mut log_u = vec![0.0; n_a];
    let mut log_v = vec![0.0; n_v];
    let mut scratch = vec![0.0; n_a.max(n_v)];

    let mut plan = Matrix::zeros(n_a, n_v);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;

    while iterations < config.max_iters {
        iterations += 1;

        for i in 0..n_a {
            let row = log_kernel.row(i);
            for j in 0..n_v {
                scratch[j] = row[j] + log_v[j];
            }
            log_u[i] = log_row_target - lse_unchecked(&scratch[..n_v]);
        }
        for j in 0..n_v {
            for i in 0..n_a {
                scratch[i] = log_kernel[(i, j)] + log_u[i];
            }
            log_v[j] = log_col_target - lse_unchecked(&scratch[..n_a]);
        }
        if log_u.iter().chain(&log_v).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite scaling vector at sinkhorn iteration {iterations}"
            )));
        }

        reconstruct_into(&mut plan, &log_kernel, &log_u, &log_v);
        residual = marginal_residual(&TransportPlan(plan.clone()));
        observe(iterations, residual);
        if residual <= config.tolerance {
            break;
        }
    }

    Ok(SinkhornResult {
        plan: TransportPlan(plan),
        iterations,
        residual,
        converged: residual <= config.tolerance,
        log_u,
        log_v,
    })
}

fn reconstruct_into(plan: &mut Matrix, log_kernel: &Matrix, log_u: &[f64], log_v: &[f64]) {
    for (i, &lu) in log_u.iter().enumerate() {
        let k = log_kernel.row(i);
        for ((q, &lk), &lv) in plan.row_mut(i).iter_mut().zip(k).zip(log_v) {
            *q = (lu + lk + lv).exp();
        }
    }
}

/// Unregularized optimum for a square problem by exhaustive permutation search.
///
/// With uniform marginals and `N_a = N_v = n` the optimum is a permutation
/// scaled by `1/n`. Ties go to the lexicographically smallest permutation.
pub fn exact_ot_square(s: &SimilarityMatrix) -> Result<TransportPlan> {
    let (plan, _) = exact_ot_square_with_perm(s)?;
    Ok(plan)
}

/// [`exact_ot_square`] also returning the maximizing permutation (`perm[i]` = column of row `i`).
pub fn exact_ot_square_with_perm(s: &SimilarityMatrix) -> Result<(TransportPlan, Vec<usize>)> {
    let m = s.matrix();
    let (rows, cols) = m.shape();
    if rows != cols {
        return Err(Error::arg(format!("exact OT oracle needs a square matrix, got {rows}x{cols}")));
    }
    if rows == 0 || rows > 8 {
        return Err(Error::arg(format!("exact OT oracle supports 1..=8 tokens, got {rows}")));
    }
    let n = rows;
    let mut perm: Vec<usize> = (0..n).collect();
    let score = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| m[(i, j)]).sum::<f64>();
    let mut best = perm.clone();
    let mut best_score = score(&perm);
    while next_permutation(&mut perm) {
        let sc = score(&perm);
        if sc > best_score {
            best_score = sc;
            best.copy_from_slice(&perm);
        }
    }
    let mut q = Matrix::zeros(n, n);
    for (i, &j) in best.iter().enumerate() {
        q[(i, j)] = 1.0 / n as f64;
    }
    Ok((TransportPlan(q), best))
}

// Lexicographic successor; false once the sequence is the last permutation.
fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
