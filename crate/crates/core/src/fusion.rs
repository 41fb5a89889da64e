//! Audio-visual token fusion.
//!
//! [`ot_attention`] uses the solved transport plan directly as the attention
//! matrix with a residual connection. [`baseline_cross_attention`] is the
//! parameter-free scaled dot-product comparator. Both feed
//! [`concat_project`], which stacks the two token sets and applies the
//! bias-free projector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{row_softmax, Matrix};
use crate::sinkhorn::TransportPlan;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Transport plan as attention weights.
    Ot,
    /// Softmax scaled dot-product attention.
    Cross,
    /// Plain concatenation.
    None,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Ot, FusionMode::Cross, FusionMode::None];

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Ot => "ot",
            FusionMode::Cross => "cross",
            FusionMode::None => "none",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ot" => Ok(FusionMode::Ot),
            "cross" => Ok(FusionMode::Cross),
            "none" => Ok(FusionMode::None),
            other => Err(Error::arg(format!("unknown fusion mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures {
    pub h_av: Matrix,
    pub attended_audio: Matrix,
    pub attended_visual: Matrix,
}

/// Attention weights actually applied by [`ot_attention`]: `(audio←visual, visual←audio)`.
pub fn ot_attention_weights(plan: &TransportPlan, renormalize_rows: bool) -> (Matrix, Matrix) {
    let q = plan.matrix();
    let qt = q.transpose();
    if renormalize_rows {
        (normalize_rows(q), normalize_rows(&qt))
    } else {
        (q.clone(), qt)
    }
}

fn normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let sum: f64 = out.row(i).iter().sum();
        if sum > 0.0 {
            out.row_mut(i).iter_mut().for_each(|v| *v /= sum);
        }
    }
    out
}

/// `ĥ_a = h_a + Q h_v`, `ĥ_v = h_v + Qᵀ h_a`.
///
/// With `renormalize_rows` each row of `Q` (and of `Qᵀ`) is rescaled to sum to one
/// first. Otherwise the plan is used as solved, whose rows sum to `1/N_a`.
pub fn ot_attention(
    h_a: &Matrix,
    h_v: &Matrix,
    plan: &TransportPlan,
    renormalize_rows: bool,
) -> Result<(Matrix, Matrix)> {
    check_pair("ot_attention", h_a, h_v)?;
    if plan.shape() != (h_a.rows(), h_v.rows()) {
        return Err(Error::shape("ot_attention plan", plan.shape(), (h_a.rows(), h_v.rows())));
    }
    let (w_av, w_va) = ot_attention_weights(plan, renormalize_rows);
    let attended_audio = h_a.add(&w_av.matmul(h_v)?)?;
    let attended_visual = h_v.add(&w_va.matmul(h_a)?)?;
    Ok((attended_audio, attended_visual))
}

/// Input gradients of [`ot_attention`] with the plan held constant.
pub fn ot_attention_backward(
    plan: &TransportPlan,
    renormalize_rows: bool,
    grad_audio: &Matrix,
    grad_visual: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let (w_av, w_va) = ot_attention_weights(plan, renormalize_rows);
    let mut g_a = grad_audio.clone();
    g_a.add_assign(&w_va.t_matmul(grad_visual)?)?;
    let mut g_v = grad_visual.clone();
    g_v.add_assign(&w_av.t_matmul(grad_audio)?)?;
    Ok((g_a, g_v))
}

/// `ĥ_a = h_a + softmax(h_a h_vᵀ/√C) h_v` and symmetrically for the visual side.
pub fn baseline_cross_attention(h_a: &Matrix, h_v: &Matrix) -> Result<(Matrix, Matrix)> {
    check_pair("baseline_cross_attention", h_a, h_v)?;
    let (att_av, att_va) = cross_attention_weights(h_a, h_v)?;
    Ok((
        h_a.add(&att_av.matmul(h_v)?)?,
        h_v.add(&att_va.matmul(h_a)?)?,
    ))
}

fn cross_attention_weights(h_a: &Matrix, h_v: &Matrix) -> Result<(Matrix, Matrix)> {
    let temperature = (h_a.cols() as f64).sqrt();
    let logits = h_a.matmul_t(h_v)?;
    Ok((
        row_softmax(&logits, temperature)?,
        row_softmax(&logits.transpose(), temperature)?,
    ))
}

/// Input gradients of [`baseline_cross_attention`].
pub fn baseline_cross_attention_backward(
    h_a: &Matrix,
    h_v: &Matrix,
    grad_audio: &Matrix,
    grad_visual: &Matrix,
) -> Result<(Matrix, Matrix)> {
    check_pair("baseline_cross_attention_backward", h_a, h_v)?;
    let (att_av, att_va) = cross_attention_weights(h_a, h_v)?;
    let scale = 1.0 / (h_a.cols() as f64).sqrt();
    let mut g_a = grad_audio.clone();
    let mut g_v = grad_visual.clone();
    // queries = h_a, keys/values = h_v
    attention_backward(&att_av, h_a, h_v, grad_audio, scale, &mut g_a, &mut g_v)?;
    // queries = h_v, keys/values = h_a
    attention_backward(&att_va, h_v, h_a, grad_visual, scale, &mut g_v, &mut g_a)?;
    Ok((g_a, g_v))
}

// out = softmax(scale · q kᵀ) k, accumulating ∂/∂q and ∂/∂k.
fn attention_backward(
    att: &Matrix,
    queries: &Matrix,
    keys: &Matrix,
    grad_out: &Matrix,
    scale: f64,
    g_queries: &mut Matrix,
    g_keys: &mut Matrix,
) -> Result<()> {
    // value path
    g_keys.add_assign(&att.t_matmul(grad_out)?)?;
    let g_att = grad_out.matmul_t(keys)?;
    let mut g_logits = Matrix::zeros(att.rows(), att.cols());
    for i in 0..att.rows() {
        let p = att.row(i);
        let g = g_att.row(i);
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, &pi), &gi) in g_logits.row_mut(i).iter_mut().zip(p).zip(g) {
            *o = pi * (gi - inner) * scale;
        }
    }
    g_queries.add_assign(&g_logits.matmul(keys)?)?;
    g_keys.add_assign(&g_logits.t_matmul(queries)?)?;
    Ok(())
}

/// Token-wise concatenation (audio rows first) followed by right-multiplication by `w`.
pub fn concat_project(attended_audio: &Matrix, attended_visual: &Matrix, w: &Matrix) -> Result<Matrix> {
    let stacked = attended_audio.vstack(attended_visual)?;
    if stacked.cols() != w.rows() {
        return Err(Error::shape("concat_project", stacked.shape(), w.shape()));
    }
    stacked.matmul(w)
}

/// Gradients of [`concat_project`]: `(∂audio, ∂visual, ∂w)`.
pub fn concat_project_backward(
    attended_audio: &Matrix,
    attended_visual: &Matrix,
    w: &Matrix,
    grad_out: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    let stacked = attended_audio.vstack(attended_visual)?;
    let grad_w = stacked.t_matmul(grad_out)?;
    let grad_stacked = grad_out.matmul_t(w)?;
    let n_a = attended_audio.rows();
    Ok((
        grad_stacked.slice_rows(0, n_a),
        grad_stacked.slice_rows(n_a, grad_stacked.rows()),
        grad_w,
    ))
}

/// Runs the selected fusion and projection in one call.
pub fn fuse(
    mode: FusionMode,
    h_a: &Matrix,
    h_v: &Matrix,
    plan: &TransportPlan,
    renormalize_rows: bool,
    w: &Matrix,
) -> Result<FusedFeatures> {
    let (attended_audio, attended_visual) = match mode {
        FusionMode::Ot => ot_attention(h_a, h_v, plan, renormalize_rows)?,
        FusionMode::Cross => baseline_cross_attention(h_a, h_v)?,
        FusionMode::None => {
            check_pair("fuse", h_a, h_v)?;
            (h_a.clone(), h_v.clone())
        }
    };
    let h_av = concat_project(&attended_audio, &attended_visual, w)?;
    Ok(FusedFeatures {
        h_av,
        attended_audio,
        attended_visual,
    })
}

fn check_pair(op: &'static str, h_a: &Matrix, h_v: &Matrix) -> Result<()> {
    if h_a.cols() != h_v.cols() {
        return Err(Error::shape(op, h_a.shape(), h_v.shape()));
    }
    Ok(())
}
