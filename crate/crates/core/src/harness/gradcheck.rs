//! Central-difference verification of every analytic gradient in the crate.
//!
//! Runs on a fixed tiny problem (4 audio tokens, 3 visual tokens, 6 channels,
//! vocabulary 8, caption length 5) so the whole suite finishes in well under a
//! second in release builds.

use crate::error::Result;
use crate::fusion::{self, FusionMode};
use crate::losses::{ce_loss, ot_loss, LossWeights};
use crate::model::{ForwardConfig, ModelSpec, ModelState};
use crate::numerics::{finite_difference_grad, GradCheckReport, Matrix, RngState};
use crate::sinkhorn::{similarity, sinkhorn_solve, SimilarityMatrix, SinkhornConfig};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for relative errors of near-zero gradient entries.
pub const FLOOR: f64 = 1e-6;

pub const TINY_AUDIO_TOKENS: usize = 4;
pub const TINY_VISUAL_TOKENS: usize = 3;
pub const TINY_CHANNELS: usize = 6;
pub const TINY_VOCAB: usize = 8;
pub const TINY_CAPTION: usize = 5;

#[derive(Clone, Debug)]
pub struct GradCheckSuite {
    pub reports: Vec<GradCheckReport>,
    pub tolerance: f64,
}

impl GradCheckSuite {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.passes(self.tolerance))
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckReport> {
        self.reports.iter().filter(|r| !r.passes(self.tolerance))
    }

    pub fn worst(&self) -> f64 {
        self.reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn tiny_model_spec() -> ModelSpec {
    ModelSpec {
        audio_dim: 5,
        visual_dim: 7,
        channels: TINY_CHANNELS,
        hidden: TINY_CHANNELS,
        vocab_size: TINY_VOCAB,
        audio_tokens: TINY_AUDIO_TOKENS,
        visual_tokens: TINY_VISUAL_TOKENS,
        caption_len: TINY_CAPTION,
    }
}

/// Checks loss, fusion and full-model gradients.
///
/// `sinkhorn` and `tau` come from the experiment config; `renormalize_rows`
/// selects the OT attention variant. The transport plan is frozen during
/// differentiation, matching the stop-gradient used by backpropagation.
pub fn run_gradcheck_suite(seed: u64, sinkhorn: &SinkhornConfig, tau: f64, renormalize_rows: bool) -> Result<GradCheckSuite> {
    let mut rng = RngState::new(seed);
    let mut reports = Vec::new();
    let compare = |name: String, a: &Matrix, n: &Matrix| GradCheckReport::compare(name, a, n, FLOOR);

    // alignment loss w.r.t. the similarity matrix
    let h_a = rng.normal_matrix(TINY_AUDIO_TOKENS, TINY_CHANNELS);
    let h_v = rng.normal_matrix(TINY_VISUAL_TOKENS, TINY_CHANNELS);
    let s = similarity(&h_a, &h_v)?;
    let plan = sinkhorn_solve(&s, sinkhorn)?.plan;
    let (_, grad_s) = ot_loss(&plan, &s, tau)?;
    let num_s = finite_difference_grad(|m| Ok(ot_loss(&plan, &SimilarityMatrix(m.clone()), tau)?.0), s.matrix(), STEP)?;
    reports.push(compare("ot_loss/similarity".into(), &grad_s, &num_s)?);

    // token cross-entropy w.r.t. logits
    let logits = rng.normal_matrix(TINY_CAPTION, TINY_VOCAB).scale(2.0);
    let targets: Vec<usize> = (0..TINY_CAPTION).map(|_| rng.below(TINY_VOCAB)).collect();
    let (_, grad_logits) = ce_loss(&logits, &targets)?;
    let num_logits = finite_difference_grad(|m| Ok(ce_loss(m, &targets)?.0), &logits, STEP)?;
    reports.push(compare("ce_loss/logits".into(), &grad_logits, &num_logits)?);

    // fusion + projection under a random linear readout
    let w = rng.normal_matrix(TINY_CHANNELS, TINY_CHANNELS);
    let readout = rng.normal_matrix(TINY_AUDIO_TOKENS + TINY_VISUAL_TOKENS, TINY_CHANNELS);
    for mode in FusionMode::ALL {
        let objective = |a: &Matrix, v: &Matrix, w: &Matrix| -> Result<f64> {
            fusion::fuse(mode, a, v, &plan, renormalize_rows, w)?.h_av.frobenius_dot(&readout)
        };
        let fused = fusion::fuse(mode, &h_a, &h_v, &plan, renormalize_rows, &w)?;
        let (g_aa, g_av, g_w) =
            fusion::concat_project_backward(&fused.attended_audio, &fused.attended_visual, &w, &readout)?;
        let (g_a, g_v) = match mode {
            FusionMode::Ot => fusion::ot_attention_backward(&plan, renormalize_rows, &g_aa, &g_av)?,
            FusionMode::Cross => fusion::baseline_cross_attention_backward(&h_a, &h_v, &g_aa, &g_av)?,
            FusionMode::None => (g_aa, g_av),
        };
        let n_a = finite_difference_grad(|x| objective(x, &h_v, &w), &h_a, STEP)?;
        let n_v = finite_difference_grad(|x| objective(&h_a, x, &w), &h_v, STEP)?;
        let n_w = finite_difference_grad(|x| objective(&h_a, &h_v, x), &w, STEP)?;
        let tag = mode.as_str();
        reports.push(compare(format!("fusion[{tag}]/h_a"), &g_a, &n_a)?);
        reports.push(compare(format!("fusion[{tag}]/h_v"), &g_v, &n_v)?);
        reports.push(compare(format!("fusion[{tag}]/projector"), &g_w, &n_w)?);
    }

    // full model, every parameter tensor
    let spec = tiny_model_spec();
    let mut base = ModelState::new(spec, seed)?;
    let pool = rng.normal_matrix(TINY_CAPTION, TINY_AUDIO_TOKENS + TINY_VISUAL_TOKENS);
    base.set_parameter("decoder.prefix_pool_weights", pool)?;
    let x_a = rng.normal_matrix(TINY_AUDIO_TOKENS, spec.audio_dim);
    let x_v = rng.normal_matrix(TINY_VISUAL_TOKENS, spec.visual_dim);
    let caption: Vec<usize> = (0..TINY_CAPTION).map(|_| rng.below(TINY_VOCAB)).collect();
    for mode in FusionMode::ALL {
        for lambda_ot in [0.0, 0.3] {
            let cfg = ForwardConfig {
                weights: LossWeights { lambda_ce: 1.0, lambda_ot, tau },
                fusion: mode,
                renormalize_rows,
                sinkhorn: *sinkhorn,
            };
            let mut state = base.clone();
            let cache = state.forward(&x_a, &x_v, &caption, &cfg)?;
            state.backward(&cache)?;
            for ((name, param), (_, grad)) in base.parameters().into_iter().zip(state.gradients()) {
                let numeric = finite_difference_grad(
                    |m| {
                        let mut probe = base.clone();
                        probe.set_parameter(name, m.clone())?;
                        Ok(probe.forward_with_plan(&x_a, &x_v, &caption, &cfg, &cache.plan)?.loss.total)
                    },
                    param,
                    STEP,
                )?;
                reports.push(compare(format!("model[{}, λ_OT={lambda_ot}]/{name}", mode.as_str()), grad, &numeric)?);
            }
        }
    }

    Ok(GradCheckSuite {
        reports,
        tolerance: TOLERANCE,
    })
}
