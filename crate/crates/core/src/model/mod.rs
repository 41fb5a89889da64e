//! Toy end-to-end pipeline: linear encoders, similarity + transport plan,
//! fusion, projection, a prefix-conditioned decoder, and hand-derived
//! gradients for every trainable tensor.
//!
//! The transport plan is a stop-gradient quantity: [`ModelState::backward`]
//! differentiates the objective with `Q*` frozen at the value computed in the
//! forward pass. [`ModelState::forward_with_plan`] evaluates exactly that
//! frozen objective, which is what finite-difference checks compare against.

mod layers;
mod optim;

pub use layers::{DecoderCache, LinearLayer, ToyDecoder};
pub use optim::{adamw_update, lr_at, AdamConfig, Moments, ScheduleConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{self, FusedFeatures, FusionMode};
use crate::losses::{ce_loss, ot_loss, total_loss, LossBreakdown, LossWeights};
use crate::numerics::{Matrix, RngState};
use crate::sinkhorn::{similarity, similarity_backward, sinkhorn_solve, SimilarityMatrix, SinkhornConfig, SinkhornResult, TransportPlan};

/// Architecture sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub audio_dim: usize,
    pub visual_dim: usize,
    /// Shared encoder width `C`.
    pub channels: usize,
    /// Decoder width `D`, the projector output.
    pub hidden: usize,
    pub vocab_size: usize,
    pub audio_tokens: usize,
    pub visual_tokens: usize,
    pub caption_len: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("audio_dim", self.audio_dim),
            ("visual_dim", self.visual_dim),
            ("channels", self.channels),
            ("hidden", self.hidden),
            ("audio_tokens", self.audio_tokens),
            ("visual_tokens", self.visual_tokens),
            ("caption_len", self.caption_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::arg(format!("model {name} must be at least 1")));
        }
        if self.vocab_size < 2 {
            return Err(Error::arg("vocab_size must be at least 2"));
        }
        Ok(())
    }
}

/// Everything besides parameters that shapes a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardConfig {
    pub weights: LossWeights,
    pub fusion: FusionMode,
    pub renormalize_rows: bool,
    pub sinkhorn: SinkhornConfig,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        ForwardConfig {
            weights: LossWeights::default(),
            fusion: FusionMode::Ot,
            renormalize_rows: false,
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

/// Intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub state_version: u64,
    pub config: ForwardConfig,
    pub x_a: Matrix,
    pub x_v: Matrix,
    pub h_a: Matrix,
    pub h_v: Matrix,
    pub similarity: SimilarityMatrix,
    pub plan: TransportPlan,
    /// Solver diagnostics; `None` when the plan was supplied by the caller.
    pub solve: Option<SinkhornResult>,
    pub ot_grad_s: Matrix,
    pub fused: FusedFeatures,
    pub decoder: DecoderCache,
    pub ce_grad_logits: Matrix,
    pub targets: Vec<usize>,
    pub loss: LossBreakdown,
}

impl ForwardCache {
    pub fn logits(&self) -> &Matrix {
        &self.decoder.logits
    }
}

/// All trainable tensors, their gradients and AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub encoder_a: LinearLayer,
    pub encoder_v: LinearLayer,
    /// Bias-free projector into the decoder width.
    pub projector: LinearLayer,
    pub decoder: ToyDecoder,
    pub moments: Vec<Moments>,
    pub step_count: u64,
    version: u64,
}

/// Stable parameter names in checkpoint and optimizer order.
pub const PARAMETER_NAMES: [&str; 9] = [
    "encoder_a.w",
    "encoder_a.b",
    "encoder_v.w",
    "encoder_v.b",
    "projector.w",
    "decoder.token_embedding",
    "decoder.prefix_pool_weights",
    "decoder.output_head.w",
    "decoder.output_head.b",
];

impl ModelState {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let root = RngState::new(seed);
        let mut rng = root.fork(0x6d6f_64656c);
        let encoder_a = LinearLayer::random(spec.audio_dim, spec.channels, true, &mut rng);
        let encoder_v = LinearLayer::random(spec.visual_dim, spec.channels, true, &mut rng);
        let projector = LinearLayer::random(spec.channels, spec.hidden, false, &mut rng);
        let decoder = ToyDecoder::random(
            spec.vocab_size,
            spec.hidden,
            spec.audio_tokens + spec.visual_tokens,
            spec.caption_len,
            &mut rng,
        );
        let mut state = ModelState {
            spec,
            encoder_a,
            encoder_v,
            projector,
            decoder,
            moments: Vec::new(),
            step_count: 0,
            version: 0,
        };
        state.moments = state.parameters().iter().map(|(_, p)| Moments::zeros_like(p)).collect();
        Ok(state)
    }

    /// Replaces both encoder weights with identities and zero biases.
    pub fn set_identity_encoders(&mut self) -> Result<()> {
        if self.spec.audio_dim != self.spec.channels || self.spec.visual_dim != self.spec.channels {
            return Err(Error::arg("identity encoders need audio_dim == visual_dim == channels"));
        }
        let c = self.spec.channels;
        self.encoder_a = LinearLayer::from_weights(Matrix::identity(c), true);
        self.encoder_v = LinearLayer::from_weights(Matrix::identity(c), true);
        self.version += 1;
        Ok(())
    }

    /// Incremented whenever parameters change; caches from older versions are rejected.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn parameters(&self) -> Vec<(&'static str, &Matrix)> {
        let d = &self.decoder;
        vec![
            (PARAMETER_NAMES[0], &self.encoder_a.w),
            (PARAMETER_NAMES[1], self.encoder_a.b.as_ref().expect("encoder bias")),
            (PARAMETER_NAMES[2], &self.encoder_v.w),
            (PARAMETER_NAMES[3], self.encoder_v.b.as_ref().expect("encoder bias")),
            (PARAMETER_NAMES[4], &self.projector.w),
            (PARAMETER_NAMES[5], &d.token_embedding),
            (PARAMETER_NAMES[6], &d.prefix_pool_weights),
            (PARAMETER_NAMES[7], &d.output_head.w),
            (PARAMETER_NAMES[8], d.output_head.b.as_ref().expect("head bias")),
        ]
    }

    pub fn gradients(&self) -> Vec<(&'static str, &Matrix)> {
        let d = &self.decoder;
        vec![
            (PARAMETER_NAMES[0], &self.encoder_a.grad_w),
            (PARAMETER_NAMES[1], self.encoder_a.grad_b.as_ref().expect("encoder bias")),
            (PARAMETER_NAMES[2], &self.encoder_v.grad_w),
            (PARAMETER_NAMES[3], self.encoder_v.grad_b.as_ref().expect("encoder bias")),
            (PARAMETER_NAMES[4], &self.projector.grad_w),
            (PARAMETER_NAMES[5], &d.grad_token_embedding),
            (PARAMETER_NAMES[6], &d.grad_prefix_pool_weights),
            (PARAMETER_NAMES[7], &d.output_head.grad_w),
            (PARAMETER_NAMES[8], d.output_head.grad_b.as_ref().expect("head bias")),
        ]
    }

    fn parameters_and_gradients_mut(&mut self) -> Vec<(&mut Matrix, &Matrix)> {
        let d = &mut self.decoder;
        vec![
            (&mut self.encoder_a.w, &self.encoder_a.grad_w),
            (self.encoder_a.b.as_mut().expect("encoder bias"), self.encoder_a.grad_b.as_ref().expect("encoder bias")),
            (&mut self.encoder_v.w, &self.encoder_v.grad_w),
            (self.encoder_v.b.as_mut().expect("encoder bias"), self.encoder_v.grad_b.as_ref().expect("encoder bias")),
            (&mut self.projector.w, &self.projector.grad_w),
            (&mut d.token_embedding, &d.grad_token_embedding),
            (&mut d.prefix_pool_weights, &d.grad_prefix_pool_weights),
            (&mut d.output_head.w, &d.output_head.grad_w),
            (d.output_head.b.as_mut().expect("head bias"), d.output_head.grad_b.as_ref().expect("head bias")),
        ]
    }

    /// Overwrites one named parameter, keeping its shape.
    pub fn set_parameter(&mut self, name: &str, value: Matrix) -> Result<()> {
        let idx = PARAMETER_NAMES
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::arg(format!("unknown parameter `{name}`")))?;
        let mut slots = self.parameters_and_gradients_mut();
        let slot = &mut slots[idx].0;
        if slot.shape() != value.shape() {
            return Err(Error::Tensor {
                tensor: name.to_string(),
                message: format!("expected shape {:?}, found {:?}", slot.shape(), value.shape()),
            });
        }
        **slot = value;
        self.version += 1;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.encoder_a.zero_grad();
        self.encoder_v.zero_grad();
        self.projector.zero_grad();
        self.decoder.zero_grad();
    }

    /// Full pipeline: encoders, similarity, transport plan, losses, fusion, decoder.
    pub fn forward(&self, x_a: &Matrix, x_v: &Matrix, targets: &[usize], cfg: &ForwardConfig) -> Result<ForwardCache> {
        self.forward_inner(x_a, x_v, targets, cfg, None)
    }

    /// Same as [`forward`](Self::forward) but with the transport plan supplied instead of solved.
    pub fn forward_with_plan(
        &self,
        x_a: &Matrix,
        x_v: &Matrix,
        targets: &[usize],
        cfg: &ForwardConfig,
        plan: &TransportPlan,
    ) -> Result<ForwardCache> {
        self.forward_inner(x_a, x_v, targets, cfg, Some(plan))
    }

    fn forward_inner(
        &self,
        x_a: &Matrix,
        x_v: &Matrix,
        targets: &[usize],
        cfg: &ForwardConfig,
        plan_override: Option<&TransportPlan>,
    ) -> Result<ForwardCache> {
        if x_a.rows() == 0 || x_v.rows() == 0 {
            return Err(Error::arg("both modalities need at least one token"));
        }
        cfg.weights.validate()?;
        let h_a = self.encoder_a.forward(x_a)?;
        let h_v = self.encoder_v.forward(x_v)?;
        let s = similarity(&h_a, &h_v)?;
        let (plan, solve) = match plan_override {
            Some(p) => {
                if p.shape() != s.shape() {
                    return Err(Error::shape("supplied plan", p.shape(), s.shape()));
                }
                (p.clone(), None)
            }
            None => {
                let result = sinkhorn_solve(&s, &cfg.sinkhorn)?;
                (result.plan.clone(), Some(result))
            }
        };
        let (ot, ot_grad_s) = ot_loss(&plan, &s, cfg.weights.tau)?;
        let fused = fusion::fuse(cfg.fusion, &h_a, &h_v, &plan, cfg.renormalize_rows, &self.projector.w)?;
        let decoder = self.decoder.forward(&fused.h_av, targets)?;
        let (ce, ce_grad_logits) = ce_loss(&decoder.logits, targets)?;
        let loss = total_loss(ot, ce, &cfg.weights);
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss:?}")));
        }
        Ok(ForwardCache {
            state_version: self.version,
            config: *cfg,
            x_a: x_a.clone(),
            x_v: x_v.clone(),
            h_a,
            h_v,
            similarity: s,
            plan,
            solve,
            ot_grad_s,
            fused,
            decoder,
            ce_grad_logits,
            targets: targets.to_vec(),
            loss,
        })
    }

    /// Clears gradient buffers and fills them with `∂total/∂θ` for this cache.
    pub fn backward(&mut self, cache: &ForwardCache) -> Result<()> {
        self.zero_grad();
        self.accumulate_backward(cache, 1.0)
    }

    /// Adds `scale · ∂total/∂θ` to the gradient buffers.
    pub fn accumulate_backward(&mut self, cache: &ForwardCache, scale: f64) -> Result<()> {
        if cache.state_version != self.version {
            return Err(Error::State(format!(
                "forward cache from parameter version {} used with version {}",
                cache.state_version, self.version
            )));
        }
        let cfg = &cache.config;
        let w = cfg.weights;

        // cross-entropy path
        let g_logits = cache.ce_grad_logits.scale(w.lambda_ce);
        let g_h_av = self.decoder.backward(&cache.fused.h_av, &cache.decoder, &g_logits, scale)?;
        let (g_att_a, g_att_v, g_proj) = fusion::concat_project_backward(
            &cache.fused.attended_audio,
            &cache.fused.attended_visual,
            &self.projector.w,
            &g_h_av,
        )?;
        self.projector.grad_w.axpy(scale, &g_proj)?;
        let (mut g_h_a, mut g_h_v) = match cfg.fusion {
            FusionMode::Ot => fusion::ot_attention_backward(&cache.plan, cfg.renormalize_rows, &g_att_a, &g_att_v)?,
            FusionMode::Cross => fusion::baseline_cross_attention_backward(&cache.h_a, &cache.h_v, &g_att_a, &g_att_v)?,
            FusionMode::None => (g_att_a, g_att_v),
        };

        // alignment path, plan held fixed
        if w.lambda_ot != 0.0 {
            let g_s = cache.ot_grad_s.scale(w.lambda_ot);
            let (ga, gv) = similarity_backward(&cache.h_a, &cache.h_v, &g_s)?;
            g_h_a.add_assign(&ga)?;
            g_h_v.add_assign(&gv)?;
        }

        self.encoder_a.backward(&cache.x_a, &g_h_a, scale)?;
        self.encoder_v.backward(&cache.x_v, &g_h_v, scale)?;
        Ok(())
    }

    /// Applies one AdamW update to every parameter using the current gradients.
    pub fn adamw_step(&mut self, lr: f64, cfg: &AdamConfig) {
        self.step_count += 1;
        let t = self.step_count;
        let mut moments = std::mem::take(&mut self.moments);
        for ((param, grad), m) in self.parameters_and_gradients_mut().into_iter().zip(moments.iter_mut()) {
            adamw_update(param, grad, m, t, lr, cfg);
        }
        self.moments = moments;
        self.version += 1;
    }

    /// Restores optimizer bookkeeping; used when loading checkpoints.
    pub(crate) fn restore_optimizer(&mut self, moments: Vec<Moments>, step_count: u64) {
        self.moments = moments;
        self.step_count = step_count;
        self.version += 1;
    }
}
