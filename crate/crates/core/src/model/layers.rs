use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState};
use crate::numerics::reduce::softmax_in_place;

/// Affine map `x W + b` applied to every row of `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub w: Matrix,
    pub b: Option<Matrix>,
    pub grad_w: Matrix,
    pub grad_b: Option<Matrix>,
}

impl LinearLayer {
    /// Gaussian init with variance `1/in`; bias starts at zero.
    pub fn random(inputs: usize, outputs: usize, bias: bool, rng: &mut RngState) -> Self {
        let w = rng.normal_matrix(inputs, outputs).scale(1.0 / (inputs as f64).sqrt());
        Self::from_weights(w, bias)
    }

    pub fn from_weights(w: Matrix, bias: bool) -> Self {
        let (inputs, outputs) = w.shape();
        LinearLayer {
            grad_w: Matrix::zeros(inputs, outputs),
            b: bias.then(|| Matrix::zeros(1, outputs)),
            grad_b: bias.then(|| Matrix::zeros(1, outputs)),
            w,
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.rows()
    }

    pub fn outputs(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.w)?;
        if let Some(b) = &self.b {
            for i in 0..out.rows() {
                for (o, bias) in out.row_mut(i).iter_mut().zip(b.as_slice()) {
                    *o += bias;
                }
            }
        }
        Ok(out)
    }

    /// Accumulates `scale · ∂` into the gradient buffers and returns `∂L/∂x` (unscaled).
    pub fn backward(&mut self, x: &Matrix, grad_out: &Matrix, scale: f64) -> Result<Matrix> {
        self.grad_w.axpy(scale, &x.t_matmul(grad_out)?)?;
        if let Some(gb) = &mut self.grad_b {
            for (g, s) in gb.as_mut_slice().iter_mut().zip(grad_out.col_sums()) {
                *g += scale * s;
            }
        }
        grad_out.matmul_t(&self.w)
    }

    pub fn zero_grad(&mut self) {
        self.grad_w.fill(0.0);
        if let Some(gb) = &mut self.grad_b {
            gb.fill(0.0);
        }
    }
}

/// Prefix-conditioned next-token predictor.
///
/// Position `i` predicts `y_i` from `embed(y_{i−1}) + Σ_k αᵢₖ h_av[k]`, where
/// `αᵢ = softmax(prefix_pool_weights[i])` pools the fused prefix and `y_{−1}`
/// is the begin-of-sequence token (index `V` of the embedding table). No
/// position sees a later target.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDecoder {
    pub token_embedding: Matrix,
    pub grad_token_embedding: Matrix,
    pub prefix_pool_weights: Matrix,
    pub grad_prefix_pool_weights: Matrix,
    pub output_head: LinearLayer,
}

/// Intermediate values of one decoder pass needed for backpropagation.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderCache {
    pub previous_tokens: Vec<usize>,
    pub pool: Matrix,
    pub hidden: Matrix,
    pub logits: Matrix,
}

impl ToyDecoder {
    pub fn random(vocab: usize, hidden: usize, prefix_len: usize, max_len: usize, rng: &mut RngState) -> Self {
        let token_embedding = rng.normal_matrix(vocab + 1, hidden).scale(0.1);
        ToyDecoder {
            grad_token_embedding: Matrix::zeros(vocab + 1, hidden),
            token_embedding,
            prefix_pool_weights: Matrix::zeros(max_len, prefix_len),
            grad_prefix_pool_weights: Matrix::zeros(max_len, prefix_len),
            output_head: LinearLayer::random(hidden, vocab, true, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.output_head.outputs()
    }

    pub fn bos_token(&self) -> usize {
        self.vocab_size()
    }

    pub fn max_len(&self) -> usize {
        self.prefix_pool_weights.rows()
    }

    pub fn forward(&self, h_av: &Matrix, targets: &[usize]) -> Result<DecoderCache> {
        let t = targets.len();
        let vocab = self.vocab_size();
        if t == 0 || t > self.max_len() {
            return Err(Error::arg(format!(
                "caption length {t} outside 1..={}",
                self.max_len()
            )));
        }
        if h_av.rows() != self.prefix_pool_weights.cols() || h_av.cols() != self.token_embedding.cols() {
            return Err(Error::shape(
                "decoder prefix",
                h_av.shape(),
                (self.prefix_pool_weights.cols(), self.token_embedding.cols()),
            ));
        }
        if let Some((pos, &y)) = targets.iter().enumerate().find(|(_, &y)| y >= vocab) {
            return Err(Error::arg(format!("target {y} at position {pos} is outside vocabulary of {vocab}")));
        }

        let previous_tokens: Vec<usize> = std::iter::once(self.bos_token())
            .chain(targets[..t - 1].iter().copied())
            .collect();
        let mut pool = self.prefix_pool_weights.slice_rows(0, t);
        for i in 0..t {
            softmax_in_place(pool.row_mut(i));
        }
        let mut hidden = pool.matmul(h_av)?;
        for (i, &prev) in previous_tokens.iter().enumerate() {
            for (h, e) in hidden.row_mut(i).iter_mut().zip(self.token_embedding.row(prev)) {
                *h += e;
            }
        }
        let logits = self.output_head.forward(&hidden)?;
        Ok(DecoderCache {
            previous_tokens,
            pool,
            hidden,
            logits,
        })
    }

    /// Accumulates `scale · ∂` into parameter gradients and returns `∂L/∂h_av` (unscaled).
    pub fn backward(&mut self, h_av: &Matrix, cache: &DecoderCache, grad_logits: &Matrix, scale: f64) -> Result<Matrix> {
        let grad_hidden = self.output_head.backward(&cache.hidden, grad_logits, scale)?;
        for (i, &prev) in cache.previous_tokens.iter().enumerate() {
            for (g, dh) in self.grad_token_embedding.row_mut(prev).iter_mut().zip(grad_hidden.row(i)) {
                *g += scale * dh;
            }
        }
        let grad_h_av = cache.pool.t_matmul(&grad_hidden)?;
        let grad_pool = grad_hidden.matmul_t(h_av)?;
        for i in 0..cache.pool.rows() {
            let p = cache.pool.row(i);
            let g = grad_pool.row(i);
            let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
            for ((o, &pi), &gi) in self.grad_prefix_pool_weights.row_mut(i).iter_mut().zip(p).zip(g) {
                *o += scale * pi * (gi - inner);
            }
        }
        Ok(grad_h_av)
    }

    pub fn zero_grad(&mut self) {
        self.grad_token_embedding.fill(0.0);
        self.grad_prefix_pool_weights.fill(0.0);
        self.output_head.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_grad, GradCheckReport};

    #[test]
    fn linear_forward_and_backward() {
        let mut rng = RngState::new(1);
        let mut layer = LinearLayer::random(3, 2, true, &mut rng);
        layer.b = Some(Matrix::from_rows(&[[0.5, -1.0]]));
        let x = rng.normal_matrix(4, 3);
        let y = layer.forward(&x).unwrap();
        let expected = x.matmul(&layer.w).unwrap();
        assert!((y[(2, 1)] - (expected[(2, 1)] - 1.0)).abs() < 1e-15);

        let readout = rng.normal_matrix(4, 2);
        let gx = layer.backward(&x, &readout, 1.0).unwrap();
        let nx = finite_difference_grad(|m| layer.forward(m)?.frobenius_dot(&readout), &x, 1e-5).unwrap();
        assert!(gx.max_abs_diff(&nx) < 1e-8);
        let w0 = layer.w.clone();
        let nw = finite_difference_grad(
            |m| LinearLayer { w: m.clone(), ..layer.clone() }.forward(&x)?.frobenius_dot(&readout),
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(layer.grad_w.max_abs_diff(&nw) < 1e-8);
        let bias_grad = readout.col_sums();
        assert!((layer.grad_b.as_ref().unwrap()[(0, 1)] - bias_grad[1]).abs() < 1e-14);
        layer.zero_grad();
        assert_eq!(layer.grad_w.sum(), 0.0);
    }

    #[test]
    fn decoder_is_causal() {
        let mut rng = RngState::new(2);
        let dec = ToyDecoder::random(5, 4, 3, 4, &mut rng);
        let h_av = rng.normal_matrix(3, 4);
        let a = dec.forward(&h_av, &[1, 2, 3, 4]).unwrap();
        let b = dec.forward(&h_av, &[1, 2, 0, 0]).unwrap();
        // positions 0..=2 only see targets before them
        for i in 0..3 {
            assert_eq!(a.logits.row(i), b.logits.row(i));
        }
        assert_ne!(a.logits.row(3), b.logits.row(3));
        assert_eq!(a.previous_tokens, vec![5, 1, 2, 3]);
    }

    #[test]
    fn decoder_rejects_bad_inputs() {
        let mut rng = RngState::new(3);
        let dec = ToyDecoder::random(5, 4, 3, 4, &mut rng);
        let h_av = rng.normal_matrix(3, 4);
        assert!(dec.forward(&h_av, &[]).is_err());
        assert!(dec.forward(&h_av, &[0; 5]).is_err());
        assert!(dec.forward(&h_av, &[5]).is_err());
        assert!(dec.forward(&rng.normal_matrix(2, 4), &[0]).is_err());
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut rng = RngState::new(4);
        let mut dec = ToyDecoder::random(6, 4, 5, 3, &mut rng);
        dec.prefix_pool_weights = rng.normal_matrix(3, 5);
        let h_av = rng.normal_matrix(5, 4);
        let targets = [3, 3, 1];
        let readout = rng.normal_matrix(3, 6);
        let cache = dec.forward(&h_av, &targets).unwrap();
        let g_h = dec.backward(&h_av, &cache, &readout, 1.0).unwrap();

        let objective = |d: &ToyDecoder, h: &Matrix| d.forward(h, &targets)?.logits.frobenius_dot(&readout);
        let n_h = finite_difference_grad(|m| objective(&dec, m), &h_av, 1e-5).unwrap();
        let n_pool = finite_difference_grad(
            |m| objective(&ToyDecoder { prefix_pool_weights: m.clone(), ..dec.clone() }, &h_av),
            &dec.prefix_pool_weights,
            1e-5,
        )
        .unwrap();
        let n_emb = finite_difference_grad(
            |m| objective(&ToyDecoder { token_embedding: m.clone(), ..dec.clone() }, &h_av),
            &dec.token_embedding,
            1e-5,
        )
        .unwrap();
        for (name, a, n) in [
            ("h_av", &g_h, &n_h),
            ("pool", &dec.grad_prefix_pool_weights, &n_pool),
            ("embedding", &dec.grad_token_embedding, &n_emb),
        ] {
            let r = GradCheckReport::compare(name, a, n, 1e-6).unwrap();
            assert!(r.passes(1e-4), "{r:?}");
        }
    }
}
