//! A small denoiser with real attention maps, for exercising hooks and the
//! cross-attention guidance gradient.
//!
//! The latent is `[P, F]` (P query positions of F features). One pass:
//!
//! ```text
//! M = softmax(X Wq (Y Wk)^T / sqrt(K))      cross-attention, hook "cross.0"
//! S = softmax(X X^T / sqrt(F))              self-attention,  hook "self.0"
//! R = X + S X                               features,        hook "feat.0"
//! mu = B + M (Y Wv) + eta R
//! eps = sqrt(1 - a) (X - sqrt(a) mu) / (a sigma^2 + 1 - a)
//! ```

use ndarray::{Array2, Axis, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adapters::{Concurrency, Denoiser};
use crate::error::{PicError, Result};
use crate::hooks::{AttentionSnapshot, HookKind, HookPoint, HookScope};
use crate::prompt::PromptEmbedding;
use crate::schedule::Timestep;
use crate::tensor::Tensor;

pub const CROSS_LAYER: &str = "cross.0";
pub const SELF_LAYER: &str = "self.0";
pub const FEATURE_LAYER: &str = "feat.0";

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

#[derive(Debug, Clone)]
pub struct AttentionToyDenoiser {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    bias: Array2<f64>,
    eta: f64,
    sigma: f64,
    context_len: usize,
}

impl AttentionToyDenoiser {
    /// Random weights for `P` positions, `F` features, key width `K` and
    /// prompts of `L x D`.
    pub fn random(p: usize, f: usize, k: usize, l: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |r: usize, c: usize, scale: f64| {
            Array2::from_shape_fn((r, c), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
        };
        AttentionToyDenoiser {
            wq: mat(f, k, 1.0),
            wk: mat(d, k, 1.0),
            wv: mat(d, f, 1.0),
            bias: mat(p, f, 0.5),
            eta: 0.3,
            sigma: 1.0,
            context_len: l,
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.bias.nrows(), self.bias.ncols())
    }

    fn as_matrix(&self, x: &Tensor) -> Result<Array2<f64>> {
        let (p, f) = self.dims();
        if x.shape() != [p, f] {
            return Err(PicError::ShapeMismatch {
                expected: vec![p, f],
                actual: x.shape().to_vec(),
            });
        }
        Ok(x.clone()
            .into_dimensionality::<Ix2>()
            .expect("checked shape"))
    }

    fn check_prompt(&self, y: &PromptEmbedding) -> Result<()> {
        if y.len() != self.context_len || y.dim() != self.wk.nrows() {
            return Err(PicError::ShapeMismatch {
                expected: vec![self.context_len, self.wk.nrows()],
                actual: vec![y.len(), y.dim()],
            });
        }
        Ok(())
    }

    fn cross_logits(&self, x: &Array2<f64>, y: &PromptEmbedding) -> (Array2<f64>, Array2<f64>) {
        let keys = y.tokens().dot(&self.wk);
        let scale = 1.0 / (self.wq.ncols() as f64).sqrt();
        (x.dot(&self.wq).dot(&keys.t()) * scale, keys)
    }

    /// Cross-attention map `M(x, y)`.
    pub fn cross_map(&self, x: &Tensor, y: &PromptEmbedding) -> Result<Array2<f64>> {
        self.check_prompt(y)?;
        let x = self.as_matrix(x)?;
        Ok(softmax_rows(&self.cross_logits(&x, y).0))
    }

    /// `|| M(x, y) - reference ||_F^2`.
    pub fn attention_loss(
        &self,
        x: &Tensor,
        y: &PromptEmbedding,
        reference: &Array2<f64>,
    ) -> Result<f64> {
        let m = self.cross_map(x, y)?;
        if m.dim() != reference.dim() {
            return Err(PicError::ShapeMismatch {
                expected: vec![m.nrows(), m.ncols()],
                actual: vec![reference.nrows(), reference.ncols()],
            });
        }
        Ok((&m - reference).mapv(|v| v * v).sum())
    }
}

impl Denoiser for AttentionToyDenoiser {
    fn name(&self) -> &str {
        "toy-attention"
    }

    fn latent_shape(&self) -> Vec<usize> {
        let (p, f) = self.dims();
        vec![p, f]
    }

    fn context_len(&self) -> usize {
        self.context_len
    }

    fn predict(&self, x: &Tensor, ts: Timestep, y: &PromptEmbedding) -> Result<Tensor> {
        self.predict_hooked(x, ts, y, &mut HookScope::passive())
    }

    fn hook_points(&self) -> Vec<HookPoint> {
        vec![
            HookPoint::new(HookKind::CrossAttention, CROSS_LAYER),
            HookPoint::new(HookKind::SelfAttention, SELF_LAYER),
            HookPoint::new(HookKind::Feature, FEATURE_LAYER),
        ]
    }

    fn predict_hooked(
        &self,
        x: &Tensor,
        ts: Timestep,
        y: &PromptEmbedding,
        hooks: &mut HookScope,
    ) -> Result<Tensor> {
        self.check_prompt(y)?;
        let a = ts.alpha_bar;
        if !(a > 0.0 && a <= 1.0) {
            return Err(PicError::SingularSchedule {
                step: ts.index,
                alpha_bar: a,
            });
        }
        let xm = self.as_matrix(x)?;
        let (logits, _) = self.cross_logits(&xm, y);
        let m = hooks.visit(
            HookPoint::new(HookKind::CrossAttention, CROSS_LAYER),
            softmax_rows(&logits),
        )?;
        let self_logits = xm.dot(&xm.t()) / (xm.ncols() as f64).sqrt();
        let s = hooks.visit(
            HookPoint::new(HookKind::SelfAttention, SELF_LAYER),
            softmax_rows(&self_logits),
        )?;
        let r = hooks.visit(
            HookPoint::new(HookKind::Feature, FEATURE_LAYER),
            &xm + &s.dot(&xm),
        )?;
        let values = y.tokens().dot(&self.wv);
        let mu = &self.bias + &m.dot(&values) + &(r * self.eta);
        let denom = a * self.sigma * self.sigma + 1.0 - a;
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let eps = (&xm - &(mu * sa)) * (sn / denom);
        Ok(eps.into_dyn())
    }

    fn cross_attention_guidance(
        &self,
        x: &Tensor,
        _ts: Timestep,
        y: &PromptEmbedding,
        reference: &AttentionSnapshot,
    ) -> Result<(f64, Tensor)> {
        self.check_prompt(y)?;
        let target = reference.cross_maps.get(CROSS_LAYER).ok_or_else(|| {
            PicError::Validation(format!(
                "reference has no {CROSS_LAYER} cross-attention map"
            ))
        })?;
        if let Some(other) = reference
            .cross_maps
            .keys()
            .find(|k| k.as_str() != CROSS_LAYER)
        {
            return Err(PicError::Validation(format!(
                "unknown cross-attention layer {other}"
            )));
        }
        let xm = self.as_matrix(x)?;
        let (logits, keys) = self.cross_logits(&xm, y);
        let m = softmax_rows(&logits);
        if m.dim() != target.dim() {
            return Err(PicError::ShapeMismatch {
                expected: vec![m.nrows(), m.ncols()],
                actual: vec![target.nrows(), target.ncols()],
            });
        }
        let diff = &m - target;
        let loss = diff.mapv(|v| v * v).sum();
        let g = diff * 2.0;
        // softmax backward, row by row
        let inner = (&g * &m).sum_axis(Axis(1)).insert_axis(Axis(1));
        let d_logits = &m * &(&g - &inner);
        let scale = 1.0 / (self.wq.ncols() as f64).sqrt();
        let d_q = d_logits.dot(&keys) * scale;
        let d_x = d_q.dot(&self.wq.t());
        Ok((loss, d_x.into_dyn()))
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Shared
    }
}

/// Presents a `[P, F]` token denoiser as one over `[3, H, W]` images by
/// cutting the image into `patch x patch` tiles (one token per tile, features
/// ordered channel, row, column).
pub struct PatchAdapter<D> {
    inner: D,
    height: usize,
    width: usize,
    patch: usize,
}

impl<D: Denoiser> PatchAdapter<D> {
    pub fn new(inner: D, height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(PicError::Config(format!(
                "{height}x{width} does not tile into {patch}px patches"
            )));
        }
        let want = vec![(height / patch) * (width / patch), 3 * patch * patch];
        if inner.latent_shape() != want {
            return Err(PicError::ShapeMismatch {
                expected: want,
                actual: inner.latent_shape(),
            });
        }
        Ok(PatchAdapter {
            inner,
            height,
            width,
            patch,
        })
    }

    fn index(&self, c: usize, y: usize, x: usize) -> (usize, usize) {
        let p = self.patch;
        let token = (y / p) * (self.width / p) + x / p;
        let feature = (c * p + y % p) * p + x % p;
        (token, feature)
    }

    fn to_tokens(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != [3, self.height, self.width] {
            return Err(PicError::ShapeMismatch {
                expected: vec![3, self.height, self.width],
                actual: x.shape().to_vec(),
            });
        }
        let mut out = crate::tensor::zeros(&self.inner.latent_shape());
        for c in 0..3 {
            for y in 0..self.height {
                for xx in 0..self.width {
                    let (t, f) = self.index(c, y, xx);
                    out[[t, f]] = x[[c, y, xx]];
                }
            }
        }
        Ok(out)
    }

    fn untokenize(&self, t: &Tensor) -> Tensor {
        let mut out = crate::tensor::zeros(&[3, self.height, self.width]);
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    let (tok, f) = self.index(c, y, x);
                    out[[c, y, x]] = t[[tok, f]];
                }
            }
        }
        out
    }
}

impl<D: Denoiser> Denoiser for PatchAdapter<D> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn latent_shape(&self) -> Vec<usize> {
        vec![3, self.height, self.width]
    }

    fn context_len(&self) -> usize {
        self.inner.context_len()
    }

    fn predict(&self, x: &Tensor, ts: Timestep, y: &PromptEmbedding) -> Result<Tensor> {
        Ok(self.untokenize(&self.inner.predict(&self.to_tokens(x)?, ts, y)?))
    }

    fn hook_points(&self) -> Vec<HookPoint> {
        self.inner.hook_points()
    }

    fn predict_hooked(
        &self,
        x: &Tensor,
        ts: Timestep,
        y: &PromptEmbedding,
        hooks: &mut HookScope,
    ) -> Result<Tensor> {
        Ok(self.untokenize(
            &self
                .inner
                .predict_hooked(&self.to_tokens(x)?, ts, y, hooks)?,
        ))
    }

    fn cross_attention_guidance(
        &self,
        x: &Tensor,
        ts: Timestep,
        y: &PromptEmbedding,
        reference: &AttentionSnapshot,
    ) -> Result<(f64, Tensor)> {
        let (loss, g) =
            self.inner
                .cross_attention_guidance(&self.to_tokens(x)?, ts, y, reference)?;
        Ok((loss, self.untokenize(&g)))
    }

    fn concurrency(&self) -> Concurrency {
        self.inner.concurrency()
    }
}
