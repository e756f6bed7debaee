//! Classifier-free guidance wrapper.

use crate::adapters::Denoiser;
use crate::error::{PicError, Result};
use crate::hooks::{AttentionSnapshot, HookScope};
use crate::prompt::PromptEmbedding;
use crate::schedule::Timestep;
use crate::tensor::{self, Tensor};

/// `eps_u + w (eps_c - eps_u)` around an inner denoiser.
///
/// With `w = 1` the conditional prediction is returned as is and the
/// unconditional branch is never evaluated.
#[derive(Clone, Copy)]
pub struct GuidedDenoiser<'a> {
    inner: &'a dyn Denoiser,
    null: Option<&'a PromptEmbedding>,
    scale: f64,
}

impl std::fmt::Debug for GuidedDenoiser<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GuidedDenoiser")
            .field("inner", &self.inner.name())
            .field("scale", &self.scale)
            .finish()
    }
}

impl<'a> GuidedDenoiser<'a> {
    pub fn new(inner: &'a dyn Denoiser, null: &'a PromptEmbedding, scale: f64) -> Result<Self> {
        if !scale.is_finite() {
            return Err(PicError::Config(format!(
                "guidance scale {scale} is not finite"
            )));
        }
        Ok(GuidedDenoiser {
            inner,
            null: Some(null),
            scale,
        })
    }

    /// Conditional predictions only (`w = 1`).
    pub fn unguided(inner: &'a dyn Denoiser) -> Self {
        GuidedDenoiser {
            inner,
            null: None,
            scale: 1.0,
        }
    }

    pub fn inner(&self) -> &'a dyn Denoiser {
        self.inner
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Inner evaluations per guided prediction.
    pub fn calls_per_prediction(&self) -> usize {
        if self.scale == 1.0 {
            1
        } else {
            2
        }
    }

    pub fn predict(&self, x: &Tensor, ts: Timestep, y: &PromptEmbedding) -> Result<Tensor> {
        let cond = self.inner.predict(x, ts, y)?;
        self.combine(x, ts, cond)
    }

    /// Hooks apply to the conditional branch; the unconditional branch is
    /// always evaluated plainly.
    pub fn predict_hooked(
        &self,
        x: &Tensor,
        ts: Timestep,
        y: &PromptEmbedding,
        hooks: &mut HookScope,
    ) -> Result<Tensor> {
        let cond = self.inner.predict_hooked(x, ts, y, hooks)?;
        self.combine(x, ts, cond)
    }

    fn combine(&self, x: &Tensor, ts: Timestep, cond: Tensor) -> Result<Tensor> {
        if self.scale == 1.0 {
            return Ok(cond);
        }
        let null = self
            .null
            .ok_or_else(|| PicError::Config("guidance scale != 1 needs a null embedding".into()))?;
        let uncond = self.inner.predict(x, ts, null)?;
        tensor::ensure_same_shape(&cond, &uncond)?;
        let w = self.scale;
        let mut out = uncond;
        out.zip_mut_with(&cond, |u, &c| *u += w * (c - *u));
        Ok(out)
    }

    /// Gradient of the cross-attention alignment loss on the conditional
    /// branch.
    pub fn cross_attention_guidance(
        &self,
        x: &Tensor,
        ts: Timestep,
        y: &PromptEmbedding,
        reference: &AttentionSnapshot,
    ) -> Result<(f64, Tensor)> {
        self.inner.cross_attention_guidance(x, ts, y, reference)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::Concurrency;
    use ndarray::{arr1, Array2};

    /// Returns `[2]` for prompts whose first entry is non-zero, `[1]` otherwise.
    struct Fixed;
    impl Denoiser for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn latent_shape(&self) -> Vec<usize> {
            vec![1]
        }
        fn context_len(&self) -> usize {
            1
        }
        fn predict(&self, _x: &Tensor, _ts: Timestep, y: &PromptEmbedding) -> Result<Tensor> {
            let v = if y.tokens()[[0, 0]] != 0.0 { 2.0 } else { 1.0 };
            Ok(arr1(&[v]).into_dyn())
        }
        fn concurrency(&self) -> Concurrency {
            Concurrency::Shared
        }
    }

    fn ts() -> Timestep {
        Timestep {
            index: 1,
            alpha_bar: 0.5,
            train_step: 1,
        }
    }

    fn emb(v: f64) -> PromptEmbedding {
        PromptEmbedding::new(Array2::from_elem((1, 1), v), 1, "").unwrap()
    }

    #[test]
    fn guidance_arithmetic() {
        let null = emb(0.0);
        let y = emb(1.0);
        let x = arr1(&[0.0]).into_dyn();
        let g = GuidedDenoiser::new(&Fixed, &null, 7.5).unwrap();
        assert_eq!(g.predict(&x, ts(), &y).unwrap()[0], 8.5);
        let g1 = GuidedDenoiser::new(&Fixed, &null, 1.0).unwrap();
        assert_eq!(g1.predict(&x, ts(), &y).unwrap()[0], 2.0);
        assert_eq!(g1.calls_per_prediction(), 1);
        let g0 = GuidedDenoiser::new(&Fixed, &null, 0.0).unwrap();
        assert_eq!(g0.predict(&x, ts(), &y).unwrap()[0], 1.0);
    }
}
