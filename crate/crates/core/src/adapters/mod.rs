//! Interfaces to every external model the pipeline touches.
//!
//! The sampler, correction and integration code only ever see these traits,
//! so the closed-form toy denoiser and a neural backbone are interchangeable.

pub mod codec;
pub mod text;

use std::sync::atomic::{AtomicUsize, Ordering};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{PicError, Result};
use crate::hooks::{AttentionSnapshot, HookPoint, HookScope};
use crate::prompt::PromptEmbedding;
use crate::schedule::Timestep;
use crate::tensor::Tensor;

/// Whether an adapter may serve concurrent calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concurrency {
    Shared,
    Exclusive,
}

/// The noise predictor `eps(x_t, t, y)`.
pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;

    fn latent_shape(&self) -> Vec<usize>;

    /// Prompt context length `L` the denoiser expects.
    fn context_len(&self) -> usize;

    fn predict(&self, x: &Tensor, ts: Timestep, y: &PromptEmbedding) -> Result<Tensor>;

    fn hook_points(&self) -> Vec<HookPoint> {
        Vec::new()
    }

    /// Prediction with capture/injection hooks. Adapters without hook
    /// points accept only inert scopes.
    fn predict_hooked(
        &self,
        x: &Tensor,
        ts: Timestep,
        y: &PromptEmbedding,
        hooks: &mut HookScope,
    ) -> Result<Tensor> {
        if hooks.is_inert() {
            self.predict(x, ts, y)
        } else {
            Err(PicError::Unsupported(format!(
                "{} exposes no hook points",
                self.name()
            )))
        }
    }

    /// `(loss, d loss / d x)` for `|| M(x, y) - M_ref ||_F^2` summed over the
    /// cross-attention layers present in `reference`.
    fn cross_attention_guidance(
        &self,
        _x: &Tensor,
        _ts: Timestep,
        _y: &PromptEmbedding,
        _reference: &AttentionSnapshot,
    ) -> Result<(f64, Tensor)> {
        Err(PicError::Unsupported(format!(
            "{} is not differentiable with respect to its latent",
            self.name()
        )))
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Exclusive
    }
}

/// Counts inner evaluations; used to check call accounting against reality.
pub struct CountingDenoiser<'a> {
    inner: &'a dyn Denoiser,
    calls: AtomicUsize,
}

impl<'a> CountingDenoiser<'a> {
    pub fn new(inner: &'a dyn Denoiser) -> Self {
        CountingDenoiser {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl Denoiser for CountingDenoiser<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn latent_shape(&self) -> Vec<usize> {
        self.inner.latent_shape()
    }
    fn context_len(&self) -> usize {
        self.inner.context_len()
    }
    fn predict(&self, x: &Tensor, ts: Timestep, y: &PromptEmbedding) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict(x, ts, y)
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
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_hooked(x, ts, y, hooks)
    }
    fn cross_attention_guidance(
        &self,
        x: &Tensor,
        ts: Timestep,
        y: &PromptEmbedding,
        reference: &AttentionSnapshot,
    ) -> Result<(f64, Tensor)> {
        self.inner.cross_attention_guidance(x, ts, y, reference)
    }
    fn concurrency(&self) -> Concurrency {
        self.inner.concurrency()
    }
}

/// Result of encoding a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPrompt {
    pub embedding: PromptEmbedding,
    /// Tokens dropped to fit the context.
    pub truncated: usize,
}

pub trait TextEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn context_len(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<EncodedPrompt>;
    fn tokenizer(&self) -> &dyn crate::prompt::Tokenizer;
}

/// Encodes a prompt. The empty string yields the guidance null embedding.
pub fn encode_prompt(text: &str, encoder: &dyn TextEncoder) -> Result<EncodedPrompt> {
    let out = encoder.encode(text)?;
    if out.truncated > 0 {
        log::warn!("prompt {text:?} truncated by {} tokens", out.truncated);
    }
    Ok(out)
}

pub trait Captioner: Send + Sync {
    fn name(&self) -> &str;
    /// Greedy (deterministic) caption.
    fn caption(&self, image: &RgbImage) -> Result<String>;
}

/// A captioner that always answers with the same text.
#[derive(Debug, Clone)]
pub struct FixedCaptioner(pub String);

impl Captioner for FixedCaptioner {
    fn name(&self) -> &str {
        "fixed"
    }
    fn caption(&self, _image: &RgbImage) -> Result<String> {
        Ok(self.0.clone())
    }
}

/// Picks the source prompt: a non-empty user prompt wins, otherwise the
/// captioner is asked.
pub fn caption_source(
    image: &RgbImage,
    user_prompt: Option<&str>,
    captioner: Option<&dyn Captioner>,
) -> Result<String> {
    if let Some(p) = user_prompt.map(str::trim).filter(|p| !p.is_empty()) {
        return Ok(p.to_string());
    }
    let captioner = captioner.ok_or_else(|| {
        PicError::ModelUnavailable("no captioner configured and no source prompt given".into())
    })?;
    let text = captioner.caption(image)?;
    if text.trim().is_empty() {
        return Err(PicError::ModelUnavailable(format!(
            "captioner {} returned an empty caption",
            captioner.name()
        )));
    }
    Ok(text.trim().to_string())
}

/// Converts between images and backbone latents.
pub trait LatentCodec: Send + Sync {
    fn name(&self) -> &str;
    fn latent_shape(&self) -> Vec<usize>;
    fn encode(&self, image: &RgbImage) -> Result<Tensor>;
    fn decode(&self, latent: &Tensor) -> Result<RgbImage>;
    /// How input images are brought to the codec resolution.
    fn resize_policy(&self) -> String;
}

/// The text surgery that turns a source caption into a target prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskSpec {
    /// Replace the first occurrence of `from` with `to`.
    Replace { from: String, to: String },
    /// Insert `phrase` right after the first occurrence of `anchor`.
    Insert { anchor: String, phrase: String },
}

impl TaskSpec {
    pub fn source_word(&self) -> &str {
        match self {
            TaskSpec::Replace { from, .. } => from,
            TaskSpec::Insert { anchor, .. } => anchor,
        }
    }

    pub fn label(&self) -> String {
        match self {
            TaskSpec::Replace { from, to } => format!("{from}->{to}"),
            TaskSpec::Insert { anchor, phrase } => format!("{anchor}->{anchor} {phrase}"),
        }
    }
}

/// Byte range of the first case-insensitive whole-word occurrence.
fn find_word(haystack: &str, needle: &str) -> Option<(usize, usize)> {
    let needle = needle.trim();
    if needle.is_empty() {
        return None;
    }
    let hay = haystack.to_ascii_lowercase();
    let pat = needle.to_ascii_lowercase();
    let boundary = |c: Option<char>| c.is_none_or(|c| !c.is_alphanumeric());
    let mut from = 0;
    while let Some(off) = hay[from..].find(&pat) {
        let start = from + off;
        let end = start + pat.len();
        if boundary(hay[..start].chars().next_back()) && boundary(hay[end..].chars().next()) {
            return Some((start, end));
        }
        from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
    }
    None
}

pub fn build_target_prompt(p_src: &str, task: &TaskSpec) -> Result<String> {
    let word = task.source_word();
    let (start, end) = find_word(p_src, word)
        .ok_or_else(|| PicError::TaskMismatch(format!("{word:?} does not occur in {p_src:?}")))?;
    let out = match task {
        TaskSpec::Replace { to, .. } => format!("{}{}{}", &p_src[..start], to, &p_src[end..]),
        TaskSpec::Insert { phrase, .. } => {
            format!("{} {}{}", &p_src[..end], phrase.trim(), &p_src[end..])
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replacement_surgery() {
        let t = TaskSpec::Replace {
            from: "zebra".into(),
            to: "horse".into(),
        };
        assert_eq!(
            build_target_prompt("A zebra is lying on the grass.", &t).unwrap(),
            "A horse is lying on the grass."
        );
        assert!(matches!(
            build_target_prompt("A cat sleeps", &t),
            Err(PicError::TaskMismatch(_))
        ));
        // whole words only
        assert!(build_target_prompt("zebras everywhere", &t).is_err());
    }

    #[test]
    fn insertion_surgery() {
        let t = TaskSpec::Insert {
            anchor: "dog".into(),
            phrase: "with glasses".into(),
        };
        assert_eq!(
            build_target_prompt("A dog is lying on the grass", &t).unwrap(),
            "A dog with glasses is lying on the grass"
        );
    }

    #[test]
    fn caption_override_and_stub() {
        let img = RgbImage::new(2, 2);
        let cap = FixedCaptioner("a photo of a dog".into());
        assert_eq!(
            caption_source(&img, Some("user text"), Some(&cap)).unwrap(),
            "user text"
        );
        assert_eq!(
            caption_source(&img, None, Some(&cap)).unwrap(),
            "a photo of a dog"
        );
        assert_eq!(
            caption_source(&img, Some("  "), Some(&cap)).unwrap(),
            "a photo of a dog"
        );
        assert!(matches!(
            caption_source(&img, None, None),
            Err(PicError::ModelUnavailable(_))
        ));
    }
}
