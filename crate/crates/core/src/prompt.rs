//! Prompt embeddings and the time-dependent source/target interpolation.
//!
//! Three edit kinds are supported. Word replacement mixes the two embeddings
//! token by token. Phrase insertion keeps the source prefix, copies the
//! inserted target tokens verbatim and mixes the suffix against the source
//! token it was shifted from. Phrase removal is the mirror image of insertion.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PicError, Result};

/// Default initial mixing weight for word replacement.
pub const DEFAULT_BETA_REPLACEMENT: f64 = 0.3;
/// Default initial mixing weight for phrase insertion and removal.
pub const DEFAULT_BETA_PHRASE: f64 = 0.8;

/// A fixed-length sequence of token embeddings (`L x D`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    tokens: Array2<f64>,
    meaningful_len: usize,
    text: String,
}

impl PromptEmbedding {
    pub fn new(
        tokens: Array2<f64>,
        meaningful_len: usize,
        text: impl Into<String>,
    ) -> Result<Self> {
        let (l, d) = tokens.dim();
        if l == 0 || d == 0 {
            return Err(PicError::Validation(
                "prompt embedding must be non-empty".into(),
            ));
        }
        if meaningful_len == 0 || meaningful_len > l {
            return Err(PicError::Validation(format!(
                "meaningful length {meaningful_len} outside 1..={l}"
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(PicError::Validation(
                "prompt embedding has non-finite entries".into(),
            ));
        }
        Ok(PromptEmbedding {
            tokens,
            meaningful_len,
            text: text.into(),
        })
    }

    /// Sequence length `L`.
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Embedding width `D`.
    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn meaningful_len(&self) -> usize {
        self.meaningful_len
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.tokens
    }

    /// Row-major flattening, `L * D` values.
    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.tokens.iter().copied()
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        for v in self.tokens.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn check_compatible(&self, other: &PromptEmbedding) -> Result<()> {
        if self.tokens.dim() != other.tokens.dim() {
            return Err(PicError::ShapeMismatch {
                expected: vec![self.len(), self.dim()],
                actual: vec![other.len(), other.dim()],
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Replacement,
    Insertion,
    Removal,
}

impl EditKind {
    pub fn default_beta(self) -> f64 {
        match self {
            EditKind::Replacement => DEFAULT_BETA_REPLACEMENT,
            EditKind::Insertion | EditKind::Removal => DEFAULT_BETA_PHRASE,
        }
    }
}

/// What to interpolate and how fast.
///
/// For insertion the span indexes the inserted tokens in the target
/// embedding; for removal it indexes the removed tokens in the source
/// embedding. Replacement carries no span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationPlan {
    pub kind: EditKind,
    pub span_start: Option<usize>,
    pub span_end: Option<usize>,
    pub beta: f64,
    pub total_steps: usize,
    #[serde(default)]
    pub src_text: String,
    #[serde(default)]
    pub tgt_text: String,
}

impl InterpolationPlan {
    pub fn replacement(beta: f64, total_steps: usize) -> Self {
        InterpolationPlan {
            kind: EditKind::Replacement,
            span_start: None,
            span_end: None,
            beta,
            total_steps,
            src_text: String::new(),
            tgt_text: String::new(),
        }
    }

    pub fn insertion(span_start: usize, span_end: usize, beta: f64, total_steps: usize) -> Self {
        InterpolationPlan {
            kind: EditKind::Insertion,
            span_start: Some(span_start),
            span_end: Some(span_end),
            ..Self::replacement(beta, total_steps)
        }
    }

    pub fn removal(span_start: usize, span_end: usize, beta: f64, total_steps: usize) -> Self {
        InterpolationPlan {
            kind: EditKind::Removal,
            ..Self::insertion(span_start, span_end, beta, total_steps)
        }
    }

    pub fn with_texts(mut self, src: impl Into<String>, tgt: impl Into<String>) -> Self {
        self.src_text = src.into();
        self.tgt_text = tgt.into();
        self
    }

    /// `(span_start, span_end)` for the span-carrying kinds.
    pub fn span(&self) -> Result<(usize, usize)> {
        match (self.span_start, self.span_end) {
            (Some(s), Some(f)) if s <= f => Ok((s, f)),
            (Some(s), Some(f)) => Err(PicError::Validation(format!(
                "empty span: start {s} > end {f}"
            ))),
            _ => Err(PicError::Validation(format!(
                "{:?} plan needs a token span",
                self.kind
            ))),
        }
    }

    pub fn validate(&self, context_len: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(PicError::Validation(format!(
                "beta = {} outside [0, 1]",
                self.beta
            )));
        }
        if self.total_steps == 0 {
            return Err(PicError::Validation("plan needs at least one step".into()));
        }
        if self.kind != EditKind::Replacement {
            let (_, f) = self.span()?;
            if f >= context_len {
                return Err(PicError::Validation(format!(
                    "span end {f} outside a context of {context_len} tokens"
                )));
            }
        }
        Ok(())
    }

    /// `beta_t` on this plan's grid.
    pub fn beta_at(&self, t: usize) -> f64 {
        mixing_coefficient(t, self.total_steps, self.beta)
    }
}

/// `beta_t = beta + (1 - beta) (T - t) / T`, rising from `beta` at `t = T` to
/// exactly `1` at `t = 0`.
pub fn mixing_coefficient(t: usize, total_steps: usize, beta: f64) -> f64 {
    debug_assert!(total_steps >= 1 && t <= total_steps);
    let w = (total_steps - t.min(total_steps)) as f64 / total_steps as f64;
    beta * (1.0 - w) + w
}

fn mix_row(
    out: &mut Array2<f64>,
    row: usize,
    tgt: &Array2<f64>,
    src: &Array2<f64>,
    src_row: usize,
    beta_t: f64,
) {
    let keep = 1.0 - beta_t;
    for c in 0..out.ncols() {
        out[[row, c]] = beta_t * tgt[[row, c]] + keep * src[[src_row, c]];
    }
}

fn with_tokens(like: &PromptEmbedding, tokens: Array2<f64>) -> PromptEmbedding {
    PromptEmbedding {
        tokens,
        meaningful_len: like.meaningful_len,
        text: like.text.clone(),
    }
}

/// Token-wise `beta_t * y_tgt + (1 - beta_t) * y_src` over the full context.
pub fn interpolate_replacement(
    y_src: &PromptEmbedding,
    y_tgt: &PromptEmbedding,
    beta_t: f64,
) -> Result<PromptEmbedding> {
    y_tgt.check_compatible(y_src)?;
    let mut out = Array2::zeros(y_tgt.tokens.dim());
    for row in 0..y_tgt.len() {
        mix_row(&mut out, row, &y_tgt.tokens, &y_src.tokens, row, beta_t);
    }
    Ok(with_tokens(y_tgt, out))
}

/// Phrase insertion: source prefix, verbatim inserted span, then the target
/// suffix mixed with the source token it was shifted from (`l - n`).
pub fn interpolate_insertion(
    y_src: &PromptEmbedding,
    y_tgt: &PromptEmbedding,
    plan: &InterpolationPlan,
    beta_t: f64,
) -> Result<PromptEmbedding> {
    if plan.kind != EditKind::Insertion {
        return Err(PicError::Validation(format!(
            "expected an insertion plan, got {:?}",
            plan.kind
        )));
    }
    y_tgt.check_compatible(y_src)?;
    let len = y_tgt.len();
    plan.validate(len)?;
    let (start, end) = plan.span()?;
    let n = end - start + 1;
    let mut out = y_tgt.tokens.clone();
    for row in 0..len {
        if row < start {
            out.row_mut(row).assign(&y_src.tokens.row(row));
        } else if row > end {
            // row > end >= n - 1, so row - n never underflows.
            let src_row = row - n;
            if src_row < len {
                mix_row(&mut out, row, &y_tgt.tokens, &y_src.tokens, src_row, beta_t);
            }
        }
    }
    Ok(with_tokens(y_tgt, out))
}

/// Phrase removal: target prefix, then every target position mixed with the
/// source token `n` places further right. Positions whose partner runs off
/// the context keep the target token.
pub fn interpolate_removal(
    y_src: &PromptEmbedding,
    y_tgt: &PromptEmbedding,
    plan: &InterpolationPlan,
    beta_t: f64,
) -> Result<PromptEmbedding> {
    if plan.kind != EditKind::Removal {
        return Err(PicError::Validation(format!(
            "expected a removal plan, got {:?}",
            plan.kind
        )));
    }
    y_tgt.check_compatible(y_src)?;
    let len = y_tgt.len();
    plan.validate(len)?;
    let (start, end) = plan.span()?;
    let n = end - start + 1;
    let mut out = y_tgt.tokens.clone();
    for row in start..len {
        let src_row = row + n;
        if src_row < len {
            mix_row(&mut out, row, &y_tgt.tokens, &y_src.tokens, src_row, beta_t);
        }
    }
    Ok(with_tokens(y_tgt, out))
}

/// Dispatches on the plan kind.
pub fn interpolate(
    y_src: &PromptEmbedding,
    y_tgt: &PromptEmbedding,
    plan: &InterpolationPlan,
    beta_t: f64,
) -> Result<PromptEmbedding> {
    match plan.kind {
        EditKind::Replacement => interpolate_replacement(y_src, y_tgt, beta_t),
        EditKind::Insertion => interpolate_insertion(y_src, y_tgt, plan, beta_t),
        EditKind::Removal => interpolate_removal(y_src, y_tgt, plan, beta_t),
    }
}

/// Splits text into the token sequence a text encoder lays out, including
/// any start/end markers, so positions line up with embedding rows.
pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<String>;
    fn context_len(&self) -> usize;
}

/// Infers the edit kind and token span by diffing the two token sequences.
pub fn plan_from_prompts(
    p_src: &str,
    p_tgt: &str,
    tokenizer: &dyn Tokenizer,
    total_steps: usize,
) -> Result<InterpolationPlan> {
    let src = tokenizer.tokenize(p_src);
    let tgt = tokenizer.tokenize(p_tgt);
    let limit = tokenizer.context_len();
    for (name, toks) in [("source", &src), ("target", &tgt)] {
        if toks.len() > limit {
            return Err(PicError::Validation(format!(
                "{name} prompt needs {} tokens, context holds {limit}",
                toks.len()
            )));
        }
    }
    let prefix = src.iter().zip(&tgt).take_while(|(a, b)| a == b).count();
    let shorter = src.len().min(tgt.len());
    let suffix = src
        .iter()
        .rev()
        .zip(tgt.iter().rev())
        .take(shorter - prefix)
        .take_while(|(a, b)| a == b)
        .count();

    let plan = if src.len() == tgt.len() {
        if prefix == src.len() {
            return Err(PicError::UnsupportedEdit(
                "source and target prompts tokenize identically; supply an explicit plan".into(),
            ));
        }
        InterpolationPlan::replacement(EditKind::Replacement.default_beta(), total_steps)
    } else {
        if prefix + suffix != shorter {
            return Err(PicError::UnsupportedEdit(
                "prompts differ in more than one contiguous run; supply an explicit plan".into(),
            ));
        }
        let n = src.len().abs_diff(tgt.len());
        let (start, end) = (prefix, prefix + n - 1);
        if tgt.len() > src.len() {
            InterpolationPlan::insertion(
                start,
                end,
                EditKind::Insertion.default_beta(),
                total_steps,
            )
        } else {
            InterpolationPlan::removal(start, end, EditKind::Removal.default_beta(), total_steps)
        }
    };
    Ok(plan.with_texts(p_src, p_tgt))
}

/// Mean over the token axis, handy for pooled comparisons.
pub fn pooled(y: &PromptEmbedding) -> ndarray::Array1<f64> {
    y.tokens.mean_axis(Axis(0)).expect("non-empty embedding")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn emb(rows: Array2<f64>) -> PromptEmbedding {
        let n = rows.nrows();
        PromptEmbedding::new(rows, n, "").unwrap()
    }

    fn scalar_seq(v: &[f64]) -> PromptEmbedding {
        emb(Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap())
    }

    struct Words;
    impl Tokenizer for Words {
        fn tokenize(&self, text: &str) -> Vec<String> {
            let mut v = vec!["<s>".to_string()];
            v.extend(text.split_whitespace().map(str::to_lowercase));
            v.push("</s>".into());
            v
        }
        fn context_len(&self) -> usize {
            16
        }
    }

    #[test]
    fn mixing_coefficient_endpoints_and_midpoint() {
        assert_eq!(mixing_coefficient(50, 50, 0.3), 0.3);
        assert_eq!(mixing_coefficient(0, 50, 0.3), 1.0);
        assert!((mixing_coefficient(25, 50, 0.3) - 0.65).abs() < 1e-15);
    }

    #[test]
    fn replacement_midpoint() {
        let s = emb(array![[1.0, 0.0]]);
        let t = emb(array![[0.0, 2.0]]);
        let y = interpolate_replacement(&s, &t, 0.5).unwrap();
        assert_eq!(y.tokens(), &array![[0.5, 1.0]]);
    }

    #[test]
    fn replacement_shape_mismatch() {
        let s = emb(array![[1.0, 0.0]]);
        let t = emb(array![[0.0, 2.0, 1.0]]);
        assert!(matches!(
            interpolate_replacement(&s, &t, 0.5),
            Err(PicError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn insertion_three_branch_example() {
        // a_i = i + 1, b_i = 10 + i, c_i = 20 + i
        let s = scalar_seq(&[1.0, 2.0, 3.0, 4.0, 5.0, 0.0, 0.0]);
        let t = scalar_seq(&[1.0, 2.0, 10.0, 11.0, 22.0, 23.0, 24.0]);
        let plan = InterpolationPlan::insertion(2, 3, 0.8, 50);
        let y = interpolate_insertion(&s, &t, &plan, 0.5).unwrap();
        let got: Vec<f64> = y.flat().collect();
        let want = [
            1.0,
            2.0,
            10.0,
            11.0,
            0.5 * 22.0 + 0.5 * 3.0,
            0.5 * 23.0 + 0.5 * 4.0,
            0.5 * 24.0 + 0.5 * 5.0,
        ];
        assert_eq!(got, want);
    }

    #[test]
    fn insertion_single_token_shifts_by_one() {
        let s = scalar_seq(&[1.0, 2.0, 3.0, 4.0]);
        let t = scalar_seq(&[1.0, 9.0, 2.0, 3.0]);
        let plan = InterpolationPlan::insertion(1, 1, 0.8, 10);
        let y = interpolate_insertion(&s, &t, &plan, 0.0).unwrap();
        let got: Vec<f64> = y.flat().collect();
        assert_eq!(got, vec![1.0, 9.0, 2.0, 3.0]);
    }

    #[test]
    fn invalid_spans_rejected() {
        let s = scalar_seq(&[1.0, 2.0, 3.0]);
        let mut plan = InterpolationPlan::insertion(2, 1, 0.8, 10);
        assert!(interpolate_insertion(&s, &s, &plan, 0.5).is_err());
        plan = InterpolationPlan::insertion(1, 3, 0.8, 10);
        assert!(interpolate_insertion(&s, &s, &plan, 0.5).is_err());
        plan = InterpolationPlan::removal(0, 0, 1.5, 10);
        assert!(interpolate_removal(&s, &s, &plan, 0.5).is_err());
        let wrong_kind = InterpolationPlan::replacement(0.3, 10);
        assert!(interpolate_insertion(&s, &s, &wrong_kind, 0.5).is_err());
    }

    #[test]
    fn removal_endpoint_and_clamp() {
        let s = scalar_seq(&[1.0, 2.0, 7.0, 8.0, 3.0, 4.0]);
        let t = scalar_seq(&[1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
        let plan = InterpolationPlan::removal(2, 3, 0.8, 10);
        let y = interpolate_removal(&s, &t, &plan, 1.0).unwrap();
        assert_eq!(y.tokens(), t.tokens());
        let half = interpolate_removal(&s, &t, &plan, 0.5).unwrap();
        let got: Vec<f64> = half.flat().collect();
        // positions 4 and 5 would read source rows 6 and 7: clamped to target
        assert_eq!(got, vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn plans_from_prompts() {
        let p = plan_from_prompts("a zebra lying", "a horse lying", &Words, 50).unwrap();
        assert_eq!(p.kind, EditKind::Replacement);
        assert_eq!(p.beta, 0.3);

        let p =
            plan_from_prompts("a dog on grass", "a dog with glasses on grass", &Words, 50).unwrap();
        assert_eq!(p.kind, EditKind::Insertion);
        // <s> a dog | with glasses | on grass </s>
        assert_eq!((p.span_start, p.span_end), (Some(3), Some(4)));
        assert_eq!(p.beta, 0.8);

        let p =
            plan_from_prompts("a dog with glasses on grass", "a dog on grass", &Words, 50).unwrap();
        assert_eq!(p.kind, EditKind::Removal);
        assert_eq!((p.span_start, p.span_end), (Some(3), Some(4)));
    }

    #[test]
    fn unsupported_plans() {
        assert!(matches!(
            plan_from_prompts("a dog", "a dog", &Words, 50),
            Err(PicError::UnsupportedEdit(_))
        ));
        assert!(matches!(
            plan_from_prompts("a dog on grass", "the dog on green grass", &Words, 50),
            Err(PicError::UnsupportedEdit(_))
        ));
    }

    #[test]
    fn plan_json_shape() {
        let p = InterpolationPlan::insertion(3, 4, 0.8, 50).with_texts("a", "b");
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        for key in [
            "kind",
            "span_start",
            "span_end",
            "beta",
            "total_steps",
            "src_text",
            "tgt_text",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["kind"], "insertion");
        let back: InterpolationPlan = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }
}
