//! Deterministic hash-based text encoder.
//!
//! Every token maps to a fixed pseudo-random vector derived from its hash, so
//! embeddings are context-free: a token's row never depends on its
//! neighbours. Good enough to drive the toy backbones and the CLI plumbing
//! without weights.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{EncodedPrompt, TextEncoder};
use crate::error::{PicError, Result};
use crate::prompt::{PromptEmbedding, Tokenizer};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";

/// Lower-cased words with surrounding punctuation stripped, framed by
/// start/end markers.
#[derive(Debug, Clone)]
pub struct WordTokenizer {
    context_len: usize,
}

impl WordTokenizer {
    pub fn new(context_len: usize) -> Self {
        WordTokenizer { context_len }
    }

    pub fn words(text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|w| {
                w.trim_matches(|c: char| !c.is_alphanumeric())
                    .to_lowercase()
            })
            .filter(|w| !w.is_empty())
            .collect()
    }
}

impl Tokenizer for WordTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = vec![BOS.to_string()];
        out.extend(Self::words(text));
        out.push(EOS.to_string());
        out
    }

    fn context_len(&self) -> usize {
        self.context_len
    }
}

#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    tokenizer: WordTokenizer,
    dim: usize,
    seed: u64,
}

impl HashTextEncoder {
    pub fn new(context_len: usize, dim: usize, seed: u64) -> Result<Self> {
        if context_len < 2 || dim == 0 {
            return Err(PicError::Config(format!(
                "text encoder needs context >= 2 and dim >= 1, got {context_len} x {dim}"
            )));
        }
        Ok(HashTextEncoder {
            tokenizer: WordTokenizer::new(context_len),
            dim,
            seed,
        })
    }

    /// The vector a single token maps to.
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let scale = 1.0 / (self.dim as f64).sqrt();
        (0..self.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect()
    }
}

impl TextEncoder for HashTextEncoder {
    fn name(&self) -> &str {
        "hash-words"
    }

    fn context_len(&self) -> usize {
        self.tokenizer.context_len
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<EncodedPrompt> {
        let len = self.tokenizer.context_len;
        let mut tokens = self.tokenizer.tokenize(text);
        let mut truncated = 0;
        if tokens.len() > len {
            truncated = tokens.len() - len;
            tokens.truncate(len - 1);
            tokens.push(EOS.to_string());
        }
        let meaningful = tokens.len();
        let mut rows = Array2::zeros((len, self.dim));
        let pad = self.token_vector(PAD);
        for r in 0..len {
            let v = match tokens.get(r) {
                Some(tok) => self.token_vector(tok),
                None => pad.clone(),
            };
            for (c, x) in v.into_iter().enumerate() {
                rows[[r, c]] = x;
            }
        }
        Ok(EncodedPrompt {
            embedding: PromptEmbedding::new(rows, meaningful, text)?,
            truncated,
        })
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }
}
