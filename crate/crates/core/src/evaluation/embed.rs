//! Image/text embedders behind the alignment and structure metrics, and the
//! task-image selector.

use image::{imageops::FilterType, RgbImage};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adapters::text::{HashTextEncoder, WordTokenizer};
use crate::error::{PicError, Result};
use crate::toy::attention::softmax_rows;

/// Joint image/text embedding space.
pub trait JointEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn embed_image(&self, image: &RgbImage) -> Result<Array1<f64>>;
    fn embed_text(&self, text: &str) -> Result<Array1<f64>>;
}

/// Token-affinity (self-attention) maps of an image.
pub trait StructureEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn self_attention(&self, image: &RgbImage) -> Result<Array2<f64>>;
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Hashed bag-of-words text features and a fixed random projection of a
/// coarse colour layout. Deterministic and weight-free; the scores are only
/// meaningful relative to each other.
#[derive(Debug, Clone)]
pub struct ToyClip {
    words: HashTextEncoder,
    projection: Array2<f64>,
}

const LAYOUT: u32 = 4;

impl ToyClip {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        let words = HashTextEncoder::new(2, dim, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let inputs = (3 * LAYOUT * LAYOUT) as usize;
        let projection = Array2::from_shape_fn((dim, inputs), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z / (inputs as f64).sqrt()
        });
        Ok(ToyClip { words, projection })
    }
}

impl JointEmbedder for ToyClip {
    fn name(&self) -> &str {
        "toy-clip"
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Array1<f64>> {
        if image.width() == 0 || image.height() == 0 {
            return Err(PicError::Validation("empty image".into()));
        }
        let small = image::imageops::resize(image, LAYOUT, LAYOUT, FilterType::Triangle);
        let v: Array1<f64> = small
            .pixels()
            .flat_map(|p| p.0.map(|c| c as f64 / 255.0 - 0.5))
            .collect();
        Ok(self.projection.dot(&v))
    }

    fn embed_text(&self, text: &str) -> Result<Array1<f64>> {
        let mut acc = Array1::zeros(self.projection.nrows());
        for w in WordTokenizer::words(text) {
            acc += &Array1::from(self.words.token_vector(&w));
        }
        Ok(acc)
    }
}

/// Patch tokens with a single softmax self-affinity layer: each patch is
/// flattened, centred and unit-normalized, and the map is
/// `softmax(T T^T / temperature)`.
#[derive(Debug, Clone)]
pub struct PatchAffinityEncoder {
    pub patch: u32,
    pub temperature: f64,
}

impl Default for PatchAffinityEncoder {
    fn default() -> Self {
        PatchAffinityEncoder {
            patch: 8,
            temperature: 0.1,
        }
    }
}

impl StructureEncoder for PatchAffinityEncoder {
    fn name(&self) -> &str {
        "patch-affinity"
    }

    fn self_attention(&self, image: &RgbImage) -> Result<Array2<f64>> {
        let p = self.patch.max(1);
        let (gw, gh) = (image.width() / p, image.height() / p);
        if gw == 0 || gh == 0 {
            return Err(PicError::Validation(format!(
                "image {:?} smaller than one {p}px patch",
                image.dimensions()
            )));
        }
        let n = (gw * gh) as usize;
        let width = (3 * p * p) as usize;
        let mut tokens = Array2::zeros((n, width));
        for gy in 0..gh {
            for gx in 0..gw {
                let row = (gy * gw + gx) as usize;
                let mut k = 0;
                for y in 0..p {
                    for x in 0..p {
                        let px = image.get_pixel(gx * p + x, gy * p + y);
                        for c in 0..3 {
                            tokens[[row, k]] = px[c] as f64 / 255.0;
                            k += 1;
                        }
                    }
                }
                let mut r = tokens.row_mut(row);
                let mean = r.mean().unwrap_or(0.0);
                r.mapv_inplace(|v| v - mean);
                let norm = r.dot(&r).sqrt();
                if norm > 0.0 {
                    r.mapv_inplace(|v| v / norm);
                }
            }
        }
        Ok(softmax_rows(&(tokens.dot(&tokens.t()) / self.temperature)))
    }
}

/// `|| a - b ||_F / N` for `N x N` maps.
pub fn frobenius_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(PicError::ShapeMismatch {
            expected: vec![a.nrows(), a.ncols()],
            actual: vec![b.nrows(), b.ncols()],
        });
    }
    let ss: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(ss.sqrt() / a.nrows().max(1) as f64)
}

/// Top-`k` ids by cosine similarity to `query`, best first; ties go to the
/// smaller id. Asking for more than the pool returns the whole pool.
pub fn select_task_images(
    pool: &[(String, Array1<f64>)],
    query: &Array1<f64>,
    k: usize,
) -> Result<Vec<String>> {
    if pool.is_empty() {
        return Err(PicError::Validation("image pool is empty".into()));
    }
    if k > pool.len() {
        log::warn!(
            "requested {k} images from a pool of {}; returning all",
            pool.len()
        );
    }
    let mut scored: Vec<(f64, &str)> = pool
        .iter()
        .map(|(id, e)| (cosine(e, query), id.as_str()))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(_, id)| id.to_string())
        .collect())
}
