//! Dense latent / noise tensors.
//!
//! Everything the sampler touches is an `f64` n-dimensional array. Backbones
//! that run in single precision convert at the adapter boundary, so the
//! schedule arithmetic never sees `f32` roundoff.

use ndarray::{ArrayD, IxDyn, Zip};
use sha2::{Digest, Sha256};

use crate::error::{PicError, Result};

pub type Tensor = ArrayD<f64>;

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(IxDyn(shape))
}

pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(PicError::Validation(format!(
            "tensor of shape {shape:?} needs {n} values, got {}",
            data.len()
        )));
    }
    Tensor::from_shape_vec(IxDyn(shape), data).map_err(|e| PicError::Validation(e.to_string()))
}

pub fn ensure_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(PicError::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn all_finite(t: &Tensor) -> bool {
    t.iter().all(|v| v.is_finite())
}

/// `a * x + b * y`, elementwise.
pub fn lincomb(a: f64, x: &Tensor, b: f64, y: &Tensor) -> Result<Tensor> {
    ensure_same_shape(x, y)?;
    let mut out = zeros(x.shape());
    Zip::from(&mut out)
        .and(x)
        .and(y)
        .for_each(|o, &xv, &yv| *o = a * xv + b * yv);
    Ok(out)
}

pub fn l2_norm(t: &Tensor) -> f64 {
    t.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn rms(t: &Tensor) -> f64 {
    if t.is_empty() {
        return 0.0;
    }
    (t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt()
}

/// Bitwise equality, treating every NaN payload as distinct from numbers.
pub fn bitwise_eq(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Hex SHA-256 over shape and little-endian value bytes.
pub fn fingerprint(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.iter() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}
