//! Bayes-optimal denoiser for Gaussian data.
//!
//! Clean data given a prompt embedding `y` is `N(mu(y), Sigma(y))` with
//! `mu(y) = b + W vec(y)`. By default `Sigma = sigma^2 I`. Optionally pairs of
//! (edited, shared) coordinates are coupled through a prompt-dependent
//! `kappa(y) = w . vec(y)`:
//!
//! ```text
//! x_s = mu_s + sigma (kappa z_e + z_s)      x_e = mu_e + sigma z_e
//! ```
//!
//! which keeps the shared mean fixed but lets the prompt change how the
//! background co-varies with the object.
//!
//! Under `x_t = sqrt(a) x_0 + sqrt(1 - a) eps` the optimal predictor is
//! `E[eps | x_t] = sqrt(1 - a) (a Sigma + (1 - a) I)^-1 (x_t - sqrt(a) mu)`.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::adapters::{Concurrency, Denoiser};
use crate::error::{PicError, Result};
use crate::prompt::PromptEmbedding;
use crate::schedule::Timestep;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LeakCoupling {
    /// `(edited, shared)` coordinate pairs.
    pub pairs: Vec<(usize, usize)>,
    /// `kappa(y) = weights . vec(y)`.
    pub weights: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWorld {
    latent_shape: Vec<usize>,
    context_len: usize,
    embed_dim: usize,
    bias: Array1<f64>,
    mean_map: Array2<f64>,
    sigma: f64,
    edited: Vec<bool>,
    leak: Option<LeakCoupling>,
}

impl GaussianWorld {
    /// `mean_map` is `d x (L * D)`; rows of shared coordinates must be zero.
    pub fn new(
        latent_shape: Vec<usize>,
        context_len: usize,
        embed_dim: usize,
        bias: Array1<f64>,
        mean_map: Array2<f64>,
        sigma: f64,
        edited: Vec<bool>,
    ) -> Result<Self> {
        let d: usize = latent_shape.iter().product();
        if d == 0 || context_len == 0 || embed_dim == 0 {
            return Err(PicError::Config(
                "toy world dimensions must be non-zero".into(),
            ));
        }
        if bias.len() != d || edited.len() != d || mean_map.dim() != (d, context_len * embed_dim) {
            return Err(PicError::ShapeMismatch {
                expected: vec![d, context_len * embed_dim],
                actual: vec![mean_map.nrows(), mean_map.ncols()],
            });
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(PicError::Config(format!(
                "data std {sigma} must be positive"
            )));
        }
        if bias.iter().chain(mean_map.iter()).any(|v| !v.is_finite()) {
            return Err(PicError::Config(
                "toy mean map has non-finite entries".into(),
            ));
        }
        for (i, e) in edited.iter().enumerate() {
            if !e && mean_map.row(i).iter().any(|&v| v != 0.0) {
                return Err(PicError::Config(format!(
                    "shared coordinate {i} has a prompt-dependent mean"
                )));
            }
        }
        Ok(GaussianWorld {
            latent_shape,
            context_len,
            embed_dim,
            bias,
            mean_map,
            sigma,
            edited,
            leak: None,
        })
    }

    pub fn with_leak(mut self, leak: LeakCoupling) -> Result<Self> {
        if leak.weights.len() != self.context_len * self.embed_dim {
            return Err(PicError::ShapeMismatch {
                expected: vec![self.context_len * self.embed_dim],
                actual: vec![leak.weights.len()],
            });
        }
        let mut seen = vec![false; self.dim()];
        for &(e, s) in &leak.pairs {
            if e >= self.dim()
                || s >= self.dim()
                || !self.edited[e]
                || self.edited[s]
                || seen[e]
                || seen[s]
            {
                return Err(PicError::Config(format!(
                    "invalid coupling pair ({e}, {s})"
                )));
            }
            seen[e] = true;
            seen[s] = true;
        }
        self.leak = Some(leak);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn latent_shape(&self) -> &[usize] {
        &self.latent_shape
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn edited_mask(&self) -> &[bool] {
        &self.edited
    }

    pub fn edited_coords(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.edited[i]).collect()
    }

    pub fn shared_coords(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| !self.edited[i]).collect()
    }

    pub fn leak(&self) -> Option<&LeakCoupling> {
        self.leak.as_ref()
    }

    fn check_prompt(&self, y: &PromptEmbedding) -> Result<()> {
        if (y.len(), y.dim()) != (self.context_len, self.embed_dim) {
            return Err(PicError::ShapeMismatch {
                expected: vec![self.context_len, self.embed_dim],
                actual: vec![y.len(), y.dim()],
            });
        }
        Ok(())
    }

    /// `mu(y) = b + W vec(y)`, flattened.
    pub fn mean(&self, y: &PromptEmbedding) -> Result<Array1<f64>> {
        self.check_prompt(y)?;
        let v: Array1<f64> = y.flat().collect();
        Ok(&self.bias + &self.mean_map.dot(&v))
    }

    /// Coupling strength for `y` (zero without a coupling).
    pub fn kappa(&self, y: &PromptEmbedding) -> Result<f64> {
        self.check_prompt(y)?;
        Ok(match &self.leak {
            Some(l) => l.weights.iter().zip(y.flat()).map(|(w, v)| w * v).sum(),
            None => 0.0,
        })
    }

    /// Full data covariance for `y`, for oracles.
    pub fn covariance(&self, y: &PromptEmbedding) -> Result<Array2<f64>> {
        let s2 = self.sigma * self.sigma;
        let mut cov = Array2::eye(self.dim()) * s2;
        if let Some(l) = &self.leak {
            let k = self.kappa(y)?;
            for &(e, s) in &l.pairs {
                cov[[e, s]] = s2 * k;
                cov[[s, e]] = s2 * k;
                cov[[s, s]] = s2 * (1.0 + k * k);
            }
        }
        Ok(cov)
    }

    /// Draws one clean sample for `y`.
    pub fn sample<R: Rng + ?Sized>(&self, y: &PromptEmbedding, rng: &mut R) -> Result<Tensor> {
        let mu = self.mean(y)?;
        let k = self.kappa(y)?;
        let z: Vec<f64> = (0..self.dim())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let mut x: Vec<f64> = mu.iter().zip(&z).map(|(m, z)| m + self.sigma * z).collect();
        if let Some(l) = &self.leak {
            for &(e, s) in &l.pairs {
                x[s] += self.sigma * k * z[e];
            }
        }
        tensor::from_vec(&self.latent_shape, x)
    }

    /// `E[eps | x_t = x]` at noise level `alpha_bar`.
    ///
    /// Finite on the whole of `(0, 1]`; at `alpha_bar = 1` the latent is clean
    /// and the expected noise is zero.
    pub fn analytic_eps(&self, x: &Tensor, alpha_bar: f64, y: &PromptEmbedding) -> Result<Tensor> {
        if x.shape() != self.latent_shape.as_slice() {
            return Err(PicError::ShapeMismatch {
                expected: self.latent_shape.clone(),
                actual: x.shape().to_vec(),
            });
        }
        if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
            return Err(PicError::SingularSchedule { step: 0, alpha_bar });
        }
        let a = alpha_bar;
        let mu = self.mean(y)?;
        let sa = a.sqrt();
        let sn = (1.0 - a).sqrt();
        let s2 = self.sigma * self.sigma;
        let denom = a * s2 + 1.0 - a;
        let resid: Vec<f64> = x.iter().zip(mu.iter()).map(|(xv, m)| xv - sa * m).collect();
        let mut out: Vec<f64> = resid.iter().map(|r| sn * r / denom).collect();
        if let Some(l) = &self.leak {
            let k = self.kappa(y)?;
            // (a Sigma + (1 - a) I) restricted to one pair
            let m11 = denom;
            let m12 = a * s2 * k;
            let m22 = a * s2 * (1.0 + k * k) + 1.0 - a;
            let det = m11 * m22 - m12 * m12;
            for &(e, s) in &l.pairs {
                let (re, rs) = (resid[e], resid[s]);
                out[e] = sn * (m22 * re - m12 * rs) / det;
                out[s] = sn * (m11 * rs - m12 * re) / det;
            }
        }
        tensor::from_vec(&self.latent_shape, out)
    }
}

/// [`GaussianWorld`] behind the [`Denoiser`] interface.
#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    world: GaussianWorld,
}

impl GaussianDenoiser {
    pub fn new(world: GaussianWorld) -> Self {
        GaussianDenoiser { world }
    }

    pub fn world(&self) -> &GaussianWorld {
        &self.world
    }
}

impl Denoiser for GaussianDenoiser {
    fn name(&self) -> &str {
        "toy-gaussian"
    }

    fn latent_shape(&self) -> Vec<usize> {
        self.world.latent_shape.clone()
    }

    fn context_len(&self) -> usize {
        self.world.context_len
    }

    fn predict(&self, x: &Tensor, ts: Timestep, y: &PromptEmbedding) -> Result<Tensor> {
        self.world
            .analytic_eps(x, ts.alpha_bar, y)
            .map_err(|e| match e {
                PicError::SingularSchedule { alpha_bar, .. } => PicError::SingularSchedule {
                    step: ts.index,
                    alpha_bar,
                },
                other => other,
            })
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Shared
    }
}
