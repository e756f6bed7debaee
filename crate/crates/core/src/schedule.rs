//! Deterministic DDIM coefficient schedule and the single-step transfer rules.
//!
//! The inference grid has `T + 1` points. Index `0` is the clean endpoint with
//! `alpha_bar = 1`; index `T` is the noisiest point. Training timesteps are
//! counted from one (`alpha_bar(n) = prod_{i=1..n} (1 - beta_i)`, with
//! `alpha_bar(0) = 1`), and the inference grid picks `round(t * N / T)`, which
//! is the trailing-aligned even subsample of the training grid.

use serde::{Deserialize, Serialize};

use crate::cache::TrajectoryCache;
use crate::error::{PicError, Result};
use crate::guidance::GuidedDenoiser;
use crate::prompt::PromptEmbedding;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `beta` linear in `[1e-4, 0.02]`.
    Linear,
    /// `sqrt(beta)` linear in `[sqrt(0.00085), sqrt(0.012)]` (latent diffusion).
    ScaledLinear,
}

impl ScheduleKind {
    pub fn beta_range(self) -> (f64, f64) {
        match self {
            ScheduleKind::Linear => (1e-4, 0.02),
            ScheduleKind::ScaledLinear => (0.00085, 0.012),
        }
    }

    /// Per-step training betas `beta_1 ..= beta_N`.
    pub fn betas(self, num_train_steps: usize) -> Vec<f64> {
        let (start, end) = self.beta_range();
        let frac = |i: usize| {
            if num_train_steps == 1 {
                0.0
            } else {
                i as f64 / (num_train_steps - 1) as f64
            }
        };
        match self {
            ScheduleKind::Linear => (0..num_train_steps)
                .map(|i| start + frac(i) * (end - start))
                .collect(),
            ScheduleKind::ScaledLinear => {
                let (s, e) = (start.sqrt(), end.sqrt());
                (0..num_train_steps)
                    .map(|i| {
                        let r = s + frac(i) * (e - s);
                        r * r
                    })
                    .collect()
            }
        }
    }
}

/// Coefficients at one point of the inference grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timestep {
    /// Inference-grid index `t` in `0..=T`.
    pub index: usize,
    pub alpha_bar: f64,
    /// One-based training timestep; `0` is the clean endpoint.
    pub train_step: usize,
}

impl Timestep {
    /// Zero-based conditioning timestep for backbones trained on `0..N`.
    pub fn model_timestep(&self) -> usize {
        self.train_step.saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    alphas: Vec<f64>,
    train_grid: Vec<usize>,
    num_train_steps: usize,
    kind: Option<ScheduleKind>,
}

impl DiffusionSchedule {
    /// Builds the standard schedule for `num_inference_steps` over a
    /// `num_train_steps` training grid.
    pub fn build(
        num_train_steps: usize,
        num_inference_steps: usize,
        kind: ScheduleKind,
    ) -> Result<Self> {
        if num_inference_steps == 0 || num_inference_steps > num_train_steps {
            return Err(PicError::Config(format!(
                "need 1 <= inference steps ({num_inference_steps}) <= training steps ({num_train_steps})"
            )));
        }
        let mut cumulative = Vec::with_capacity(num_train_steps + 1);
        cumulative.push(1.0f64);
        let mut acc = 1.0f64;
        for beta in kind.betas(num_train_steps) {
            acc *= 1.0 - beta;
            cumulative.push(acc);
        }
        let train_grid: Vec<usize> = (0..=num_inference_steps)
            .map(|t| {
                ((t as f64) * num_train_steps as f64 / num_inference_steps as f64).round() as usize
            })
            .collect();
        let alphas = train_grid.iter().map(|&n| cumulative[n]).collect();
        let sched = DiffusionSchedule {
            alphas,
            train_grid,
            num_train_steps,
            kind: Some(kind),
        };
        sched.validate()?;
        Ok(sched)
    }

    /// A schedule from explicit coefficients; validated.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        let sched = Self::from_alphas_unchecked(alphas);
        sched.validate()?;
        Ok(sched)
    }

    /// A schedule from explicit coefficients without invariant checks.
    ///
    /// Exists so that degenerate grids (constant segments, corrupted tables)
    /// can be fed to the step functions and to the invariant suite.
    pub fn from_alphas_unchecked(alphas: Vec<f64>) -> Self {
        let n = alphas.len().saturating_sub(1);
        DiffusionSchedule {
            train_grid: (0..alphas.len()).collect(),
            alphas,
            num_train_steps: n,
            kind: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(PicError::Config(
                "schedule needs at least one grid point".into(),
            ));
        }
        if self.train_grid.len() != self.alphas.len() {
            return Err(PicError::Config(
                "train grid and alpha table lengths differ".into(),
            ));
        }
        for (t, &a) in self.alphas.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(PicError::Config(format!(
                    "alpha_bar[{t}] = {a} outside (0, 1]"
                )));
            }
        }
        for t in 0..self.num_steps() {
            if self.alphas[t + 1] >= self.alphas[t] {
                return Err(PicError::Config(format!(
                    "alpha_bar not strictly decreasing at step {t}: {} -> {}",
                    self.alphas[t],
                    self.alphas[t + 1]
                )));
            }
        }
        Ok(())
    }

    /// `T`, the number of inference steps.
    pub fn num_steps(&self) -> usize {
        self.alphas.len().saturating_sub(1)
    }

    pub fn num_train_steps(&self) -> usize {
        self.num_train_steps
    }

    pub fn kind(&self) -> Option<ScheduleKind> {
        self.kind
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn train_grid(&self) -> &[usize] {
        &self.train_grid
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas.get(t).copied().ok_or(PicError::StepIndex {
            index: t,
            num_steps: self.num_steps(),
            context: "alpha lookup",
        })
    }

    pub fn timestep(&self, t: usize) -> Result<Timestep> {
        Ok(Timestep {
            index: t,
            alpha_bar: self.alpha_bar(t)?,
            train_step: self.train_grid[t],
        })
    }

    /// Stable identifier of the coefficient table.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::with_capacity(self.alphas.len() * 16);
        for (a, g) in self.alphas.iter().zip(&self.train_grid) {
            bytes.extend_from_slice(&a.to_le_bytes());
            bytes.extend_from_slice(&(*g as u64).to_le_bytes());
        }
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub data: Tensor,
    pub t: usize,
}

impl LatentState {
    pub fn new(data: Tensor, t: usize) -> Self {
        LatentState { data, t }
    }
}

/// `(x - sqrt(1 - a) * eps) / sqrt(a)`.
pub fn predict_x0_at(x: &Tensor, eps: &Tensor, alpha_bar: f64, step: usize) -> Result<Tensor> {
    tensor::ensure_same_shape(x, eps)?;
    if alpha_bar.is_nan() || alpha_bar <= 0.0 {
        return Err(PicError::SingularSchedule { step, alpha_bar });
    }
    let noise_scale = (1.0 - alpha_bar).sqrt();
    let inv = 1.0 / alpha_bar.sqrt();
    let mut out = x.clone();
    out.zip_mut_with(eps, |o, &e| *o = (*o - noise_scale * e) * inv);
    Ok(out)
}

/// Moves a latent from the grid point with `alpha_from` to the one with
/// `alpha_to` using one noise estimate for both the clean prediction and the
/// re-noising term.
pub fn ddim_transfer(
    x: &Tensor,
    eps: &Tensor,
    alpha_from: f64,
    alpha_to: f64,
    step: usize,
) -> Result<Tensor> {
    let x0 = predict_x0_at(x, eps, alpha_from, step)?;
    let signal = alpha_to.sqrt();
    let noise = (1.0 - alpha_to).sqrt();
    let mut out = x0;
    out.zip_mut_with(eps, |o, &e| *o = signal * *o + noise * e);
    Ok(out)
}

pub fn predict_x0(x: &LatentState, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    predict_x0_at(&x.data, eps, sched.alpha_bar(x.t)?, x.t)
}

/// One inversion step, `t -> t + 1`.
pub fn forward_step(
    x: &LatentState,
    eps: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<LatentState> {
    if x.t >= sched.num_steps() {
        return Err(PicError::StepIndex {
            index: x.t,
            num_steps: sched.num_steps(),
            context: "forward step from the last grid point",
        });
    }
    let data = ddim_transfer(
        &x.data,
        eps,
        sched.alpha_bar(x.t)?,
        sched.alpha_bar(x.t + 1)?,
        x.t,
    )?;
    Ok(LatentState::new(data, x.t + 1))
}

/// One generation step, `t -> t - 1`.
pub fn reverse_step(
    x: &LatentState,
    eps: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<LatentState> {
    if x.t == 0 || x.t > sched.num_steps() {
        return Err(PicError::StepIndex {
            index: x.t,
            num_steps: sched.num_steps(),
            context: "reverse step needs 1 <= t <= T",
        });
    }
    let data = ddim_transfer(
        &x.data,
        eps,
        sched.alpha_bar(x.t)?,
        sched.alpha_bar(x.t - 1)?,
        x.t,
    )?;
    Ok(LatentState::new(data, x.t - 1))
}

fn checked(eps: Tensor, step: usize, branch: &str) -> Result<Tensor> {
    if tensor::all_finite(&eps) {
        Ok(eps)
    } else {
        Err(PicError::numerical(
            step,
            branch,
            "non-finite noise prediction",
        ))
    }
}

/// Runs the deterministic forward process from `x0`, saving every source
/// noise prediction along the way.
pub fn invert_source(
    x0: &Tensor,
    y_src: &PromptEmbedding,
    model: &GuidedDenoiser<'_>,
    sched: &DiffusionSchedule,
) -> Result<TrajectoryCache> {
    if !tensor::all_finite(x0) {
        return Err(PicError::Validation(
            "source latent contains non-finite values".into(),
        ));
    }
    let steps = sched.num_steps();
    let mut latents = Vec::with_capacity(steps + 1);
    let mut noises = Vec::with_capacity(steps);
    let mut state = LatentState::new(x0.clone(), 0);
    for t in 0..steps {
        let eps = checked(
            model.predict(&state.data, sched.timestep(t)?, y_src)?,
            t,
            "inversion",
        )?;
        let next = forward_step(&state, &eps, sched)?;
        latents.push(state.data);
        noises.push(eps);
        state = next;
    }
    latents.push(state.data);
    Ok(TrajectoryCache::new(
        latents,
        noises,
        y_src.fingerprint(),
        sched.clone(),
        model.scale(),
    )?
    .with_model(model.inner().name()))
}

/// Plain DDIM generation from `x` at grid point `from` down to `0`, with a
/// fresh prediction conditioned on `y` at every step.
pub fn ddim_generate(
    x: &Tensor,
    from: usize,
    y: &PromptEmbedding,
    model: &GuidedDenoiser<'_>,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    let mut state = LatentState::new(x.clone(), from);
    while state.t > 0 {
        let eps = checked(
            model.predict(&state.data, sched.timestep(state.t)?, y)?,
            state.t,
            "plain",
        )?;
        state = reverse_step(&state, &eps, sched)?;
    }
    Ok(state.data)
}

/// Regenerates the source from `x^src_T` by replaying the cached source noise
/// with the correction-loop index rule: cache index `t` for `t < T`, and a
/// fresh source-conditioned prediction on `x^src_T` at `t = T`.
pub fn replay_reconstruct(
    cache: &TrajectoryCache,
    y_src: &PromptEmbedding,
    model: &GuidedDenoiser<'_>,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    let steps = cache.num_steps();
    let mut state = LatentState::new(cache.latent(steps).clone(), steps);
    while state.t > 0 {
        let eps = if state.t == steps {
            checked(
                model.predict(cache.latent(steps), sched.timestep(steps)?, y_src)?,
                steps,
                "terminal",
            )?
        } else {
            cache.noise(state.t).clone()
        };
        state = reverse_step(&state, &eps, sched)?;
    }
    Ok(state.data)
}
