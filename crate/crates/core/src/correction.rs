//! The corrected reverse process.
//!
//! Inside the correction window (the first `tau` reverse steps) the noise
//! used for the step is the cached source noise plus `gamma` times the gap
//! between the interpolated-prompt and source-prompt predictions on the
//! current target latent. After the window the reverse process is plain DDIM
//! conditioned on the target prompt.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::TrajectoryCache;
use crate::error::{PicError, Result};
use crate::guidance::GuidedDenoiser;
use crate::integrations::{Integration, WindowStep};
use crate::prompt::{interpolate, InterpolationPlan, PromptEmbedding};
use crate::schedule::{reverse_step, DiffusionSchedule, LatentState};
use crate::tensor::{self, Tensor};

pub const DEFAULT_GAMMA: f64 = 1.0;
pub const DEFAULT_TAU: usize = 25;
pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.5;
/// Correction weights swept by the `sweep` command.
pub const GAMMA_SWEEP: [f64; 5] = [0.5, 1.0, 1.5, 2.0, 2.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain DDIM with the target prompt.
    Ddim,
    /// DDIM with the interpolated prompt inside the window, no correction.
    DdimPi,
    /// Noise correction against the target prompt, no interpolation.
    DdimNc,
    /// Noise correction against the interpolated prompt.
    Pic,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Ddim,
        Variant::DdimPi,
        Variant::DdimNc,
        Variant::Pic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ddim => "ddim",
            Variant::DdimPi => "ddim_pi",
            Variant::DdimNc => "ddim_nc",
            Variant::Pic => "pic",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = PicError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                PicError::Config(format!(
                    "unknown variant {s:?} (ddim, ddim_pi, ddim_nc, pic)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    pub gamma: f64,
    pub tau: usize,
    /// Initial mixing weight; `None` uses the edit kind's default.
    pub beta: Option<f64>,
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            gamma: DEFAULT_GAMMA,
            tau: DEFAULT_TAU,
            beta: None,
            num_steps: DEFAULT_STEPS,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            seed: 0,
            variant: Variant::Pic,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(PicError::Config(format!(
                "gamma = {} must be finite and >= 0",
                self.gamma
            )));
        }
        if self.num_steps == 0 {
            return Err(PicError::Config("steps must be >= 1".into()));
        }
        if self.tau > self.num_steps {
            return Err(PicError::Config(format!(
                "tau = {} exceeds steps = {}",
                self.tau, self.num_steps
            )));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 1.0) {
            return Err(PicError::Config(format!(
                "guidance_scale = {} must be >= 1",
                self.guidance_scale
            )));
        }
        if let Some(b) = self.beta {
            if !(0.0..=1.0).contains(&b) {
                return Err(PicError::Config(format!("beta = {b} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Window length actually used by the variant.
    pub fn effective_tau(&self) -> usize {
        if self.variant == Variant::Ddim {
            0
        } else {
            self.tau
        }
    }

    /// `plan` with this config's `beta`, if set.
    pub fn apply_to(&self, plan: &InterpolationPlan) -> InterpolationPlan {
        let mut plan = plan.clone();
        if let Some(b) = self.beta {
            plan.beta = b;
        }
        plan
    }
}

/// Denoiser evaluations of one edit, counted in guided predictions (an
/// unguided call and a classifier-free-guided pair both count once).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CallLedger {
    /// Inversion predictions behind the cache.
    pub forward_calls: usize,
    /// Predictions on target latents inside the correction window.
    pub corrected_calls: usize,
    /// Target-prompt predictions after the window.
    pub plain_calls: usize,
    /// Fresh source prediction at `t = T` (zero when already memoized).
    pub terminal_calls: usize,
    /// Conditional-only source passes recorded for attention injection.
    pub snapshot_calls: usize,
    /// Attention-guidance gradient evaluations.
    pub guidance_calls: usize,
    /// Inner evaluations per guided prediction: 1, or 2 with guidance.
    pub calls_per_prediction: usize,
}

impl CallLedger {
    /// `(forward, corrected, plain)` a complete run must report.
    pub fn expected(
        variant: Variant,
        steps: usize,
        tau: usize,
        gamma: f64,
    ) -> (usize, usize, usize) {
        let tau = if variant == Variant::Ddim { 0 } else { tau };
        let corrected = match variant {
            Variant::Ddim => 0,
            Variant::DdimPi => tau,
            Variant::DdimNc | Variant::Pic if gamma == 0.0 => 0,
            Variant::DdimNc | Variant::Pic => 2 * tau,
        };
        (steps, corrected, steps - tau)
    }

    /// Sampler-level predictions, before the guidance doubling.
    pub fn predictions(&self) -> usize {
        self.forward_calls + self.corrected_calls + self.plain_calls + self.terminal_calls
    }

    /// Inner `predict`/`predict_hooked` calls, after the guidance doubling.
    pub fn model_calls(&self) -> usize {
        self.predictions() * self.calls_per_prediction + self.snapshot_calls
    }

    /// The three headline counts with guidance doubling applied.
    pub fn doubled(&self) -> (usize, usize, usize) {
        let k = self.calls_per_prediction;
        (
            self.forward_calls * k,
            self.corrected_calls * k,
            self.plain_calls * k,
        )
    }
}

/// `eps_interp - eps_src_cond`.
pub fn correction_term(eps_interp: &Tensor, eps_src_cond: &Tensor) -> Result<Tensor> {
    tensor::lincomb(1.0, eps_interp, -1.0, eps_src_cond)
}

/// `eps_src_saved + gamma * delta`.
pub fn corrected_noise(eps_src_saved: &Tensor, delta: &Tensor, gamma: f64) -> Result<Tensor> {
    tensor::lincomb(1.0, eps_src_saved, gamma, delta)
}

/// Everything an edit reads.
#[derive(Clone, Copy)]
pub struct EditInputs<'m, 'a> {
    pub cache: &'m TrajectoryCache,
    pub y_src: &'m PromptEmbedding,
    pub y_tgt: &'m PromptEmbedding,
    pub plan: &'m InterpolationPlan,
    pub model: &'m GuidedDenoiser<'a>,
    pub sched: &'m DiffusionSchedule,
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub latent: Tensor,
    pub ledger: CallLedger,
    /// `trajectory[t]` is the target latent at grid point `t`.
    pub trajectory: Vec<Tensor>,
}

fn check_inputs(inputs: &EditInputs<'_, '_>, config: &EditConfig) -> Result<()> {
    config.validate()?;
    let steps = inputs.cache.num_steps();
    if config.num_steps != steps
        || inputs.plan.total_steps != steps
        || inputs.sched.num_steps() != steps
    {
        return Err(PicError::Validation(format!(
            "step counts disagree: cache {steps}, config {}, plan {}, schedule {}",
            config.num_steps,
            inputs.plan.total_steps,
            inputs.sched.num_steps()
        )));
    }
    if inputs.sched.fingerprint() != inputs.cache.schedule().fingerprint() {
        return Err(PicError::Validation(
            "schedule differs from the one the cache was inverted with".into(),
        ));
    }
    if inputs.y_src.fingerprint() != inputs.cache.prompt_fingerprint() {
        return Err(PicError::Validation(
            "source prompt differs from the one the cache was inverted with".into(),
        ));
    }
    if inputs.model.scale() != config.guidance_scale {
        return Err(PicError::Validation(format!(
            "config guidance scale {} but the model guides at {}",
            config.guidance_scale,
            inputs.model.scale()
        )));
    }
    if inputs.model.scale() != inputs.cache.guidance_scale() {
        return Err(PicError::Validation(format!(
            "guidance scale {} differs from the inversion's {}",
            inputs.model.scale(),
            inputs.cache.guidance_scale()
        )));
    }
    inputs.plan.validate(inputs.y_tgt.len())?;
    tensor::ensure_same_shape(inputs.cache.latent(0), inputs.cache.latent(steps))?;
    Ok(())
}

fn finite(t: Tensor, step: usize, branch: &str) -> Result<Tensor> {
    if tensor::all_finite(&t) {
        Ok(t)
    } else {
        Err(PicError::numerical(step, branch, "non-finite value"))
    }
}

/// Runs one edit: the variant's window followed by plain target-prompt DDIM.
pub fn run_edit(
    inputs: &EditInputs<'_, '_>,
    config: &EditConfig,
    integration: &Integration,
) -> Result<EditOutcome> {
    check_inputs(inputs, config)?;
    integration.validate()?;
    let plan = config.apply_to(inputs.plan);
    let EditInputs {
        cache,
        y_src,
        y_tgt,
        model,
        sched,
        ..
    } = *inputs;
    let steps = cache.num_steps();
    let tau = config.effective_tau();
    let gamma = config.gamma;
    let variant = config.variant;

    let mut ledger = CallLedger {
        forward_calls: steps,
        calls_per_prediction: model.calls_per_prediction(),
        ..Default::default()
    };
    let mut trajectory = vec![tensor::zeros(&[0]); steps + 1];
    let mut state = LatentState::new(cache.latent(steps).clone(), steps);
    trajectory[steps] = state.data.clone();

    while state.t > 0 {
        let t = state.t;
        let ts = sched.timestep(t)?;
        let (start, eps) = if t + tau > steps {
            let eps_src = if t == steps {
                let (eps, fresh) = cache.terminal_noise(y_src, model)?;
                ledger.terminal_calls += usize::from(fresh);
                eps.clone()
            } else {
                cache.noise(t).clone()
            };
            let step = WindowStep {
                model,
                ts,
                total_steps: steps,
                x_src: cache.latent(t),
                y_src,
            };
            match variant {
                Variant::Pic | Variant::DdimNc if gamma == 0.0 => (None, eps_src),
                Variant::Pic | Variant::DdimNc => {
                    let y_mix = match variant {
                        Variant::Pic => interpolate(y_src, y_tgt, &plan, plan.beta_at(t))?,
                        _ => y_tgt.clone(),
                    };
                    let pred = integration.window_prediction(
                        &step,
                        &state.data,
                        &y_mix,
                        true,
                        &mut ledger,
                    )?;
                    ledger.corrected_calls += 2;
                    let eps_mix = finite(pred.eps_mix, t, "interpolated prompt")?;
                    let eps_cond =
                        finite(pred.eps_src_cond.expect("requested"), t, "source prompt")?;
                    let delta = correction_term(&eps_mix, &eps_cond)?;
                    (pred.latent, corrected_noise(&eps_src, &delta, gamma)?)
                }
                Variant::DdimPi => {
                    let y_mix = interpolate(y_src, y_tgt, &plan, plan.beta_at(t))?;
                    let pred = integration.window_prediction(
                        &step,
                        &state.data,
                        &y_mix,
                        false,
                        &mut ledger,
                    )?;
                    ledger.corrected_calls += 1;
                    (pred.latent, finite(pred.eps_mix, t, "interpolated prompt")?)
                }
                Variant::Ddim => unreachable!("plain DDIM has an empty window"),
            }
        } else {
            ledger.plain_calls += 1;
            (
                None,
                finite(model.predict(&state.data, ts, y_tgt)?, t, "target prompt")?,
            )
        };
        if let Some(x_hat) = start {
            state.data = x_hat;
        }
        state = reverse_step(&state, &eps, sched)?;
        state.data = finite(state.data, t, "reverse step")?;
        trajectory[state.t] = state.data.clone();
    }
    Ok(EditOutcome {
        latent: state.data,
        ledger,
        trajectory,
    })
}

/// The full method without an integration.
pub fn pic_reverse(
    inputs: &EditInputs<'_, '_>,
    config: &EditConfig,
) -> Result<(Tensor, CallLedger)> {
    let config = EditConfig {
        variant: Variant::Pic,
        ..*config
    };
    run_variant(Variant::Pic, inputs, &config)
}

pub fn run_variant(
    variant: Variant,
    inputs: &EditInputs<'_, '_>,
    config: &EditConfig,
) -> Result<(Tensor, CallLedger)> {
    let config = EditConfig { variant, ..*config };
    let out = run_edit(inputs, &config, &Integration::None)?;
    Ok((out.latent, out.ledger))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn correction_term_definition() {
        let a = arr1(&[1.0, 2.0]).into_dyn();
        let b = arr1(&[0.5, 2.0]).into_dyn();
        assert_eq!(
            correction_term(&a, &b).unwrap(),
            arr1(&[0.5, 0.0]).into_dyn()
        );
        assert!(correction_term(&a, &arr1(&[1.0]).into_dyn()).is_err());
    }

    #[test]
    fn corrected_noise_gamma_cases() {
        let e = arr1(&[0.3, -1.0]).into_dyn();
        let d = arr1(&[2.0, 4.0]).into_dyn();
        assert_eq!(corrected_noise(&e, &d, 0.0).unwrap(), e);
        assert_eq!(
            corrected_noise(&e, &d, 1.0).unwrap(),
            arr1(&[2.3, 3.0]).into_dyn()
        );
    }

    #[test]
    fn config_validation() {
        assert!(EditConfig::default().validate().is_ok());
        for bad in [
            EditConfig {
                gamma: -0.1,
                ..Default::default()
            },
            EditConfig {
                tau: 51,
                ..Default::default()
            },
            EditConfig {
                guidance_scale: 0.5,
                ..Default::default()
            },
            EditConfig {
                beta: Some(1.5),
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn ledger_expectations() {
        assert_eq!(
            CallLedger::expected(Variant::Pic, 50, 25, 1.0),
            (50, 50, 25)
        );
        assert_eq!(
            CallLedger::expected(Variant::Ddim, 50, 25, 1.0),
            (50, 0, 50)
        );
        assert_eq!(
            CallLedger::expected(Variant::DdimPi, 50, 25, 1.0),
            (50, 25, 25)
        );
        assert_eq!(CallLedger::expected(Variant::Pic, 50, 25, 0.0), (50, 0, 25));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("pix".parse::<Variant>().is_err());
    }
}
