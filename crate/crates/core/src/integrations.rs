//! PIC grafted onto three baseline editors.
//!
//! Each integration only changes how the interpolated-prompt prediction inside
//! the correction window is formed:
//!
//! * prompt-to-prompt injects the source pass's cross- and self-attention maps,
//! * plug-and-play injects the source pass's self-attention maps and features,
//! * pix2pix-zero takes a gradient step on the target latent that pulls its
//!   cross-attention maps towards the source's, then predicts from there.
//!
//! The source-prompt prediction is always formed without injection, and the
//! corrected noise is still `eps_src + gamma * (eps_mix - eps_src_cond)`.

use serde::{Deserialize, Serialize};

use crate::correction::CallLedger;
use crate::error::{PicError, Result};
use crate::guidance::GuidedDenoiser;
use crate::hooks::{AttentionSnapshot, HookScope, InjectKinds};
use crate::prompt::PromptEmbedding;
use crate::schedule::Timestep;
use crate::tensor::{self, Tensor};

/// Default step size of the cross-attention guidance.
pub const DEFAULT_LAMBDA_XA: f64 = 0.1;

/// Fractions of the schedule, counted from `t = T`, during which each kind of
/// source tensor is injected. Injection never extends past the correction
/// window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionConfig {
    pub cross_window: f64,
    pub self_window: f64,
    pub feature_window: f64,
}

impl InjectionConfig {
    pub fn prompt_to_prompt() -> Self {
        InjectionConfig {
            cross_window: 0.8,
            self_window: 0.4,
            feature_window: 0.0,
        }
    }

    pub fn plug_and_play() -> Self {
        InjectionConfig {
            cross_window: 0.0,
            self_window: 0.5,
            feature_window: 0.8,
        }
    }

    pub fn disabled() -> Self {
        InjectionConfig {
            cross_window: 0.0,
            self_window: 0.0,
            feature_window: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("cross_window", self.cross_window),
            ("self_window", self.self_window),
            ("feature_window", self.feature_window),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PicError::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Kinds injected at grid point `t` of a `total`-step schedule.
    pub fn kinds_at(&self, t: usize, total: usize) -> InjectKinds {
        let elapsed = total.saturating_sub(t) as f64;
        let on = |frac: f64| elapsed < frac * total as f64;
        InjectKinds {
            cross: on(self.cross_window),
            self_attn: on(self.self_window),
            features: on(self.feature_window),
        }
    }
}

impl Default for InjectionConfig {
    fn default() -> Self {
        InjectionConfig::prompt_to_prompt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub lambda_xa: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            lambda_xa: DEFAULT_LAMBDA_XA,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_xa >= 0.0 && self.lambda_xa.is_finite()) {
            return Err(PicError::Config(format!(
                "lambda_xa = {} must be finite and >= 0",
                self.lambda_xa
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Integration {
    #[default]
    None,
    Ptp(InjectionConfig),
    Pnp(InjectionConfig),
    P2p(GuidanceConfig),
}

impl Integration {
    pub fn key(&self) -> &'static str {
        match self {
            Integration::None => "none",
            Integration::Ptp(_) => "ptp",
            Integration::Pnp(_) => "pnp",
            Integration::P2p(_) => "p2p",
        }
    }

    /// The integration with its published defaults.
    pub fn from_key(key: &str) -> Result<Self> {
        Ok(match key {
            "none" => Integration::None,
            "ptp" => Integration::Ptp(InjectionConfig::prompt_to_prompt()),
            "pnp" => Integration::Pnp(InjectionConfig::plug_and_play()),
            "p2p" => Integration::P2p(GuidanceConfig::default()),
            other => {
                return Err(PicError::Config(format!(
                    "unknown integration {other:?} (none, ptp, pnp, p2p)"
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Integration::None => Ok(()),
            Integration::Ptp(c) | Integration::Pnp(c) => c.validate(),
            Integration::P2p(c) => c.validate(),
        }
    }
}

/// What one correction-window step needs to know about the source side.
pub struct WindowStep<'m, 'a> {
    pub model: &'m GuidedDenoiser<'a>,
    pub ts: Timestep,
    pub total_steps: usize,
    pub x_src: &'m Tensor,
    pub y_src: &'m PromptEmbedding,
}

/// Predictions an integration produces inside the correction window.
#[derive(Debug, Clone)]
pub struct WindowPrediction {
    /// Replacement latent the reverse step starts from (guidance only).
    pub latent: Option<Tensor>,
    /// The interpolated-prompt prediction, with any injection applied.
    pub eps_mix: Tensor,
    /// The plain source-prompt prediction on the same latent, when requested.
    pub eps_src_cond: Option<Tensor>,
}

/// Captures the source pass's maps at this step. Only the conditional branch
/// is run, so this costs one inner call whatever the guidance scale.
pub fn capture_source_snapshot(
    step: &WindowStep<'_, '_>,
    ledger: &mut CallLedger,
) -> Result<AttentionSnapshot> {
    let mut scope = HookScope::capturing(step.ts.index);
    step.model
        .inner()
        .predict_hooked(step.x_src, step.ts, step.y_src, &mut scope)?;
    ledger.snapshot_calls += 1;
    let snap = scope.into_snapshot();
    snap.validate()?;
    Ok(snap)
}

fn check_snapshot_step(snapshot: &AttentionSnapshot, ts: Timestep) -> Result<()> {
    if snapshot.step != ts.index {
        return Err(PicError::Validation(format!(
            "source snapshot was captured at step {}, used at step {}",
            snapshot.step, ts.index
        )));
    }
    Ok(())
}

fn injected_pair(
    model: &GuidedDenoiser<'_>,
    x_tgt: &Tensor,
    ts: Timestep,
    y_t: &PromptEmbedding,
    y_src: &PromptEmbedding,
    snapshot: &AttentionSnapshot,
    kinds: InjectKinds,
) -> Result<(Tensor, Tensor)> {
    check_snapshot_step(snapshot, ts)?;
    let mut scope = HookScope::injecting(snapshot.clone(), kinds)?;
    let eps_mix = model.predict_hooked(x_tgt, ts, y_t, &mut scope)?;
    let eps_src = model.predict(x_tgt, ts, y_src)?;
    Ok((eps_mix, eps_src))
}

/// Prompt-to-prompt: `(eps(x^tgt, t, y_t) with source cross/self maps
/// injected, eps(x^tgt, t, y^src))`.
pub fn ptp_corrected_predict(
    model: &GuidedDenoiser<'_>,
    x_tgt: &Tensor,
    ts: Timestep,
    y_t: &PromptEmbedding,
    y_src: &PromptEmbedding,
    snapshot: &AttentionSnapshot,
) -> Result<(Tensor, Tensor)> {
    let kinds = InjectKinds {
        cross: true,
        self_attn: true,
        features: false,
    };
    injected_pair(model, x_tgt, ts, y_t, y_src, snapshot, kinds)
}

/// Plug-and-play: as [`ptp_corrected_predict`] but injecting self-attention
/// maps and residual features.
pub fn pnp_corrected_predict(
    model: &GuidedDenoiser<'_>,
    x_tgt: &Tensor,
    ts: Timestep,
    y_t: &PromptEmbedding,
    y_src: &PromptEmbedding,
    snapshot: &AttentionSnapshot,
) -> Result<(Tensor, Tensor)> {
    let kinds = InjectKinds {
        cross: false,
        self_attn: true,
        features: true,
    };
    injected_pair(model, x_tgt, ts, y_t, y_src, snapshot, kinds)
}

/// `x - lambda * grad_x || M(x, y_t) - M_src ||_F^2`.
pub fn p2p_guidance_step(
    model: &GuidedDenoiser<'_>,
    x_tgt: &Tensor,
    ts: Timestep,
    y_t: &PromptEmbedding,
    snapshot: &AttentionSnapshot,
    cfg: &GuidanceConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.lambda_xa == 0.0 {
        return Ok(x_tgt.clone());
    }
    check_snapshot_step(snapshot, ts)?;
    if snapshot.cross_maps.is_empty() {
        return Err(PicError::Validation(
            "cross-attention guidance needs source cross-attention maps".into(),
        ));
    }
    let (_loss, grad) = model.cross_attention_guidance(x_tgt, ts, y_t, snapshot)?;
    tensor::ensure_same_shape(x_tgt, &grad)?;
    if !tensor::all_finite(&grad) {
        return Err(PicError::numerical(
            ts.index,
            "cross-attention guidance",
            "non-finite gradient",
        ));
    }
    tensor::lincomb(1.0, x_tgt, -cfg.lambda_xa, &grad)
}

/// `eps(x_hat, t, y_t) - eps(x_hat, t, y^src)`.
pub fn p2p_correction(
    model: &GuidedDenoiser<'_>,
    x_hat: &Tensor,
    ts: Timestep,
    y_t: &PromptEmbedding,
    y_src: &PromptEmbedding,
) -> Result<Tensor> {
    let a = model.predict(x_hat, ts, y_t)?;
    let b = model.predict(x_hat, ts, y_src)?;
    crate::correction::correction_term(&a, &b)
}

impl Integration {
    /// Forms the window predictions for one step. `with_source` asks for the
    /// source-prompt prediction as well (the correction variants need it).
    pub fn window_prediction(
        &self,
        step: &WindowStep<'_, '_>,
        x_tgt: &Tensor,
        y_mix: &PromptEmbedding,
        with_source: bool,
        ledger: &mut CallLedger,
    ) -> Result<WindowPrediction> {
        let model = step.model;
        let ts = step.ts;
        let mut latent = None;
        let eps_mix = match self {
            Integration::None => model.predict(x_tgt, ts, y_mix)?,
            Integration::Ptp(c) | Integration::Pnp(c) => {
                let kinds = c.kinds_at(ts.index, step.total_steps);
                if kinds == InjectKinds::default() {
                    model.predict(x_tgt, ts, y_mix)?
                } else {
                    let snap = capture_source_snapshot(step, ledger)?;
                    let mut scope = HookScope::injecting(snap, kinds)?;
                    model.predict_hooked(x_tgt, ts, y_mix, &mut scope)?
                }
            }
            Integration::P2p(c) => {
                if c.lambda_xa == 0.0 {
                    model.predict(x_tgt, ts, y_mix)?
                } else {
                    let snap = capture_source_snapshot(step, ledger)?;
                    let x_hat = p2p_guidance_step(model, x_tgt, ts, y_mix, &snap, c)?;
                    ledger.guidance_calls += 1;
                    let eps = model.predict(&x_hat, ts, y_mix)?;
                    latent = Some(x_hat);
                    eps
                }
            }
        };
        let eps_src_cond = if with_source {
            Some(model.predict(latent.as_ref().unwrap_or(x_tgt), ts, step.y_src)?)
        } else {
            None
        };
        Ok(WindowPrediction {
            latent,
            eps_mix,
            eps_src_cond,
        })
    }
}
