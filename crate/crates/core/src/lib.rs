//! Text-driven image editing by DDIM inversion with prompt interpolation and
//! noise correction.
//!
//! The source image is inverted once with the source prompt, storing every
//! source noise prediction. The target is regenerated from the inverted
//! latent; for the first `tau` steps the noise is the cached source noise plus
//! `gamma` times the difference between predictions under an interpolated
//! prompt and under the source prompt, after which ordinary DDIM with the
//! target prompt takes over.
//!
//! ```no_run
//! use pic_core::prelude::*;
//!
//! # fn main() -> pic_core::Result<()> {
//! let scn = TwoDomainScenario::coupled(50)?;
//! let sched = DiffusionSchedule::build(1000, 50, ScheduleKind::ScaledLinear)?;
//! let den = scn.denoiser();
//! let model = GuidedDenoiser::unguided(&den);
//! let x0 = scn.sample_source(0)?;
//! let cache = invert_source(&x0, &scn.y_src, &model, &sched)?;
//! let inputs = EditInputs {
//!     cache: &cache,
//!     y_src: &scn.y_src,
//!     y_tgt: &scn.y_tgt,
//!     plan: &scn.plan,
//!     model: &model,
//!     sched: &sched,
//! };
//! let config = EditConfig { guidance_scale: 1.0, ..Default::default() };
//! let (edited, ledger) = pic_reverse(&inputs, &config)?;
//! # let _ = (edited, ledger);
//! # Ok(())
//! # }
//! ```

pub mod adapters;
pub mod cache;
pub mod correction;
pub mod error;
pub mod evaluation;
pub mod guidance;
pub mod hooks;
pub mod integrations;
pub mod pipeline;
pub mod prompt;
pub mod schedule;
pub mod tensor;
pub mod toy;

pub use error::{ErrorClass, PicError, Result};

pub mod prelude {
    pub use crate::adapters::{Concurrency, CountingDenoiser, Denoiser, TaskSpec, TextEncoder};
    pub use crate::cache::{CacheStore, TrajectoryCache};
    pub use crate::correction::{
        corrected_noise, correction_term, pic_reverse, run_edit, run_variant, CallLedger,
        EditConfig, EditInputs, EditOutcome, Variant,
    };
    pub use crate::guidance::GuidedDenoiser;
    pub use crate::integrations::Integration;
    pub use crate::prompt::{
        interpolate, mixing_coefficient, EditKind, InterpolationPlan, PromptEmbedding,
    };
    pub use crate::schedule::{
        ddim_generate, forward_step, invert_source, replay_reconstruct, reverse_step,
        DiffusionSchedule, LatentState, ScheduleKind, Timestep,
    };
    pub use crate::tensor::Tensor;
    pub use crate::toy::{GaussianDenoiser, GaussianWorld, TwoDomainScenario};
}
