//! Closed-form toy backbones for CPU verification.

pub mod attention;
pub mod gaussian;
pub mod scenario;
pub mod suite;

pub use attention::{AttentionToyDenoiser, PatchAdapter};
pub use gaussian::{GaussianDenoiser, GaussianWorld, LeakCoupling};
pub use scenario::{image_world, toy_ablation, ToyAblation, TwoDomainScenario, VariantScore};
pub use suite::{run_invariant_suite, SuiteOptions, SuiteReport};
