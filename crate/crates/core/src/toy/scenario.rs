//! Ready-made toy worlds.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gaussian::{GaussianDenoiser, GaussianWorld, LeakCoupling};
use crate::correction::{run_variant, CallLedger, EditConfig, EditInputs, Variant};
use crate::error::Result;
use crate::guidance::GuidedDenoiser;
use crate::prompt::{InterpolationPlan, PromptEmbedding, DEFAULT_BETA_REPLACEMENT};
use crate::schedule::{invert_source, DiffusionSchedule};
use crate::tensor::Tensor;

/// Source and target domains differing in one token.
///
/// Two tokens of width two; token 0 is shared, token 1 is the edited word
/// (`[1, 0]` for the source, `[0, 1]` for the target). The first four latent
/// coordinates carry the object: their mean is `shift * y[1][1]`. The last
/// four are background with mean `0.5` under every prompt.
#[derive(Debug, Clone)]
pub struct TwoDomainScenario {
    pub world: GaussianWorld,
    pub y_src: PromptEmbedding,
    pub y_tgt: PromptEmbedding,
    pub plan: InterpolationPlan,
    pub mu_src: Array1<f64>,
    pub mu_tgt: Array1<f64>,
}

pub const SCENARIO_EDITED: usize = 4;
pub const SCENARIO_SHARED: usize = 4;
pub const SCENARIO_SHIFT: f64 = 2.0;
pub const SCENARIO_SIGMA: f64 = 1.0;
/// Background/object coupling under the target prompt (zero under the source).
pub const SCENARIO_COUPLING: f64 = 0.8;

impl TwoDomainScenario {
    /// Background statistics independent of the prompt.
    pub fn isotropic(steps: usize) -> Result<Self> {
        Self::build(steps, None)
    }

    /// The target prompt also changes how background co-varies with the
    /// object, so naive regeneration disturbs the background.
    pub fn coupled(steps: usize) -> Result<Self> {
        Self::build(steps, Some(SCENARIO_COUPLING))
    }

    fn build(steps: usize, coupling: Option<f64>) -> Result<Self> {
        let d = SCENARIO_EDITED + SCENARIO_SHARED;
        let (l, k) = (2, 2);
        let mut w = Array2::zeros((d, l * k));
        let mut bias = Array1::zeros(d);
        for i in 0..SCENARIO_EDITED {
            w[[i, 3]] = SCENARIO_SHIFT;
        }
        for i in SCENARIO_EDITED..d {
            bias[i] = 0.5;
        }
        let edited = (0..d).map(|i| i < SCENARIO_EDITED).collect();
        let mut world = GaussianWorld::new(vec![d], l, k, bias, w, SCENARIO_SIGMA, edited)?;
        if let Some(c) = coupling {
            let mut weights = Array1::zeros(l * k);
            weights[3] = c;
            let pairs = (0..SCENARIO_EDITED)
                .map(|i| (i, SCENARIO_EDITED + i))
                .collect();
            world = world.with_leak(LeakCoupling { pairs, weights })?;
        }
        let y_src = PromptEmbedding::new(ndarray::array![[0.0, 0.0], [1.0, 0.0]], 2, "a cat")?;
        let y_tgt = PromptEmbedding::new(ndarray::array![[0.0, 0.0], [0.0, 1.0]], 2, "a dog")?;
        let mu_src = world.mean(&y_src)?;
        let mu_tgt = world.mean(&y_tgt)?;
        let plan = InterpolationPlan::replacement(DEFAULT_BETA_REPLACEMENT, steps)
            .with_texts("a cat", "a dog");
        Ok(TwoDomainScenario {
            world,
            y_src,
            y_tgt,
            plan,
            mu_src,
            mu_tgt,
        })
    }

    pub fn denoiser(&self) -> GaussianDenoiser {
        GaussianDenoiser::new(self.world.clone())
    }

    pub fn sample_source(&self, seed: u64) -> Result<Tensor> {
        self.world
            .sample(&self.y_src, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// `(background distance, target alignment)`: Euclidean distance to the
    /// source on shared coordinates, and minus the distance to the target
    /// mean on edited coordinates.
    pub fn surrogate_scores(&self, out: &Tensor, x0: &Tensor) -> (f64, f64) {
        let out: Vec<f64> = out.iter().copied().collect();
        let x0: Vec<f64> = x0.iter().copied().collect();
        let bd = self
            .world
            .shared_coords()
            .iter()
            .map(|&i| (out[i] - x0[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        let cs = -self
            .world
            .edited_coords()
            .iter()
            .map(|&i| (out[i] - self.mu_tgt[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        (bd, cs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub bd: f64,
    pub cs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyAblation {
    pub seeds: usize,
    pub scores: BTreeMap<String, VariantScore>,
    /// Ledgers of the first seed, per variant.
    pub ledgers: BTreeMap<String, CallLedger>,
    /// Inversion passes actually run per seed (one cache shared by all
    /// variants).
    pub inversions_per_seed: usize,
}

impl ToyAblation {
    pub fn score(&self, v: Variant) -> VariantScore {
        self.scores[v.as_str()]
    }

    /// `PIC <= DDIM_NC <= DDIM_PI <= DDIM` on background distance.
    pub fn ordering_holds(&self) -> bool {
        let bd = |v| self.score(v).bd;
        bd(Variant::Pic) <= bd(Variant::DdimNc)
            && bd(Variant::DdimNc) <= bd(Variant::DdimPi)
            && bd(Variant::DdimPi) <= bd(Variant::Ddim)
    }

    /// Relative gap between PIC's alignment and the best variant's.
    pub fn alignment_gap(&self) -> f64 {
        let best = self
            .scores
            .values()
            .map(|s| s.cs)
            .fold(f64::NEG_INFINITY, f64::max);
        let pic = self.score(Variant::Pic).cs;
        (best - pic).abs() / best.abs().max(f64::MIN_POSITIVE)
    }
}

/// Runs the four variants on `seeds` source draws sharing one inversion per
/// draw, and averages the surrogate scores.
pub fn toy_ablation(
    scenario: &TwoDomainScenario,
    config: &EditConfig,
    sched: &DiffusionSchedule,
    seeds: std::ops::Range<u64>,
) -> Result<ToyAblation> {
    let den = scenario.denoiser();
    let model = GuidedDenoiser::unguided(&den);
    let n = seeds.end.saturating_sub(seeds.start) as usize;
    let per_seed: Vec<Vec<(Variant, f64, f64, CallLedger)>> = seeds
        .into_par_iter()
        .map(|seed| -> Result<_> {
            let x0 = scenario.sample_source(seed)?;
            let cache = invert_source(&x0, &scenario.y_src, &model, sched)?;
            let inputs = EditInputs {
                cache: &cache,
                y_src: &scenario.y_src,
                y_tgt: &scenario.y_tgt,
                plan: &scenario.plan,
                model: &model,
                sched,
            };
            Variant::ALL
                .into_iter()
                .map(|v| {
                    let (out, ledger) = run_variant(v, &inputs, config)?;
                    let (bd, cs) = scenario.surrogate_scores(&out, &x0);
                    Ok((v, bd, cs, ledger))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut scores = BTreeMap::new();
    let mut ledgers = BTreeMap::new();
    for v in Variant::ALL {
        let rows: Vec<_> = per_seed
            .iter()
            .map(|r| r.iter().find(|x| x.0 == v).expect("all variants"))
            .collect();
        let bd = rows.iter().map(|r| r.1).sum::<f64>() / n.max(1) as f64;
        let cs = rows.iter().map(|r| r.2).sum::<f64>() / n.max(1) as f64;
        scores.insert(v.as_str().to_string(), VariantScore { bd, cs });
        if let Some(first) = rows.first() {
            ledgers.insert(v.as_str().to_string(), first.3);
        }
    }
    Ok(ToyAblation {
        seeds: n,
        scores,
        ledgers,
        inversions_per_seed: 1,
    })
}

/// A world over `[3, H, W]` pixel latents for toy runs on real images. The
/// central box is the "object": its colour follows the prompt. Everything
/// else is background with a prompt-independent mean.
pub fn image_world(
    height: usize,
    width: usize,
    context_len: usize,
    embed_dim: usize,
    seed: u64,
) -> Result<GaussianWorld> {
    let d = 3 * height * width;
    let ld = context_len * embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gains: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            (0..ld)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * 1.5 / (context_len as f64).sqrt()
                })
                .collect()
        })
        .collect();
    let in_box = |y: usize, x: usize| {
        (height / 4..height - height / 4).contains(&y)
            && (width / 4..width - width / 4).contains(&x)
    };
    let mut w = Array2::zeros((d, ld));
    let mut edited = vec![false; d];
    for (c, gain) in gains.iter().enumerate() {
        for y in 0..height {
            for x in 0..width {
                if in_box(y, x) {
                    let i = (c * height + y) * width + x;
                    edited[i] = true;
                    for (j, g) in gain.iter().enumerate() {
                        w[[i, j]] = *g;
                    }
                }
            }
        }
    }
    GaussianWorld::new(
        vec![3, height, width],
        context_len,
        embed_dim,
        Array1::zeros(d),
        w,
        0.5,
        edited,
    )
}
