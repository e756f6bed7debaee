//! The invariant catalogue, run against the toy backbones.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::attention::{AttentionToyDenoiser, CROSS_LAYER};
use super::scenario::TwoDomainScenario;
use crate::adapters::{CountingDenoiser, Denoiser};
use crate::correction::{
    corrected_noise, correction_term, run_edit, run_variant, CallLedger, EditConfig, EditInputs,
    Variant,
};
use crate::error::{PicError, Result};
use crate::guidance::GuidedDenoiser;
use crate::hooks::{AttentionSnapshot, HookKind, HookPoint};
use crate::integrations::Integration;
use crate::prompt::{interpolate_replacement, mixing_coefficient, PromptEmbedding};
use crate::schedule::{
    forward_step, invert_source, replay_reconstruct, reverse_step, DiffusionSchedule, LatentState,
    ScheduleKind,
};
use crate::tensor::{self, Tensor};

pub const SUITE_SCHEMA_VERSION: u32 = 1;
pub const RECONSTRUCTION_STEPS: [usize; 3] = [25, 50, 100];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Random draws for the algebraic checks.
    pub draws: usize,
    /// Source samples for the averaged edit checks.
    pub seeds: usize,
    /// Swap two schedule entries to break monotonicity (negative control).
    pub corrupt_schedule: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            draws: 200,
            seeds: 100,
            corrupt_schedule: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionRow {
    pub steps: usize,
    /// RMS error of the cached-noise replay, relative to the data std.
    pub replay_error: f64,
    /// RMS error of fresh-prediction DDIM regeneration, relative to the data std.
    pub fresh_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub schema_version: u32,
    pub options: SuiteOptions,
    pub checks: Vec<CheckResult>,
    pub reconstruction: Vec<ReconstructionRow>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<34} {:>6} {:>12} {:>12}\n",
            "check", "status", "measured", "tolerance"
        );
        for c in &self.checks {
            s.push_str(&format!(
                "{:<34} {:>6} {:>12.3e} {:>12.3e}  {}\n",
                c.name,
                if c.passed { "pass" } else { "FAIL" },
                c.measured,
                c.tolerance,
                c.detail
            ));
        }
        s.push_str("\nreconstruction error / sigma\n");
        s.push_str(&format!("{:>6} {:>12} {:>12}\n", "T", "replay", "fresh"));
        for r in &self.reconstruction {
            s.push_str(&format!(
                "{:>6} {:>12.4e} {:>12.4e}\n",
                r.steps, r.replay_error, r.fresh_error
            ));
        }
        s
    }
}

struct Suite {
    checks: Vec<CheckResult>,
}

impl Suite {
    fn record(&mut self, name: &str, outcome: Result<(bool, f64, f64, String)>) {
        let c = match outcome {
            Ok((passed, measured, tolerance, detail)) => CheckResult {
                name: name.into(),
                passed,
                measured,
                tolerance,
                detail,
            },
            Err(e) => CheckResult {
                name: name.into(),
                passed: false,
                measured: f64::NAN,
                tolerance: f64::NAN,
                detail: format!("error: {e}"),
            },
        };
        self.checks.push(c);
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    tensor::from_vec(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape")
}

fn suite_schedule(steps: usize, corrupt: bool) -> Result<DiffusionSchedule> {
    let s = DiffusionSchedule::build(1000, steps, ScheduleKind::ScaledLinear)?;
    if !corrupt {
        return Ok(s);
    }
    let mut a = s.alphas().to_vec();
    let mid = a.len() / 2;
    a.swap(mid, mid + 1);
    Ok(DiffusionSchedule::from_alphas_unchecked(a))
}

/// RMS of `a - b` over the data std.
fn rel_rms(a: &Tensor, b: &Tensor, sigma: f64) -> f64 {
    let d = tensor::lincomb(1.0, a, -1.0, b).expect("same shape");
    tensor::rms(&d) / sigma
}

/// Mean relative reconstruction error over `seeds` draws:
/// `(cached-noise replay, fresh regeneration)`.
pub fn reconstruction_errors(
    scn: &TwoDomainScenario,
    steps: usize,
    seeds: usize,
    corrupt: bool,
) -> Result<(f64, f64)> {
    let sched = suite_schedule(steps, corrupt)?;
    let den = scn.denoiser();
    let model = GuidedDenoiser::unguided(&den);
    let sigma = scn.world.sigma();
    let (mut replay, mut fresh) = (0.0, 0.0);
    for seed in 0..seeds as u64 {
        let x0 = scn.sample_source(seed)?;
        let cache = invert_source(&x0, &scn.y_src, &model, &sched)?;
        let r = replay_reconstruct(&cache, &scn.y_src, &model, &sched)?;
        let f =
            crate::schedule::ddim_generate(cache.latent(steps), steps, &scn.y_src, &model, &sched)?;
        replay += rel_rms(&r, &x0, sigma);
        fresh += rel_rms(&f, &x0, sigma);
    }
    Ok((replay / seeds as f64, fresh / seeds as f64))
}

pub fn run_invariant_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    if opts.draws == 0 || opts.seeds == 0 {
        return Err(PicError::Config(
            "suite needs at least one draw and one seed".into(),
        ));
    }
    let mut suite = Suite { checks: Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let sched = suite_schedule(50, opts.corrupt_schedule)?;
    let scn = TwoDomainScenario::coupled(50)?;
    let den = scn.denoiser();
    let model = GuidedDenoiser::unguided(&den);

    suite.record("schedule_monotone", {
        let a = sched.alphas();
        let worst = a
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max);
        Ok((
            sched.validate().is_ok(),
            worst,
            0.0,
            "max alpha_bar[t+1] - alpha_bar[t]".into(),
        ))
    });

    suite.record(
        "algebraic_inverse",
        (|| {
            let mut worst: f64 = 0.0;
            for _ in 0..opts.draws {
                let t = rng.random_range(0..sched.num_steps());
                let x = randn(&mut rng, &[8]);
                let e = randn(&mut rng, &[8]);
                let up = forward_step(&LatentState::new(x.clone(), t), &e, &sched)?;
                let back = reverse_step(&up, &e, &sched)?;
                let err = tensor::l2_norm(&tensor::lincomb(1.0, &back.data, -1.0, &x)?)
                    / tensor::l2_norm(&x);
                worst = worst.max(err);
            }
            Ok((worst <= 1e-6, worst, 1e-6, "max relative error".into()))
        })(),
    );

    suite.record(
        "cache_replay",
        (|| {
            let x0 = scn.sample_source(opts.seed)?;
            let cache = invert_source(&x0, &scn.y_src, &model, &sched)?;
            cache.verify_replay_all()?;
            Ok((true, 0.0, 0.0, "bitwise".into()))
        })(),
    );

    let mut reconstruction = Vec::new();
    suite.record(
        "reconstruction_decreasing",
        (|| {
            let n = opts.seeds.min(20);
            for steps in RECONSTRUCTION_STEPS {
                let (replay_error, fresh_error) =
                    reconstruction_errors(&scn, steps, n, opts.corrupt_schedule)?;
                reconstruction.push(ReconstructionRow {
                    steps,
                    replay_error,
                    fresh_error,
                });
            }
            let dec = |f: fn(&ReconstructionRow) -> f64| {
                reconstruction.windows(2).all(|w| f(&w[1]) < f(&w[0]))
            };
            let ok = dec(|r| r.replay_error) && dec(|r| r.fresh_error);
            let last = reconstruction.last().map_or(f64::NAN, |r| r.replay_error);
            Ok((
                ok,
                last,
                0.0,
                "strictly decreasing in T; measured = replay error at T = 100".into(),
            ))
        })(),
    );

    suite.record(
        "gamma_zero_collapse",
        (|| {
            let x0 = scn.sample_source(opts.seed + 1)?;
            let counting = CountingDenoiser::new(&den);
            let cm = GuidedDenoiser::unguided(&counting);
            let cache = invert_source(&x0, &scn.y_src, &cm, &sched)?;
            let reference = replay_reconstruct(&cache, &scn.y_src, &model, &sched)?;
            counting.reset();
            let inputs = EditInputs {
                cache: &cache,
                y_src: &scn.y_src,
                y_tgt: &scn.y_tgt,
                plan: &scn.plan,
                model: &cm,
                sched: &sched,
            };
            let cfg = EditConfig {
                gamma: 0.0,
                tau: 50,
                guidance_scale: 1.0,
                ..Default::default()
            };
            let (out, ledger) = run_variant(Variant::Pic, &inputs, &cfg)?;
            // only the terminal source prediction runs
            let ok = ledger.corrected_calls == 0
                && counting.calls() == 1
                && tensor::bitwise_eq(&out, &reference);
            Ok((
                ok,
                counting.calls() as f64,
                1.0,
                "model calls during a full-window gamma = 0 edit".into(),
            ))
        })(),
    );

    suite.record(
        "variant_collapse",
        (|| {
            let x0 = scn.sample_source(opts.seed + 2)?;
            let cache = invert_source(&x0, &scn.y_src, &model, &sched)?;
            let inputs = EditInputs {
                cache: &cache,
                y_src: &scn.y_src,
                y_tgt: &scn.y_tgt,
                plan: &scn.plan,
                model: &model,
                sched: &sched,
            };
            let cfg = EditConfig {
                tau: 0,
                guidance_scale: 1.0,
                ..Default::default()
            };
            let outs: Vec<Tensor> = Variant::ALL
                .into_iter()
                .map(|v| run_variant(v, &inputs, &cfg).map(|r| r.0))
                .collect::<Result<_>>()?;
            let ok = outs.windows(2).all(|w| tensor::bitwise_eq(&w[0], &w[1]));
            Ok((ok, 0.0, 0.0, "tau = 0, bitwise".into()))
        })(),
    );

    suite.record(
        "interpolation_endpoints",
        (|| {
            let ok_beta =
                mixing_coefficient(50, 50, 0.3) == 0.3 && mixing_coefficient(0, 50, 0.3) == 1.0;
            let a = PromptEmbedding::new(
                Array2::from_shape_fn((4, 3), |_| rng.sample(StandardNormal)),
                4,
                "",
            )?;
            let b = PromptEmbedding::new(
                Array2::from_shape_fn((4, 3), |_| rng.sample(StandardNormal)),
                4,
                "",
            )?;
            let at0 = interpolate_replacement(&a, &b, 0.0)?;
            let at1 = interpolate_replacement(&a, &b, 1.0)?;
            let ok = ok_beta && at0.tokens() == a.tokens() && at1.tokens() == b.tokens();
            Ok((
                ok,
                0.0,
                0.0,
                "beta_T = beta, beta_0 = 1, endpoints bitwise".into(),
            ))
        })(),
    );

    suite.record(
        "correction_affine_in_gamma",
        (|| {
            let mut worst: f64 = 0.0;
            for _ in 0..opts.draws {
                let e = randn(&mut rng, &[6]);
                let a = randn(&mut rng, &[6]);
                let b = randn(&mut rng, &[6]);
                let d = correction_term(&a, &b)?;
                let base = corrected_noise(&e, &d, 0.5)?;
                for g in [1.0, 2.5] {
                    let lhs = tensor::lincomb(1.0, &corrected_noise(&e, &d, g)?, -1.0, &base)?;
                    let rhs = d.mapv(|v| v * (g - 0.5));
                    worst = worst.max(tensor::l2_norm(&tensor::lincomb(1.0, &lhs, -1.0, &rhs)?));
                }
            }
            Ok((
                worst <= 1e-12,
                worst,
                1e-12,
                "max |e(g) - e(0.5) - (g - 0.5) d|".into(),
            ))
        })(),
    );

    suite.record(
        "ledger_formula",
        (|| {
            let x0 = scn.sample_source(opts.seed + 3)?;
            let cache = invert_source(&x0, &scn.y_src, &model, &sched)?;
            let mut bad = 0usize;
            for tau in [0, 1, 17, 50] {
                let inputs = EditInputs {
                    cache: &cache,
                    y_src: &scn.y_src,
                    y_tgt: &scn.y_tgt,
                    plan: &scn.plan,
                    model: &model,
                    sched: &sched,
                };
                let cfg = EditConfig {
                    tau,
                    guidance_scale: 1.0,
                    ..Default::default()
                };
                let (_, l) = run_variant(Variant::Pic, &inputs, &cfg)?;
                if (l.forward_calls, l.corrected_calls, l.plain_calls)
                    != CallLedger::expected(Variant::Pic, 50, tau, 1.0)
                {
                    bad += 1;
                }
            }
            Ok((bad == 0, bad as f64, 0.0, "mismatching runs".into()))
        })(),
    );

    suite.record(
        "guidance_affine_in_scale",
        (|| {
            let null = PromptEmbedding::new(Array2::zeros((2, 2)), 2, "")?;
            let x = randn(&mut rng, &[8]);
            let ts = sched.timestep(20)?;
            let p = |w: f64| GuidedDenoiser::new(&den, &null, w)?.predict(&x, ts, &scn.y_tgt);
            let (p0, p1, p2) = (p(0.0)?, p(1.0)?, p(2.0)?);
            let lhs = tensor::lincomb(1.0, &p2, -1.0, &p1)?;
            let rhs = tensor::lincomb(1.0, &p1, -1.0, &p0)?;
            let err = tensor::l2_norm(&tensor::lincomb(1.0, &lhs, -1.0, &rhs)?);
            Ok((err <= 1e-12, err, 1e-12, "|p(2) - 2 p(1) + p(0)|".into()))
        })(),
    );

    suite.record("toy_edit_direction", (|| {
        let cfg = EditConfig {
            tau: 25,
            guidance_scale: 1.0,
            ..Default::default()
        };
        let n = opts.seeds as u64;
        let ab = super::toy_ablation(&scn, &cfg, &sched, opts.seed..opts.seed + n)?;
        let pic = ab.score(Variant::Pic);
        let ddim = ab.score(Variant::Ddim);
        let mut toward = 0.0;
        for seed in opts.seed..opts.seed + n.min(20) {
            let x0 = scn.sample_source(seed)?;
            let cache = invert_source(&x0, &scn.y_src, &model, &sched)?;
            let inputs = EditInputs {
                cache: &cache,
                y_src: &scn.y_src,
                y_tgt: &scn.y_tgt,
                plan: &scn.plan,
                model: &model,
                sched: &sched,
            };
            let (out, _) = run_variant(Variant::Pic, &inputs, &cfg)?;
            let out: Vec<f64> = out.iter().copied().collect();
            for i in scn.world.edited_coords() {
                toward += (out[i] - scn.mu_tgt[i]).abs() - (out[i] - scn.mu_src[i]).abs();
            }
        }
        let ok = toward < 0.0 && pic.bd < ddim.bd;
        Ok((
            ok,
            pic.bd,
            ddim.bd,
            format!("edited coords nearer target ({toward:.3} < 0); background PIC {:.4} < DDIM {:.4}", pic.bd, ddim.bd),
        ))
    })());

    suite.record(
        "attention_gradient",
        (|| {
            let toy = AttentionToyDenoiser::random(4, 3, 3, 2, 2, opts.seed);
            let y = PromptEmbedding::new(
                Array2::from_shape_fn((2, 2), |_| rng.sample(StandardNormal)),
                2,
                "",
            )?;
            let ts = sched.timestep(10)?;
            let mut worst: f64 = 0.0;
            for _ in 0..opts.draws.min(100) {
                let x = randn(&mut rng, &[4, 3]);
                let xr = randn(&mut rng, &[4, 3]);
                let reference = toy.cross_map(&xr, &y)?;
                let mut snap = AttentionSnapshot::empty(ts.index);
                snap.insert(
                    &HookPoint::new(HookKind::CrossAttention, CROSS_LAYER),
                    reference.clone(),
                );
                let (_, grad) = toy.cross_attention_guidance(&x, ts, &y, &snap)?;
                let fd = finite_difference(&toy, &x, &y, &reference)?;
                let err = tensor::l2_norm(&tensor::lincomb(1.0, &grad, -1.0, &fd)?)
                    / tensor::l2_norm(&fd).max(1e-12);
                worst = worst.max(err);
            }
            Ok((
                worst <= 1e-5,
                worst,
                1e-5,
                "max relative error vs central differences".into(),
            ))
        })(),
    );

    suite.record(
        "integration_reduction",
        (|| {
            let toy = AttentionToyDenoiser::random(4, 3, 3, 2, 2, opts.seed + 7);
            let tm = GuidedDenoiser::unguided(&toy);
            let y_src = PromptEmbedding::new(
                Array2::from_shape_fn((2, 2), |_| rng.sample(StandardNormal)),
                2,
                "a",
            )?;
            let y_tgt = PromptEmbedding::new(
                Array2::from_shape_fn((2, 2), |_| rng.sample(StandardNormal)),
                2,
                "b",
            )?;
            let sched10 = DiffusionSchedule::build(1000, 10, ScheduleKind::ScaledLinear)?;
            let x0 = randn(&mut rng, &[4, 3]);
            let cache = invert_source(&x0, &y_src, &tm, &sched10)?;
            let plan = crate::prompt::InterpolationPlan::replacement(0.3, 10);
            let inputs = EditInputs {
                cache: &cache,
                y_src: &y_src,
                y_tgt: &y_tgt,
                plan: &plan,
                model: &tm,
                sched: &sched10,
            };
            let cfg = EditConfig {
                tau: 5,
                num_steps: 10,
                guidance_scale: 1.0,
                ..Default::default()
            };
            let base = run_edit(&inputs, &cfg, &Integration::None)?.latent;
            let disabled = [
                Integration::Ptp(crate::integrations::InjectionConfig::disabled()),
                Integration::Pnp(crate::integrations::InjectionConfig::disabled()),
                Integration::P2p(crate::integrations::GuidanceConfig { lambda_xa: 0.0 }),
            ];
            let mut ok = true;
            for i in disabled {
                ok &= tensor::bitwise_eq(&run_edit(&inputs, &cfg, &i)?.latent, &base);
            }
            Ok((
                ok,
                0.0,
                0.0,
                "disabled integrations are bitwise the base edit".into(),
            ))
        })(),
    );

    Ok(SuiteReport {
        schema_version: SUITE_SCHEMA_VERSION,
        options: *opts,
        checks: suite.checks,
        reconstruction,
    })
}

/// Central differences of the attention loss with a step scaled to each entry.
pub fn finite_difference(
    toy: &AttentionToyDenoiser,
    x: &Tensor,
    y: &PromptEmbedding,
    reference: &Array2<f64>,
) -> Result<Tensor> {
    let mut grad = tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        let v = x.as_slice().expect("contiguous")[i];
        let h = 1e-6 * v.abs().max(1.0);
        xp.as_slice_mut().expect("contiguous")[i] = v + h;
        xm.as_slice_mut().expect("contiguous")[i] = v - h;
        let d = (toy.attention_loss(&xp, y, reference)? - toy.attention_loss(&xm, y, reference)?)
            / (2.0 * h);
        grad.as_slice_mut().expect("contiguous")[i] = d;
    }
    Ok(grad)
}
