use ndarray::Array2;
use pic_core::adapters::CountingDenoiser;
use pic_core::correction::{
    corrected_noise, correction_term, run_edit, run_variant, CallLedger, EditConfig, EditInputs,
    Variant,
};
use pic_core::guidance::GuidedDenoiser;
use pic_core::integrations::Integration;
use pic_core::prompt::{interpolate, PromptEmbedding};
use pic_core::schedule::{
    invert_source, reverse_step, DiffusionSchedule, LatentState, ScheduleKind,
};
use pic_core::tensor::{self, Tensor};
use pic_core::toy::TwoDomainScenario;
use pic_core::PicError;
use proptest::prelude::*;

struct Fixture {
    scn: TwoDomainScenario,
    sched: DiffusionSchedule,
}

impl Fixture {
    fn new(steps: usize) -> Self {
        Fixture {
            scn: TwoDomainScenario::coupled(steps).unwrap(),
            sched: DiffusionSchedule::build(1000, steps, ScheduleKind::ScaledLinear).unwrap(),
        }
    }
}

fn cfg(steps: usize, tau: usize, gamma: f64) -> EditConfig {
    EditConfig {
        gamma,
        tau,
        num_steps: steps,
        guidance_scale: 1.0,
        ..Default::default()
    }
}

/// Hand-rolled reverse loop, written straight from the update rule.
fn reference_edit(f: &Fixture, x0: &Tensor, variant: Variant, tau: usize, gamma: f64) -> Tensor {
    let den = f.scn.denoiser();
    let m = GuidedDenoiser::unguided(&den);
    let steps = f.sched.num_steps();
    let cache = invert_source(x0, &f.scn.y_src, &m, &f.sched).unwrap();
    let tau = if variant == Variant::Ddim { 0 } else { tau };
    let mut x = LatentState::new(cache.latent(steps).clone(), steps);
    while x.t > 0 {
        let ts = f.sched.timestep(x.t).unwrap();
        let in_window = x.t + tau > steps;
        let eps = if in_window {
            let y_t = interpolate(
                &f.scn.y_src,
                &f.scn.y_tgt,
                &f.scn.plan,
                f.scn.plan.beta_at(x.t),
            )
            .unwrap();
            let saved = if x.t == steps {
                m.predict(cache.latent(steps), ts, &f.scn.y_src).unwrap()
            } else {
                cache.noise(x.t).clone()
            };
            let src = m.predict(&x.data, ts, &f.scn.y_src).unwrap();
            match variant {
                Variant::DdimPi => m.predict(&x.data, ts, &y_t).unwrap(),
                Variant::DdimNc => {
                    &saved + &((&m.predict(&x.data, ts, &f.scn.y_tgt).unwrap() - &src) * gamma)
                }
                Variant::Pic => &saved + &((&m.predict(&x.data, ts, &y_t).unwrap() - &src) * gamma),
                Variant::Ddim => unreachable!(),
            }
        } else {
            m.predict(&x.data, ts, &f.scn.y_tgt).unwrap()
        };
        x = reverse_step(&x, &eps, &f.sched).unwrap();
    }
    x.data
}

#[test]
fn variants_match_hand_rolled_loop() {
    let f = Fixture::new(12);
    let den = f.scn.denoiser();
    let m = GuidedDenoiser::unguided(&den);
    for seed in 0..3 {
        let x0 = f.scn.sample_source(seed).unwrap();
        let cache = invert_source(&x0, &f.scn.y_src, &m, &f.sched).unwrap();
        let inputs = EditInputs {
            cache: &cache,
            y_src: &f.scn.y_src,
            y_tgt: &f.scn.y_tgt,
            plan: &f.scn.plan,
            model: &m,
            sched: &f.sched,
        };
        for v in Variant::ALL {
            for (tau, gamma) in [(6, 1.0), (12, 2.0), (1, 0.5)] {
                let (got, _) = run_variant(v, &inputs, &cfg(12, tau, gamma)).unwrap();
                let want = reference_edit(&f, &x0, v, tau, gamma);
                let err = tensor::l2_norm(&tensor::lincomb(1.0, &got, -1.0, &want).unwrap());
                assert!(err < 1e-12, "{v} tau={tau} gamma={gamma}: {err}");
            }
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let f = Fixture::new(10);
    let den = f.scn.denoiser();
    let m = GuidedDenoiser::unguided(&den);
    let x0 = f.scn.sample_source(9).unwrap();
    let run = || {
        let cache = invert_source(&x0, &f.scn.y_src, &m, &f.sched).unwrap();
        let inputs = EditInputs {
            cache: &cache,
            y_src: &f.scn.y_src,
            y_tgt: &f.scn.y_tgt,
            plan: &f.scn.plan,
            model: &m,
            sched: &f.sched,
        };
        run_edit(&inputs, &cfg(10, 5, 1.0), &Integration::None).unwrap()
    };
    let (a, b) = (run(), run());
    assert!(tensor::bitwise_eq(&a.latent, &b.latent));
    assert_eq!(a.ledger, b.ledger);
    assert_eq!(a.trajectory.len(), 11);
    assert!(tensor::bitwise_eq(&a.trajectory[0], &a.latent));
}

#[test]
fn trajectory_starts_from_the_inverted_latent() {
    let f = Fixture::new(8);
    let den = f.scn.denoiser();
    let m = GuidedDenoiser::unguided(&den);
    let cache =
        invert_source(&f.scn.sample_source(0).unwrap(), &f.scn.y_src, &m, &f.sched).unwrap();
    let inputs = EditInputs {
        cache: &cache,
        y_src: &f.scn.y_src,
        y_tgt: &f.scn.y_tgt,
        plan: &f.scn.plan,
        model: &m,
        sched: &f.sched,
    };
    let out = run_edit(&inputs, &cfg(8, 4, 1.0), &Integration::None).unwrap();
    assert!(tensor::bitwise_eq(&out.trajectory[8], cache.latent(8)));
}

#[test]
fn mismatched_inputs_are_rejected() {
    let f = Fixture::new(8);
    let den = f.scn.denoiser();
    let m = GuidedDenoiser::unguided(&den);
    let cache =
        invert_source(&f.scn.sample_source(0).unwrap(), &f.scn.y_src, &m, &f.sched).unwrap();
    let inputs = EditInputs {
        cache: &cache,
        y_src: &f.scn.y_tgt,
        y_tgt: &f.scn.y_tgt,
        plan: &f.scn.plan,
        model: &m,
        sched: &f.sched,
    };
    assert!(run_edit(&inputs, &cfg(8, 4, 1.0), &Integration::None).is_err());

    let inputs = EditInputs {
        y_src: &f.scn.y_src,
        ..inputs
    };
    assert!(run_edit(&inputs, &cfg(10, 4, 1.0), &Integration::None).is_err());
    assert!(run_edit(&inputs, &cfg(8, 9, 1.0), &Integration::None).is_err());
    assert!(run_edit(&inputs, &cfg(8, 4, -1.0), &Integration::None).is_err());
    let guided = EditConfig {
        guidance_scale: 7.5,
        ..cfg(8, 4, 1.0)
    };
    assert!(run_edit(&inputs, &guided, &Integration::None).is_err());
}

#[test]
fn config_validation() {
    assert!(EditConfig::default().validate().is_ok());
    let d = EditConfig::default();
    assert_eq!(
        (d.gamma, d.tau, d.num_steps, d.guidance_scale),
        (1.0, 25, 50, 7.5)
    );
    assert!(EditConfig { tau: 51, ..d }.validate().is_err());
    assert!(EditConfig { gamma: -0.1, ..d }.validate().is_err());
    assert!(EditConfig {
        guidance_scale: 0.5,
        ..d
    }
    .validate()
    .is_err());
    assert!(EditConfig {
        beta: Some(1.5),
        ..d
    }
    .validate()
    .is_err());
    assert!(matches!("pix".parse::<Variant>(), Err(PicError::Config(_))));
    for v in Variant::ALL {
        assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
    }
}

#[test]
fn non_finite_prediction_names_the_step() {
    let f = Fixture::new(6);
    let den = f.scn.denoiser();
    let m = GuidedDenoiser::unguided(&den);
    let cache =
        invert_source(&f.scn.sample_source(0).unwrap(), &f.scn.y_src, &m, &f.sched).unwrap();
    let bad = PromptEmbedding::new(Array2::from_elem((2, 2), 1e308), 2, "huge").unwrap();
    let inputs = EditInputs {
        cache: &cache,
        y_src: &f.scn.y_src,
        y_tgt: &bad,
        plan: &f.scn.plan,
        model: &m,
        sched: &f.sched,
    };
    match run_edit(&inputs, &cfg(6, 3, 1.0), &Integration::None) {
        Err(PicError::Numerical { step, .. }) => assert_eq!(step, 6),
        other => panic!("expected a numerical error, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ledger_matches_counted_calls(steps in 1usize..16, frac in 0.0f64..=1.0, vi in 0usize..4, gamma in prop_oneof![Just(0.0), 0.1f64..3.0]) {
        let f = Fixture::new(steps);
        let den = f.scn.denoiser();
        let counting = CountingDenoiser::new(&den);
        let m = GuidedDenoiser::unguided(&counting);
        let cache = invert_source(&f.scn.sample_source(1).unwrap(), &f.scn.y_src, &m, &f.sched).unwrap();
        counting.reset();
        let tau = (frac * steps as f64).round() as usize;
        let v = Variant::ALL[vi];
        let inputs = EditInputs { cache: &cache, y_src: &f.scn.y_src, y_tgt: &f.scn.y_tgt, plan: &f.scn.plan, model: &m, sched: &f.sched };
        let (_, l) = run_variant(v, &inputs, &cfg(steps, tau, gamma)).unwrap();
        prop_assert_eq!((l.forward_calls, l.corrected_calls, l.plain_calls), CallLedger::expected(v, steps, tau, gamma));
        prop_assert_eq!(counting.calls(), l.model_calls() - l.forward_calls);
    }

    #[test]
    fn corrected_noise_is_affine(
        e in prop::collection::vec(-3.0f64..3.0, 5),
        a in prop::collection::vec(-3.0f64..3.0, 5),
        b in prop::collection::vec(-3.0f64..3.0, 5),
        g1 in 0.0f64..3.0,
        g2 in 0.0f64..3.0,
    ) {
        let t = |v: Vec<f64>| tensor::from_vec(&[5], v).unwrap();
        let (e, a, b) = (t(e), t(a), t(b));
        let d = correction_term(&a, &b).unwrap();
        prop_assert!(correction_term(&a, &a).unwrap().iter().all(|v| *v == 0.0));
        let lhs = &corrected_noise(&e, &d, g1).unwrap() - &corrected_noise(&e, &d, g2).unwrap();
        let rhs = &d * (g1 - g2);
        prop_assert!(tensor::l2_norm(&(&lhs - &rhs)) < 1e-12);
        prop_assert!(tensor::bitwise_eq(&corrected_noise(&e, &d, 0.0).unwrap(), &e));
    }
}
