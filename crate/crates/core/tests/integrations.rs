use ndarray::Array2;
use pic_core::adapters::{CountingDenoiser, Denoiser};
use pic_core::correction::{run_edit, CallLedger, EditConfig, EditInputs};
use pic_core::guidance::GuidedDenoiser;
use pic_core::hooks::{AttentionSnapshot, HookEvent, HookKind, HookPoint, HookScope, InjectKinds};
use pic_core::integrations::{
    capture_source_snapshot, p2p_correction, p2p_guidance_step, ptp_corrected_predict,
    GuidanceConfig, InjectionConfig, Integration, WindowStep,
};
use pic_core::prompt::{InterpolationPlan, PromptEmbedding};
use pic_core::schedule::{invert_source, DiffusionSchedule, ScheduleKind};
use pic_core::tensor::{self, Tensor};
use pic_core::toy::attention::{CROSS_LAYER, FEATURE_LAYER, SELF_LAYER};
use pic_core::toy::{AttentionToyDenoiser, TwoDomainScenario};
use pic_core::PicError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    tensor::from_vec(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn prompt(rng: &mut ChaCha8Rng, text: &str) -> PromptEmbedding {
    PromptEmbedding::new(
        Array2::from_shape_fn((3, 2), |_| rng.sample(StandardNormal)),
        3,
        text,
    )
    .unwrap()
}

struct World {
    toy: AttentionToyDenoiser,
    y_src: PromptEmbedding,
    y_tgt: PromptEmbedding,
    sched: DiffusionSchedule,
    x0: Tensor,
}

fn world(steps: usize) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    World {
        toy: AttentionToyDenoiser::random(5, 4, 3, 3, 2, 21),
        y_src: prompt(&mut rng, "src"),
        y_tgt: prompt(&mut rng, "tgt"),
        sched: DiffusionSchedule::build(1000, steps, ScheduleKind::ScaledLinear).unwrap(),
        x0: randn(&mut rng, &[5, 4]),
    }
}

fn edit(
    w: &World,
    model: &GuidedDenoiser<'_>,
    tau: usize,
    integration: Integration,
) -> pic_core::correction::EditOutcome {
    let steps = w.sched.num_steps();
    let cache = invert_source(&w.x0, &w.y_src, model, &w.sched).unwrap();
    let plan = InterpolationPlan::replacement(0.3, steps);
    let inputs = EditInputs {
        cache: &cache,
        y_src: &w.y_src,
        y_tgt: &w.y_tgt,
        plan: &plan,
        model,
        sched: &w.sched,
    };
    let cfg = EditConfig {
        tau,
        num_steps: steps,
        guidance_scale: model.scale(),
        ..Default::default()
    };
    run_edit(&inputs, &cfg, &integration).unwrap()
}

#[test]
fn window_fractions_gate_each_kind() {
    let c = InjectionConfig::prompt_to_prompt();
    // first 80% of 50 steps: t = 50 ..= 11
    assert!(c.kinds_at(50, 50).cross && c.kinds_at(11, 50).cross && !c.kinds_at(10, 50).cross);
    assert!(c.kinds_at(31, 50).self_attn && !c.kinds_at(30, 50).self_attn);
    assert!(!c.kinds_at(50, 50).features);
    let p = InjectionConfig::plug_and_play();
    assert!(p.kinds_at(26, 50).self_attn && !p.kinds_at(25, 50).self_attn);
    assert!(p.kinds_at(11, 50).features && !p.kinds_at(10, 50).features);
    assert_eq!(
        InjectionConfig::disabled().kinds_at(50, 50),
        InjectKinds::default()
    );
    assert!(InjectionConfig {
        cross_window: 1.5,
        ..c
    }
    .validate()
    .is_err());
}

#[test]
fn snapshot_calls_follow_the_windows() {
    let w = world(10);
    let m = GuidedDenoiser::unguided(&w.toy);
    // cross window 0.8 covers t = 10..=3; the correction window (tau = 5) t = 10..=6
    let out = edit(
        &w,
        &m,
        5,
        Integration::Ptp(InjectionConfig::prompt_to_prompt()),
    );
    assert_eq!(out.ledger.snapshot_calls, 5);
    let out = edit(
        &w,
        &m,
        10,
        Integration::Ptp(InjectionConfig::prompt_to_prompt()),
    );
    assert_eq!(out.ledger.snapshot_calls, 8);
    let out = edit(
        &w,
        &m,
        10,
        Integration::Pnp(InjectionConfig::plug_and_play()),
    );
    assert_eq!(out.ledger.snapshot_calls, 8);
    let out = edit(&w, &m, 10, Integration::P2p(GuidanceConfig::default()));
    assert_eq!(
        (out.ledger.snapshot_calls, out.ledger.guidance_calls),
        (10, 10)
    );
}

#[test]
fn counted_calls_include_snapshots() {
    let w = world(8);
    let counting = CountingDenoiser::new(&w.toy);
    let null = PromptEmbedding::new(Array2::zeros((3, 2)), 3, "").unwrap();
    let m = GuidedDenoiser::new(&counting, &null, 3.0).unwrap();
    let cache = invert_source(&w.x0, &w.y_src, &m, &w.sched).unwrap();
    counting.reset();
    let plan = InterpolationPlan::replacement(0.3, 8);
    let inputs = EditInputs {
        cache: &cache,
        y_src: &w.y_src,
        y_tgt: &w.y_tgt,
        plan: &plan,
        model: &m,
        sched: &w.sched,
    };
    let cfg = EditConfig {
        tau: 4,
        num_steps: 8,
        guidance_scale: 3.0,
        ..Default::default()
    };
    let out = run_edit(
        &inputs,
        &cfg,
        &Integration::Ptp(InjectionConfig::prompt_to_prompt()),
    )
    .unwrap();
    let l: CallLedger = out.ledger;
    assert_eq!(l.calls_per_prediction, 2);
    assert_eq!(counting.calls(), l.model_calls() - 2 * l.forward_calls);
    assert_eq!(l.snapshot_calls, 4);
}

#[test]
fn injected_maps_are_the_captured_source_maps() {
    let w = world(10);
    let m = GuidedDenoiser::unguided(&w.toy);
    let ts = w.sched.timestep(7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x_src = randn(&mut rng, &[5, 4]);
    let x_tgt = randn(&mut rng, &[5, 4]);
    let step = WindowStep {
        model: &m,
        ts,
        total_steps: 10,
        x_src: &x_src,
        y_src: &w.y_src,
    };
    let mut ledger = CallLedger::default();
    let snap = capture_source_snapshot(&step, &mut ledger).unwrap();
    assert_eq!(ledger.snapshot_calls, 1);
    let cross = HookPoint::new(HookKind::CrossAttention, CROSS_LAYER);
    let selfp = HookPoint::new(HookKind::SelfAttention, SELF_LAYER);
    let feat = HookPoint::new(HookKind::Feature, FEATURE_LAYER);
    // the captured cross map is the toy's own map for the source pass
    assert_eq!(
        snap.get(&cross).unwrap(),
        &w.toy.cross_map(&x_src, &w.y_src).unwrap()
    );

    let kinds = InjectKinds {
        cross: true,
        self_attn: true,
        features: false,
    };
    let mut scope = HookScope::injecting(snap.clone(), kinds).unwrap();
    let injected = w
        .toy
        .predict_hooked(&x_tgt, ts, &w.y_tgt, &mut scope)
        .unwrap();
    let trace = scope.take_trace();
    let injected_points: Vec<&HookPoint> = trace
        .iter()
        .filter_map(|e| match e {
            HookEvent::Injected { point, value } => {
                assert_eq!(Some(value), snap.get(point));
                Some(point)
            }
            _ => None,
        })
        .collect();
    assert_eq!(injected_points, vec![&cross, &selfp]);
    assert!(!injected_points.contains(&&feat));

    let (eps_mix, eps_src) =
        ptp_corrected_predict(&m, &x_tgt, ts, &w.y_tgt, &w.y_src, &snap).unwrap();
    assert!(tensor::bitwise_eq(&eps_mix, &injected));
    assert!(tensor::bitwise_eq(
        &eps_src,
        &w.toy.predict(&x_tgt, ts, &w.y_src).unwrap()
    ));

    // snapshot from another step is refused
    let other = w.sched.timestep(6).unwrap();
    assert!(ptp_corrected_predict(&m, &x_tgt, other, &w.y_tgt, &w.y_src, &snap).is_err());
}

#[test]
fn p2p_step_is_plain_gradient_descent() {
    let w = world(10);
    let m = GuidedDenoiser::unguided(&w.toy);
    let ts = w.sched.timestep(9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = randn(&mut rng, &[5, 4]);
    let mut snap = AttentionSnapshot::empty(9);
    let cross = HookPoint::new(HookKind::CrossAttention, CROSS_LAYER);
    snap.insert(
        &cross,
        w.toy
            .cross_map(&randn(&mut rng, &[5, 4]), &w.y_src)
            .unwrap(),
    );
    let cfg = GuidanceConfig { lambda_xa: 0.25 };
    let (_, grad) = w
        .toy
        .cross_attention_guidance(&x, ts, &w.y_tgt, &snap)
        .unwrap();
    let stepped = p2p_guidance_step(&m, &x, ts, &w.y_tgt, &snap, &cfg).unwrap();
    assert!(tensor::bitwise_eq(
        &stepped,
        &tensor::lincomb(1.0, &x, -0.25, &grad).unwrap()
    ));
    let zero = GuidanceConfig { lambda_xa: 0.0 };
    assert!(tensor::bitwise_eq(
        &p2p_guidance_step(&m, &x, ts, &w.y_tgt, &snap, &zero).unwrap(),
        &x
    ));
    // a descent step lowers the attention loss
    let before = w
        .toy
        .attention_loss(&x, &w.y_tgt, snap.get(&cross).unwrap())
        .unwrap();
    let small = GuidanceConfig { lambda_xa: 1e-3 };
    let x2 = p2p_guidance_step(&m, &x, ts, &w.y_tgt, &snap, &small).unwrap();
    assert!(
        w.toy
            .attention_loss(&x2, &w.y_tgt, snap.get(&cross).unwrap())
            .unwrap()
            < before
    );

    let d = p2p_correction(&m, &x, ts, &w.y_src, &w.y_src).unwrap();
    assert!(d.iter().all(|v| *v == 0.0));
}

#[test]
fn disabled_integrations_reduce_to_the_base_edit() {
    let w = world(10);
    let m = GuidedDenoiser::unguided(&w.toy);
    let base = edit(&w, &m, 6, Integration::None);
    for i in [
        Integration::Ptp(InjectionConfig::disabled()),
        Integration::Pnp(InjectionConfig::disabled()),
        Integration::P2p(GuidanceConfig { lambda_xa: 0.0 }),
    ] {
        let out = edit(&w, &m, 6, i);
        assert!(tensor::bitwise_eq(&out.latent, &base.latent), "{i:?}");
        assert_eq!(out.ledger.snapshot_calls, 0);
    }
    let active = edit(
        &w,
        &m,
        6,
        Integration::Ptp(InjectionConfig::prompt_to_prompt()),
    );
    assert!(!tensor::bitwise_eq(&active.latent, &base.latent));
}

#[test]
fn hookless_backbone_refuses_injection() {
    let scn = TwoDomainScenario::coupled(6).unwrap();
    let den = scn.denoiser();
    let m = GuidedDenoiser::unguided(&den);
    let sched = DiffusionSchedule::build(1000, 6, ScheduleKind::ScaledLinear).unwrap();
    let cache = invert_source(&scn.sample_source(0).unwrap(), &scn.y_src, &m, &sched).unwrap();
    let inputs = EditInputs {
        cache: &cache,
        y_src: &scn.y_src,
        y_tgt: &scn.y_tgt,
        plan: &scn.plan,
        model: &m,
        sched: &sched,
    };
    let cfg = EditConfig {
        tau: 3,
        num_steps: 6,
        guidance_scale: 1.0,
        ..Default::default()
    };
    let err = run_edit(
        &inputs,
        &cfg,
        &Integration::Ptp(InjectionConfig::prompt_to_prompt()),
    )
    .unwrap_err();
    assert!(matches!(err, PicError::Unsupported(_)));
    let err = run_edit(&inputs, &cfg, &Integration::P2p(GuidanceConfig::default())).unwrap_err();
    assert!(matches!(err, PicError::Unsupported(_)));
}

#[test]
fn integration_keys() {
    for key in ["none", "ptp", "pnp", "p2p"] {
        assert_eq!(Integration::from_key(key).unwrap().key(), key);
    }
    assert!(Integration::from_key("sdedit").is_err());
    assert!(GuidanceConfig { lambda_xa: -1.0 }.validate().is_err());
}

proptest! {
    #[test]
    fn injection_windows_are_prefixes(frac in 0.0f64..=1.0, total in 1usize..100) {
        let c = InjectionConfig { cross_window: frac, self_window: frac, feature_window: frac };
        let on: Vec<bool> = (1..=total).rev().map(|t| c.kinds_at(t, total).cross).collect();
        // once off while stepping down from T, stays off
        let first_off = on.iter().position(|b| !b).unwrap_or(on.len());
        prop_assert!(on[first_off..].iter().all(|b| !b));
        let expected = (frac * total as f64).ceil() as usize;
        prop_assert_eq!(first_off, expected.min(total));
    }
}
