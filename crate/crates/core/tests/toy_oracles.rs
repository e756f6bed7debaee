use ndarray::{Array1, Array2};
use pic_core::adapters::Denoiser;
use pic_core::prompt::PromptEmbedding;
use pic_core::schedule::{DiffusionSchedule, ScheduleKind};
use pic_core::tensor::{self, Tensor};
use pic_core::toy::{GaussianWorld, LeakCoupling, TwoDomainScenario};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Dense Gauss-Jordan inverse with partial pivoting.
fn inverse(m: &Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let p = (col..n)
            .max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))
            .unwrap();
        for k in 0..n {
            a.swap([col, k], [p, k]);
            inv.swap([col, k], [p, k]);
        }
        let d = a[[col, col]];
        for k in 0..n {
            a[[col, k]] /= d;
            inv[[col, k]] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = a[[r, col]];
                for k in 0..n {
                    a[[r, k]] -= f * a[[col, k]];
                    inv[[r, k]] -= f * inv[[col, k]];
                }
            }
        }
    }
    inv
}

/// Tweedie: E[x0 | x_t] = mu + sqrt(a) Sigma C^-1 (x - sqrt(a) mu), then
/// eps = (x - sqrt(a) E[x0 | x_t]) / sqrt(1 - a).
fn posterior_eps(
    world: &GaussianWorld,
    x: &Array1<f64>,
    a: f64,
    y: &PromptEmbedding,
) -> Array1<f64> {
    let mu = world.mean(y).unwrap();
    let sigma = world.covariance(y).unwrap();
    let c = &sigma * a + &(Array2::<f64>::eye(mu.len()) * (1.0 - a));
    let r = x - &(&mu * a.sqrt());
    let x0 = &mu + &(sigma.dot(&inverse(&c).dot(&r)) * a.sqrt());
    (x - &(x0 * a.sqrt())) / (1.0 - a).sqrt()
}

fn flat(t: &Tensor) -> Array1<f64> {
    t.iter().copied().collect()
}

#[test]
fn closed_form_matches_posterior_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for scn in [
        TwoDomainScenario::isotropic(50).unwrap(),
        TwoDomainScenario::coupled(50).unwrap(),
    ] {
        for y in [&scn.y_src, &scn.y_tgt] {
            for a in [0.999, 0.9, 0.5, 0.1, 0.005] {
                let x: Array1<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
                let got = flat(&scn.world.analytic_eps(&x.clone().into_dyn(), a, y).unwrap());
                let want = posterior_eps(&scn.world, &x, a, y);
                for (g, w) in got.iter().zip(&want) {
                    assert!(
                        (g - w).abs() <= 1e-10 * (1.0 + w.abs()),
                        "a={a}: {g} vs {w}"
                    );
                }
            }
        }
    }
}

#[test]
fn clean_endpoint_has_zero_noise() {
    let scn = TwoDomainScenario::coupled(50).unwrap();
    let x = tensor::from_vec(&[8], vec![1.5; 8]).unwrap();
    assert!(scn
        .world
        .analytic_eps(&x, 1.0, &scn.y_src)
        .unwrap()
        .iter()
        .all(|v| *v == 0.0));
    assert!(scn.world.analytic_eps(&x, 0.0, &scn.y_src).is_err());
}

#[test]
fn sampler_covariance_matches_declared() {
    let scn = TwoDomainScenario::coupled(50).unwrap();
    let y = &scn.y_tgt;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 200_000;
    let mu = scn.world.mean(y).unwrap();
    let mut cov = Array2::<f64>::zeros((8, 8));
    for _ in 0..n {
        let d = flat(&scn.world.sample(y, &mut rng).unwrap()) - &mu;
        for i in 0..8 {
            for j in 0..8 {
                cov[[i, j]] += d[i] * d[j];
            }
        }
    }
    cov /= n as f64;
    let want = scn.world.covariance(y).unwrap();
    for (g, w) in cov.iter().zip(want.iter()) {
        // each product has variance below 6, so this is about 8 standard errors
        assert!((g - w).abs() < 0.045, "{g} vs {w}");
    }
}

/// Monte-Carlo: for x_t = sqrt(a) x0 + sqrt(1 - a) eps, the residual
/// eps - eps_hat(x_t) has mean zero, and its mean square equals the
/// posterior variance trace(I - (1 - a) C^-1).
#[test]
fn monte_carlo_residual_oracle() {
    let scn = TwoDomainScenario::coupled(50).unwrap();
    let y = &scn.y_tgt;
    let a = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 1_000_000usize;
    let sigma = scn.world.covariance(y).unwrap();
    let c = &sigma * a + &(Array2::<f64>::eye(8) * (1.0 - a));
    let cinv = inverse(&c);
    let expected_mse: f64 = (0..8).map(|i| 1.0 - (1.0 - a) * cinv[[i, i]]).sum();
    let mut sum = Array1::<f64>::zeros(8);
    let mut sum_sq = Array1::<f64>::zeros(8);
    let mut mse = 0.0;
    let mut mse_sq = 0.0;
    let den = scn.denoiser();
    let ts = pic_core::schedule::Timestep {
        index: 1,
        alpha_bar: a,
        train_step: 1,
    };
    for _ in 0..n {
        let x0 = scn.world.sample(y, &mut rng).unwrap();
        let eps: Array1<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let xt = &x0 * a.sqrt() + &(eps.clone().into_dyn() * (1.0 - a).sqrt());
        let r = eps - flat(&den.predict(&xt, ts, y).unwrap());
        let e2 = r.dot(&r);
        sum += &r;
        sum_sq += &(&r * &r);
        mse += e2;
        mse_sq += e2 * e2;
    }
    let nf = n as f64;
    for i in 0..8 {
        let m = sum[i] / nf;
        let se = ((sum_sq[i] / nf - m * m) / nf).sqrt();
        assert!(
            m.abs() <= 3.0 * se,
            "coord {i}: mean residual {m} vs 3 SE {}",
            3.0 * se
        );
    }
    let m = mse / nf;
    let se = ((mse_sq / nf - m * m) / nf).sqrt();
    assert!(
        (m - expected_mse).abs() <= 3.0 * se,
        "mse {m} vs {expected_mse} (3 SE {})",
        3.0 * se
    );
}

#[test]
fn edited_coords_only_depend_on_prompt() {
    let w = Array2::from_shape_fn((4, 2), |(i, j)| if i < 2 { (i + j) as f64 } else { 0.0 });
    let world = GaussianWorld::new(
        vec![4],
        1,
        2,
        Array1::zeros(4),
        w,
        1.0,
        vec![true, true, false, false],
    )
    .unwrap();
    assert_eq!(world.edited_coords(), vec![0, 1]);
    assert_eq!(world.shared_coords(), vec![2, 3]);
    let bad = Array2::from_elem((4, 2), 1.0);
    assert!(GaussianWorld::new(
        vec![4],
        1,
        2,
        Array1::zeros(4),
        bad,
        1.0,
        vec![true, true, false, false]
    )
    .is_err());
    let leak = LeakCoupling {
        pairs: vec![(0, 2)],
        weights: Array1::from_vec(vec![0.5, 0.0]),
    };
    assert!(world.with_leak(leak).is_ok());
}

#[test]
fn denoiser_follows_the_schedule_coefficients() {
    let scn = TwoDomainScenario::coupled(50).unwrap();
    let den = scn.denoiser();
    let s = DiffusionSchedule::build(1000, 50, ScheduleKind::ScaledLinear).unwrap();
    let x = tensor::from_vec(&[8], (0..8).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
    for t in [1, 25, 50] {
        let ts = s.timestep(t).unwrap();
        let direct = scn
            .world
            .analytic_eps(&x, ts.alpha_bar, &scn.y_tgt)
            .unwrap();
        assert!(tensor::bitwise_eq(
            &den.predict(&x, ts, &scn.y_tgt).unwrap(),
            &direct
        ));
    }
}
