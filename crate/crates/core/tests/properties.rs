use lesionpaint::diffusion::{estimate_x0, forward_diffuse, gaussian, gaussian_like, one_step_forward};
use lesionpaint::inpaint::inpaint;
use lesionpaint::{
    DenoiserModel, GaussianPrior, ImageGrid, InpaintRequest, Mask, NoiseSchedule, SamplerConfig, SamplerMode,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

proptest! {
    #[test]
    fn estimate_x0_inverts_forward_diffuse(
        x in proptest::collection::vec(-1.0f64..1.0, 12),
        e in proptest::collection::vec(-4.0f64..4.0, 12),
        t in 0usize..=1000,
    ) {
        let s = NoiseSchedule::cosine(1000, 0.008).unwrap();
        let x0 = ImageGrid::new(2, 3, 2, x).unwrap();
        let eps = ImageGrid::new(2, 3, 2, e).unwrap();
        let back = estimate_x0(&forward_diffuse(&x0, t, &eps, &s).unwrap(), &eps, t, &s).unwrap();
        // Recovery divides by sqrt(alpha_bar), which amplifies rounding near t = T.
        let tol = 1e-10 / s.alpha_bar(t).sqrt();
        for (a, b) in back.data().iter().zip(x0.data()) {
            prop_assert!((a - b).abs() <= tol * b.abs().max(1.0), "{} vs {}", a, b);
        }
    }
}

#[test]
fn markov_chain_matches_closed_form() {
    let s = NoiseSchedule::cosine(1000, 0.008).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = ImageGrid::filled(100, 100, 1, 0.7);
    for t in [1, 25, 80] {
        let mut x = x0.clone();
        for k in 1..=t {
            x = one_step_forward(&x, k, &gaussian_like(&x, &mut rng), &s).unwrap();
        }
        let (mean, var) = moments(x.data());
        let ab = s.alpha_bar(t);
        let n = x.data().len() as f64;
        let (want_mean, want_var) = (ab.sqrt() * 0.7, 1.0 - ab);
        assert!((mean - want_mean).abs() <= 3.0 * (want_var / n).sqrt(), "t={t}: mean {mean} vs {want_mean}");
        assert!((var - want_var).abs() <= 3.0 * want_var * (2.0 / (n - 1.0)).sqrt(), "t={t}: var {var} vs {want_var}");
    }
}

fn unconditional(mode: SamplerMode, prior: GaussianPrior, seed: u64) -> ImageGrid {
    let s = NoiseSchedule::cosine(1000, 0.008).unwrap();
    let model = DenoiserModel::analytic(prior, s.clone());
    let (h, w) = (100, 100);
    let req = InpaintRequest {
        x0: ImageGrid::zeros(h, w, 1),
        m_repaint: Mask::ones(h, w),
        m_target: Mask::zeros(h, w),
        config: SamplerConfig {
            mode,
            stride: 10,
            repaint_reps: 1,
            refine_timestep: None,
            rng_seed: seed,
            mask_dilation: 0,
            clip_x0: false,
        },
    };
    inpaint(&req, &model, &s).unwrap()
}

#[test]
fn ddpm_oracle_sampling_recovers_prior() {
    let (mu, sigma) = (0.3, 0.5);
    let out = unconditional(SamplerMode::Ddpm, GaussianPrior::new(vec![mu], vec![sigma]).unwrap(), 1);
    let (mean, var) = moments(out.data());
    let n = out.data().len() as f64;
    let v = sigma * sigma;
    assert!((mean - mu).abs() <= 3.0 * (v / n).sqrt(), "mean {mean}");
    assert!((var - v).abs() <= 3.0 * v * (2.0 / (n - 1.0)).sqrt(), "var {var}");
}

#[test]
fn ddim_oracle_sampling_recovers_prior_mean() {
    let (mu, sigma) = (-0.2, 0.8);
    let out = unconditional(SamplerMode::Ddim, GaussianPrior::new(vec![mu], vec![sigma]).unwrap(), 2);
    let (mean, _) = moments(out.data());
    let n = out.data().len() as f64;
    assert!((mean - mu).abs() <= 3.0 * sigma / n.sqrt(), "mean {mean}");
}

fn arb_config() -> impl Strategy<Value = SamplerConfig> {
    (any::<bool>(), 1usize..=2, any::<bool>(), any::<u64>(), 0usize..=1, any::<bool>()).prop_map(
        |(ddpm, r, refine, seed, dil, clip)| SamplerConfig {
            mode: if ddpm { SamplerMode::Ddpm } else { SamplerMode::Ddim },
            stride: 5,
            repaint_reps: r,
            refine_timestep: refine.then_some(10),
            rng_seed: seed,
            mask_dilation: dil,
            clip_x0: clip,
        },
    )
}

fn small() -> (DenoiserModel, NoiseSchedule) {
    let s = NoiseSchedule::cosine(40, 0.008).unwrap();
    (DenoiserModel::analytic(GaussianPrior::standard(2), s.clone()), s)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn outside_repaint_is_bit_exact_and_runs_are_deterministic(
        cfg in arb_config(),
        bits in proptest::collection::vec(any::<bool>(), 36),
        img_seed in any::<u64>(),
    ) {
        let (model, s) = small();
        let m = Mask::from_fn(6, 6, |y, x| bits[y * 6 + x]);
        let x0 = gaussian(6, 6, 2, &mut ChaCha8Rng::seed_from_u64(img_seed)).map(|v| v.tanh());
        let req = InpaintRequest { x0: x0.clone(), m_repaint: m.clone(), m_target: m.clone(), config: cfg };
        let a = inpaint(&req, &model, &s).unwrap();
        prop_assert_eq!(&a, &inpaint(&req, &model, &s).unwrap());
        for p in m.complement().indices() {
            for (u, v) in a.pixel(p).iter().zip(x0.pixel(p)) {
                prop_assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn content_inside_repaint_never_leaks_outside(
        cfg in arb_config(),
        bits in proptest::collection::vec(any::<bool>(), 36),
        target_bits in proptest::collection::vec(any::<bool>(), 36),
    ) {
        let (model, s) = small();
        let m = Mask::from_fn(6, 6, |y, x| bits[y * 6 + x]);
        let x0 = ImageGrid::from_fn(6, 6, 2, |y, x, c| ((y + 2 * x + c) % 5) as f64 * 0.3 - 0.6);
        let mut changed = x0.clone();
        for p in m.indices() {
            for c in 0..2 {
                changed.set(p / 6, p % 6, c, 0.9);
            }
        }
        let base = InpaintRequest { x0, m_repaint: m.clone(), m_target: Mask::zeros(6, 6), config: cfg };
        let other_input = InpaintRequest { x0: changed, ..base.clone() };
        let other_target = InpaintRequest { m_target: Mask::from_fn(6, 6, |y, x| target_bits[y * 6 + x]), ..base.clone() };
        let a = inpaint(&base, &model, &s).unwrap();
        for b in [inpaint(&other_input, &model, &s).unwrap(), inpaint(&other_target, &model, &s).unwrap()] {
            for p in m.complement().indices() {
                prop_assert_eq!(a.pixel(p), b.pixel(p));
            }
        }
    }
}
