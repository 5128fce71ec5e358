use avshield::audio_attack::{db_x, pgd_audio_step, project_db, spatial_variance, AudioPerturbationState};
use avshield::harness::report::round6;
use avshield::image_attack::{pgd_image_step, ImageAttackConfig, PerturbationState, TimestepInterval};
use avshield::metrics::{pearson, psnr, ssim};
use avshield::rng::stream;
use avshield::victim::{AttentionMap, AudioClip, PortraitImage};
use avshield::Tensor;
use proptest::collection::vec;
use proptest::prelude::*;
use rand::Rng;

fn image(side: usize) -> impl Strategy<Value = PortraitImage> {
    vec(0.0..=1.0f64, 3 * side * side)
        .prop_map(move |d| PortraitImage::new(Tensor::new(vec![3, side, side], d).unwrap()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn image_pgd_stays_in_budget_and_range(
        anchor in image(4),
        grads in vec(vec(-1.0..1.0f64, 48), 1..12),
        tau in 0.0..0.2f64,
        eta in 0.001..0.1f64,
    ) {
        let cfg = ImageAttackConfig { tau, eta_p: eta, ..ImageAttackConfig::default() };
        let mut state = PerturbationState::new(anchor.clone());
        for g in grads {
            pgd_image_step(&mut state, &Tensor::new(vec![3, 4, 4], g).unwrap(), &cfg).unwrap();
            prop_assert!(state.linf() <= tau + 1e-12);
            prop_assert!(state.current.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(state.current.max_abs_diff(&anchor), state.linf());
        }
    }

    #[test]
    fn audio_pgd_stays_in_budget_and_range(
        anchor in vec(-1.0..1.0f64, 64..200),
        seed in any::<u64>(),
        steps in 1usize..10,
        bound in -60.0..-5.0f64,
    ) {
        prop_assume!(anchor.iter().any(|v| v.abs() > 1e-3));
        let clip = AudioClip::new(anchor.clone()).unwrap();
        let mut state = AudioPerturbationState::new(clip);
        let mut rng = stream(seed);
        for _ in 0..steps {
            let g: Vec<f64> = (0..anchor.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            pgd_audio_step(&mut state, &g, 0.05, bound).unwrap();
            let delta = state.delta();
            prop_assert!(db_x(&delta, &anchor).unwrap() <= bound + 1e-6);
            prop_assert!(state.current.samples().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn db_projection_is_idempotent(
        delta in vec(-2.0..2.0f64, 1..64),
        peak in 0.01..1.0f64,
        bound in -60.0..0.0f64,
    ) {
        let mut x = vec![0.0; delta.len()];
        x[0] = peak;
        let once = project_db(&delta, &x, bound).unwrap();
        let twice = project_db(&once, &x, bound).unwrap();
        prop_assert_eq!(&once, &twice);
        if once.iter().any(|v| *v != 0.0) {
            prop_assert!(db_x(&once, &x).unwrap() <= bound + 1e-9);
        }
    }

    #[test]
    fn pearson_affine_invariance(
        a in vec(-10.0..10.0f64, 3..40),
        noise_seed in any::<u64>(),
        scale in 0.1..10.0f64,
        shift in -5.0..5.0f64,
    ) {
        let mut rng = stream(noise_seed);
        let b: Vec<f64> = a.iter().map(|v| v + rng.random_range(-3.0..3.0)).collect();
        let r = pearson(&a, &b).unwrap();
        prop_assume!(r != 0.0);
        let pos: Vec<f64> = b.iter().map(|v| scale * v + shift).collect();
        let neg: Vec<f64> = b.iter().map(|v| -scale * v + shift).collect();
        prop_assert!((pearson(&a, &pos).unwrap() - r).abs() < 1e-9);
        prop_assert!((pearson(&a, &neg).unwrap() + r).abs() < 1e-9);
        prop_assert!(r.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn psnr_and_ssim_are_symmetric(a in image(12), b in image(12)) {
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spatial_variance_is_bounded(rows in vec(vec(0.001..1.0f64, 5), 1..30)) {
        let q = rows.len();
        let data: Vec<f64> = rows
            .iter()
            .flat_map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(move |v| v / s)
            })
            .collect();
        let v = spatial_variance(&AttentionMap::new(Tensor::new(vec![q, 5], data).unwrap()).unwrap());
        // Entries lie in [0, 1], so each column's variance is at most 1/4.
        prop_assert!((0.0..=0.25).contains(&v));
    }

    #[test]
    fn interval_samples_stay_inside(lo in 1usize..1000, width in 0usize..200, seed in any::<u64>()) {
        let iv = TimestepInterval::new(lo, (lo + width).min(1000)).clamped(1000).unwrap();
        let mut rng = stream(seed);
        for _ in 0..20 {
            prop_assert!(iv.contains(iv.sample(&mut rng)));
        }
    }

    #[test]
    fn report_rounding_is_idempotent(x in any::<f64>()) {
        prop_assume!(x.is_finite());
        let r = round6(x);
        prop_assert_eq!(round6(r), r);
        if x != 0.0 {
            prop_assert!(((r - x) / x).abs() <= 5e-6);
        }
    }
}
