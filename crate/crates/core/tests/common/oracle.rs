//! Closed-form and brute-force references for the core formulas.

use avshield::audio_attack::spatial_variance;
use avshield::image_attack::{draw_interval_samples, mis_loss, nullifying_loss, IntervalPlan, TimestepInterval};
use avshield::rng::{derived_stream, gaussian, stream};
use avshield::victim::schedule::noise_with_alpha_bar;
use avshield::victim::{AttentionMap, ClipCondition, DiffusionSchedule, LatentGrid};
use avshield::Tensor;
use rand::Rng;

use super::{small_clip, small_model};

/// `ᾱ_t == ᾱ_{t-1} · α_t` bit for bit over the whole default schedule.
pub fn alpha_bar_identity_exact() -> bool {
    let s = DiffusionSchedule::default();
    s.alpha_bar(0) == 1.0 && (1..=s.steps()).all(|t| s.alpha_bar(t) == s.alpha_bar(t - 1) * s.alpha(t))
}

/// Largest deviation of forward-noise sample moments from `√ᾱ·z0` and `1-ᾱ`,
/// in standard errors, over 10⁴ draws at four timesteps.
pub fn forward_noise_worst_z() -> f64 {
    let s = DiffusionSchedule::default();
    let n = 10_000;
    let z0 = [0.8, -0.3, 0.0];
    let mut worst: f64 = 0.0;
    for t in [1, 250, 500, 999] {
        let ab = s.alpha_bar(t);
        let mut rng = derived_stream(11, &format!("mc/{t}"));
        let mut sums = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let eps = gaussian(&mut rng, &[3]);
            let z = noise_with_alpha_bar(&z0, eps.data(), ab);
            for i in 0..3 {
                sums[i] += z[i];
                sq[i] += z[i] * z[i];
            }
        }
        let var = 1.0 - ab;
        for i in 0..3 {
            let mean = sums[i] / n as f64;
            let sample_var = (sq[i] - n as f64 * mean * mean) / (n - 1) as f64;
            let se_mean = (var / n as f64).sqrt();
            let se_var = var * (2.0 / (n - 1) as f64).sqrt();
            worst = worst
                .max((mean - ab.sqrt() * z0[i]).abs() / se_mean)
                .max((sample_var - var).abs() / se_var);
        }
    }
    worst
}

/// Mean over tokens of the per-column population variance of a row-major `[q, j]` map.
pub fn brute_variance(q: usize, j: usize, d: &[f64]) -> f64 {
    let mut cols = 0.0;
    for c in 0..j {
        let col: Vec<f64> = (0..q).map(|r| d[r * j + c]).collect();
        let m = col.iter().sum::<f64>() / q as f64;
        cols += col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / q as f64;
    }
    cols / j as f64
}

/// Worst relative error of `spatial_variance` against brute force on 50 random maps.
pub fn spatial_variance_worst_rel() -> f64 {
    let mut rng = stream(21);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let q = rng.random_range(1..20);
        let j = rng.random_range(1..8);
        let mut d = Vec::with_capacity(q * j);
        for _ in 0..q {
            let row: Vec<f64> = (0..j).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = row.iter().sum();
            d.extend(row.iter().map(|v| v / s));
        }
        let map = AttentionMap::new(Tensor::new(vec![q, j], d.clone()).unwrap()).unwrap();
        let want = brute_variance(q, j, &d);
        let got = spatial_variance(&map);
        worst = worst.max((got - want).abs() / want.abs().max(1e-300));
    }
    worst
}

/// A single-interval plan reproduces the nullifying loss on the same draw, bit for bit.
pub fn mis_k1_bitwise() -> bool {
    let model = small_model(4, 1);
    let clip = small_clip(16, 0.2, 2);
    let cond = ClipCondition::all(&model, &clip.audio).unwrap();
    [(1, 100), (300, 400), (900, 1000)]
        .into_iter()
        .enumerate()
        .all(|(i, iv)| {
            let plan = IntervalPlan::single(TimestepInterval::new(iv.0, iv.1));
            let rng = derived_stream(5, &format!("k1/{i}"));
            let draws = draw_interval_samples(&model, &clip.reference, &plan, &mut rng.clone()).unwrap();
            let (t, eps) = &draws[0];
            let direct = nullifying_loss(
                &model,
                &clip.reference,
                &cond,
                *t,
                &LatentGrid::new(eps.clone()).unwrap(),
            )
            .unwrap();
            let mis = mis_loss(&model, &clip.reference, &cond, &plan, &mut rng.clone()).unwrap();
            mis.to_bits() == direct.to_bits()
        })
}
