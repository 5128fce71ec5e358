//! Analytic gradients against central finite differences on 64 coordinates.

use avshield::audio_attack::{caf_loss_at, caf_loss_grad_at};
use avshield::image_attack::{mis_loss, mis_loss_grad, nullifying_loss, nullifying_loss_grad, IntervalPlan};
use avshield::rng::{derived_stream, gaussian, stream};
use avshield::victim::{AudioClip, ClipCondition, LatentGrid, LayerBranchUnit, PortraitImage};
use rand::seq::index;

use super::{small_clip, small_model};

pub const COORDS: usize = 64;
pub const TOL: f64 = 1e-3;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / scale
}

fn pick(len: usize, seed: u64) -> Vec<usize> {
    let mut v = index::sample(&mut stream(seed), len, COORDS).into_vec();
    v.sort_unstable();
    v
}

fn nudge_pixel(image: &PortraitImage, i: usize, h: f64) -> PortraitImage {
    let mut t = image.tensor().clone();
    t.data_mut()[i] += h;
    PortraitImage::new(t).unwrap()
}

fn image_fd(image: &PortraitImage, coords: &[usize], f: impl Fn(&PortraitImage) -> f64) -> Vec<f64> {
    let h = 1e-5;
    coords
        .iter()
        .map(|&i| (f(&nudge_pixel(image, i, h)) - f(&nudge_pixel(image, i, -h))) / (2.0 * h))
        .collect()
}

/// Relative error of the nullifying-loss gradient at each of three timesteps.
pub fn nullifying_errors() -> Vec<(usize, f64)> {
    let model = small_model(6, 31);
    let clip = small_clip(16, 0.12, 1);
    let cond = ClipCondition::all(&model, &clip.audio).unwrap();
    let eps = LatentGrid::new(gaussian(&mut stream(2), &[3, 8, 8])).unwrap();
    [30, 480, 970]
        .into_iter()
        .map(|t| {
            let (_, grad) = nullifying_loss_grad(&model, &clip.reference, &cond, t, &eps).unwrap();
            let coords = pick(grad.len(), t as u64);
            let analytic: Vec<f64> = coords.iter().map(|&i| grad.data()[i]).collect();
            let numeric = image_fd(&clip.reference, &coords, |p| {
                nullifying_loss(&model, p, &cond, t, &eps).unwrap()
            });
            (t, relative_error(&analytic, &numeric))
        })
        .collect()
}

pub fn mis_error() -> f64 {
    let model = small_model(6, 32);
    let clip = small_clip(16, 0.12, 2);
    let cond = ClipCondition::all(&model, &clip.audio).unwrap();
    let plan = IntervalPlan::default();
    let rng = derived_stream(3, "mis-grad");
    let (_, grad) = mis_loss_grad(&model, &clip.reference, &cond, &plan, &mut rng.clone()).unwrap();
    let coords = pick(grad.len(), 4);
    let analytic: Vec<f64> = coords.iter().map(|&i| grad.data()[i]).collect();
    // Each evaluation replays the same draws from a fresh clone of the stream.
    let numeric = image_fd(&clip.reference, &coords, |p| {
        mis_loss(&model, p, &cond, &plan, &mut rng.clone()).unwrap()
    });
    relative_error(&analytic, &numeric)
}

pub fn caf_error() -> f64 {
    let model = small_model(6, 33);
    let clip = small_clip(16, 0.12, 3);
    let units: Vec<LayerBranchUnit> = ["mid_0_lip", "up_1_lip", "down_0_expression"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let eps = LatentGrid::new(gaussian(&mut stream(5), &[3, 8, 8])).unwrap();
    let samples = clip.audio.samples().to_vec();
    // Coordinates where the clip is audible, so the log-RMS path is well away from its floor.
    let loud: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].abs() > 0.01).collect();
    assert!(loud.len() >= COORDS);
    let loss = |s: &[f64]| {
        let a = AudioClip::new(s.to_vec()).unwrap();
        let cond = ClipCondition::all(&model, &a).unwrap();
        caf_loss_at(&model, &clip.reference, &cond, 520, &eps, &units).unwrap()
    };
    let (_, grad) = caf_loss_grad_at(&model, &clip.reference, &clip.audio, None, 520, &eps, &units).unwrap();
    let coords: Vec<usize> = pick(loud.len(), 6).into_iter().map(|k| loud[k]).collect();
    let h = 1e-6;
    let numeric: Vec<f64> = coords
        .iter()
        .map(|&i| {
            let mut up = samples.clone();
            let mut down = samples.clone();
            up[i] += h;
            down[i] -= h;
            (loss(&up) - loss(&down)) / (2.0 * h)
        })
        .collect();
    let analytic: Vec<f64> = coords.iter().map(|&i| grad[i]).collect();
    relative_error(&analytic, &numeric)
}
