//! Image, audio and lip-sync quality measures.
//!
//! Images are compared with data range 1. `snr` is not symmetric: its first
//! argument is the clean reference.

use serde::{Deserialize, Serialize};

use crate::audio_attack::{caf_loss_at, CafTargetPlan};
use crate::error::{Error, Result};
use crate::victim::dataset::Rect;
use crate::victim::{AudioClip, ClipCondition, Denoiser, FrameSequence, LatentGrid, LayerBranchUnit, PortraitImage};

/// Value reported for identical inputs.
pub const DB_CAP: f64 = 100.0;

fn same_shape(a: &PortraitImage, b: &PortraitImage) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::Shape {
            expected: a.tensor().shape().to_vec(),
            actual: b.tensor().shape().to_vec(),
        });
    }
    Ok(())
}

/// `10·log10(1 / MSE)`, capped at [`DB_CAP`].
pub fn psnr(a: &PortraitImage, b: &PortraitImage) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(DB_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(DB_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect()
}

/// Mean SSIM over every position where the 11×11 Gaussian window fits, on channel-mean gray.
pub fn ssim(a: &PortraitImage, b: &PortraitImage) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let (ga, gb) = (a.gray(), b.gray());
    let win = gaussian_window();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - SSIM_WINDOW {
        for x in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let k = win[dy * SSIM_WINDOW + dx];
                    let i = (y + dy) * w + x + dx;
                    let (u, v) = (ga[i], gb[i]);
                    ma += k * u;
                    mb += k * v;
                    saa += k * u * u;
                    sbb += k * v * v;
                    sab += k * u * v;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `10·log10(Σ clean² / Σ (noisy − clean)²)`, capped at [`DB_CAP`].
pub fn snr(clean: &AudioClip, noisy: &AudioClip) -> Result<f64> {
    if clean.len() != noisy.len() {
        return Err(Error::Shape {
            expected: vec![clean.len()],
            actual: vec![noisy.len()],
        });
    }
    let signal: f64 = clean.samples().iter().map(|x| x * x).sum();
    let noise: f64 = clean
        .samples()
        .iter()
        .zip(noisy.samples())
        .map(|(c, n)| (n - c) * (n - c))
        .sum();
    if noise == 0.0 {
        return Ok(DB_CAP);
    }
    Ok((10.0 * (signal / noise).log10()).min(DB_CAP))
}

pub fn linf(a: &PortraitImage, b: &PortraitImage) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.max_abs_diff(b))
}

fn frame_pairs<'a>(
    a: &'a FrameSequence,
    b: &'a FrameSequence,
) -> Result<impl Iterator<Item = (&'a PortraitImage, &'a PortraitImage)>> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape {
            expected: vec![a.len()],
            actual: vec![b.len()],
        });
    }
    Ok(a.frames.iter().zip(&b.frames))
}

/// Frame-wise mean PSNR.
pub fn video_psnr(a: &FrameSequence, b: &FrameSequence) -> Result<f64> {
    let vals = frame_pairs(a, b)?
        .map(|(x, y)| psnr(x, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Frame-wise mean SSIM.
pub fn video_ssim(a: &FrameSequence, b: &FrameSequence) -> Result<f64> {
    let vals = frame_pairs(a, b)?
        .map(|(x, y)| ssim(x, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Pearson correlation; 0 when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: vec![a.len()],
            actual: vec![b.len()],
        });
    }
    let n = a.len() as f64;
    if a.is_empty() {
        return Ok(0.0);
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Mean gray intensity inside `region` for each frame.
pub fn mouth_intensity(frames: &FrameSequence, region: &Rect) -> Result<Vec<f64>> {
    if region.is_empty() {
        return Err(Error::Input("mouth region is empty".into()));
    }
    frames
        .frames
        .iter()
        .map(|f| {
            if region.x1 > f.width() || region.y1 > f.height() {
                return Err(Error::Input(format!(
                    "mouth region {region:?} exceeds a {}x{} frame",
                    f.width(),
                    f.height()
                )));
            }
            let g = f.gray();
            let mut s = 0.0;
            for y in region.y0..region.y1 {
                s += g[y * f.width() + region.x0..y * f.width() + region.x1]
                    .iter()
                    .sum::<f64>();
            }
            Ok(s / region.area() as f64)
        })
        .collect()
}

/// Pearson correlation between mouth-region intensity and per-frame audio RMS.
pub fn sync_proxy(frames: &FrameSequence, audio: &AudioClip, region: &Rect) -> Result<f64> {
    if frames.len() != audio.frame_count() {
        return Err(Error::Input(format!(
            "{} frames for {} audio frames",
            frames.len(),
            audio.frame_count()
        )));
    }
    pearson(&mouth_intensity(frames, region)?, &audio.frame_rms())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub unit: LayerBranchUnit,
    pub t: usize,
    pub variance: f64,
}

/// Spatial variance of every plan unit at every grid point, averaged over frames.
pub fn attention_variance_report(
    model: &dyn Denoiser,
    image: &PortraitImage,
    audio: &AudioClip,
    plan: &CafTargetPlan,
    grid: &[(usize, LatentGrid)],
) -> Result<Vec<VarianceRow>> {
    plan.resolve(model)?;
    let cond = ClipCondition::all(model, audio)?;
    let mut rows = Vec::new();
    for unit in plan.all_units() {
        for (t, eps) in grid {
            rows.push(VarianceRow {
                unit,
                t: *t,
                variance: caf_loss_at(model, image, &cond, *t, eps, &[unit])?,
            });
        }
    }
    Ok(rows)
}
