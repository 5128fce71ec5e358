//! Input purification applied to protected media before generation.

pub mod stft;

use image::codecs::jpeg::JpegEncoder;
use image::imageops::{self, FilterType};
use image::{ImageBuffer, ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::victim::{AudioClip, PortraitImage};

pub use stft::{Spectrogram, Stft, StftParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JpegParams {
    pub quality: u8,
}

impl Default for JpegParams {
    fn default() -> Self {
        Self { quality: 75 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResizeParams {
    pub factor: f64,
}

impl Default for ResizeParams {
    fn default() -> Self {
        Self { factor: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateParams {
    #[serde(flatten)]
    pub stft: StftParams,
    /// Per-bin noise floor percentile over frames, in `[0, 100]`.
    pub percentile: f64,
    /// Gain applied below the floor, in `[0, 1]`.
    pub attenuation: f64,
}

impl Default for GateParams {
    fn default() -> Self {
        Self {
            stft: StftParams::default(),
            percentile: 20.0,
            attenuation: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubtractParams {
    #[serde(flatten)]
    pub stft: StftParams,
    pub over_factor: f64,
    /// Spectral floor `β` as a fraction of the noise estimate.
    pub floor: f64,
    /// Fraction of lowest-energy frames used for the noise estimate.
    pub noise_fraction: f64,
}

impl Default for SubtractParams {
    fn default() -> Self {
        Self {
            stft: StftParams::default(),
            over_factor: 1.0,
            floor: 0.02,
            noise_fraction: 0.1,
        }
    }
}

/// One purifier and its parameters, e.g. `{"kind": "jpeg", "quality": 75}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PurifierSpec {
    Jpeg(JpegParams),
    Resize(ResizeParams),
    SpectralGate(GateParams),
    SpectralSubtract(SubtractParams),
}

impl PurifierSpec {
    pub fn name(&self) -> &'static str {
        match self {
            PurifierSpec::Jpeg(_) => "jpeg",
            PurifierSpec::Resize(_) => "resize",
            PurifierSpec::SpectralGate(_) => "spectral_gate",
            PurifierSpec::SpectralSubtract(_) => "spectral_subtract",
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, PurifierSpec::Jpeg(_) | PurifierSpec::Resize(_))
    }

    /// Default parameters for all four purifiers.
    pub fn defaults() -> Vec<PurifierSpec> {
        vec![
            PurifierSpec::Jpeg(JpegParams::default()),
            PurifierSpec::Resize(ResizeParams::default()),
            PurifierSpec::SpectralGate(GateParams::default()),
            PurifierSpec::SpectralSubtract(SubtractParams::default()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            PurifierSpec::Jpeg(p) if !(1..=100).contains(&p.quality) => {
                bad(format!("jpeg quality must be in 1..=100, got {}", p.quality))
            }
            PurifierSpec::Resize(p) if !(p.factor > 0.0 && p.factor < 1.0) => {
                bad(format!("resize factor must be in (0, 1), got {}", p.factor))
            }
            PurifierSpec::SpectralGate(p) => {
                p.stft.validate()?;
                if !(0.0..=100.0).contains(&p.percentile) || !(0.0..=1.0).contains(&p.attenuation) {
                    return bad("gate percentile must be in [0, 100] and attenuation in [0, 1]".into());
                }
                Ok(())
            }
            PurifierSpec::SpectralSubtract(p) => {
                p.stft.validate()?;
                if !(p.over_factor >= 0.0 && p.floor >= 0.0 && p.noise_fraction > 0.0 && p.noise_fraction <= 1.0) {
                    return bad("subtraction needs over_factor >= 0, floor >= 0, noise_fraction in (0, 1]".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn apply_image(&self, image: &PortraitImage) -> Result<PortraitImage> {
        self.validate()?;
        match *self {
            PurifierSpec::Jpeg(p) => jpeg_purify(image, p.quality),
            PurifierSpec::Resize(p) => resize_purify(image, p.factor),
            _ => Err(Error::Config(format!("{} is an audio purifier", self.name()))),
        }
    }

    pub fn apply_audio(&self, audio: &AudioClip) -> Result<AudioClip> {
        self.validate()?;
        match *self {
            PurifierSpec::SpectralGate(p) => spectral_gate(audio, &p),
            PurifierSpec::SpectralSubtract(p) => spectral_subtract(audio, &p),
            _ => Err(Error::Config(format!("{} is an image purifier", self.name()))),
        }
    }
}

fn to_rgb8(image: &PortraitImage) -> RgbImage {
    let hwc: Vec<u8> = image.to_hwc().iter().map(|v| (v * 255.0).round() as u8).collect();
    RgbImage::from_raw(image.width() as u32, image.height() as u32, hwc).expect("buffer matches dimensions")
}

/// Baseline JPEG encode at `quality` followed by decode.
pub fn jpeg_purify(image: &PortraitImage, quality: u8) -> Result<PortraitImage> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Config(format!("jpeg quality must be in 1..=100, got {quality}")));
    }
    let rgb = to_rgb8(image);
    let mut bytes = Vec::new();
    JpegEncoder::new_with_quality(&mut bytes, quality)
        .encode_image(&rgb)
        .map_err(|e| Error::Purification(format!("jpeg encode: {e}")))?;
    let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Jpeg)
        .map_err(|e| Error::Purification(format!("jpeg decode: {e}")))?
        .to_rgb8();
    let hwc: Vec<f64> = decoded.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    PortraitImage::from_hwc(image.height(), image.width(), &hwc)
}

/// Linear-filter downscale by `factor` and upscale back to the original size.
pub fn resize_purify(image: &PortraitImage, factor: f64) -> Result<PortraitImage> {
    if !(factor > 0.0 && factor < 1.0) {
        return Err(Error::Config(format!("resize factor must be in (0, 1), got {factor}")));
    }
    let (h, w) = (image.height() as u32, image.width() as u32);
    let (sh, sw) = ((h as f64 * factor).round() as u32, (w as f64 * factor).round() as u32);
    if sh < 1 || sw < 1 {
        return Err(Error::Purification(format!(
            "resizing {w}x{h} by {factor} leaves no pixels"
        )));
    }
    let hwc: Vec<f32> = image.to_hwc().iter().map(|&v| v as f32).collect();
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_raw(w, h, hwc).expect("buffer matches dimensions");
    let small = imageops::resize(&buf, sw, sh, FilterType::Triangle);
    let back = imageops::resize(&small, w, h, FilterType::Triangle);
    let out: Vec<f64> = back.as_raw().iter().map(|&v| (v as f64).clamp(0.0, 1.0)).collect();
    PortraitImage::from_hwc(image.height(), image.width(), &out)
}

/// Linear-interpolated percentile of `values` (`p` in `[0, 100]`).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return 0.0;
    }
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn finish(samples: Vec<f64>) -> Result<AudioClip> {
    AudioClip::new(samples.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
}

/// Attenuates bins whose magnitude falls below the per-bin percentile floor.
pub fn spectral_gate(audio: &AudioClip, params: &GateParams) -> Result<AudioClip> {
    let stft = Stft::new(params.stft)?;
    let mut spec = stft.analyze(audio.samples())?;
    for k in 0..spec.bins() {
        let mags: Vec<f64> = spec.frames.iter().map(|f| f[k].norm()).collect();
        let floor = percentile(&mags, params.percentile);
        for (frame, m) in spec.frames.iter_mut().zip(&mags) {
            if *m < floor {
                frame[k] *= params.attenuation;
            }
        }
    }
    finish(stft.synthesize(&spec))
}

/// Magnitude subtraction of a noise spectrum estimated from the quietest frames.
pub fn spectral_subtract(audio: &AudioClip, params: &SubtractParams) -> Result<AudioClip> {
    let stft = Stft::new(params.stft)?;
    let mut spec = stft.analyze(audio.samples())?;
    let mut order: Vec<(f64, usize)> = spec
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| (f.iter().map(|c| c.norm_sqr()).sum(), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let take = ((order.len() as f64 * params.noise_fraction).ceil() as usize).clamp(1, order.len());
    let bins = spec.bins();
    let mut noise = vec![0.0; bins];
    for &(_, i) in &order[..take] {
        for (n, c) in noise.iter_mut().zip(&spec.frames[i]) {
            *n += c.norm() / take as f64;
        }
    }
    for frame in spec.frames.iter_mut() {
        for (c, &n) in frame.iter_mut().zip(&noise) {
            let mag = c.norm();
            let target = (mag - params.over_factor * n).max(params.floor * n);
            *c = if mag > 0.0 {
                *c * (target / mag)
            } else {
                rustfft::num_complex::Complex64::new(target, 0.0)
            };
        }
    }
    finish(stft.synthesize(&spec))
}
