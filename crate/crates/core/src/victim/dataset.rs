//! Procedural talking-face corpus.
//!
//! Each clip is a flat-shaded face (ellipse with two eyes) and a bright mouth
//! ellipse whose vertical radius is an affine function of the per-frame audio RMS.
//! The audio is a mixture of band-limited tones under a syllable-like envelope.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derived_stream, StdStream};
use crate::tensor::Tensor;

use super::media::{AudioClip, PortraitImage, SAMPLE_RATE};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub clip_seconds: f64,
    /// Mouth vertical radius at silence, as a fraction of the image size.
    pub mouth_min: f64,
    /// Extra vertical radius per unit of frame RMS, as a fraction of the image size.
    pub mouth_gain: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            clip_seconds: 1.0,
            mouth_min: 0.03,
            mouth_gain: 0.3,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image_size must be a multiple of 4 and at least 8, got {}",
                self.image_size
            )));
        }
        if !(self.clip_seconds >= 0.04) {
            return Err(Error::Config(
                "clips must last at least one video frame (0.04 s)".into(),
            ));
        }
        if !(self.mouth_min > 0.0 && self.mouth_gain >= 0.0) {
            return Err(Error::Config(
                "mouth_min must be positive and mouth_gain nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Axis-aligned pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn area(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            (self.x1 - self.x0) * (self.y1 - self.y0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Appearance of one synthetic identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFace {
    size: usize,
    background: [f64; 3],
    face: Ellipse,
    face_color: [f64; 3],
    eyes: [Ellipse; 2],
    eye_color: [f64; 3],
    mouth_cx: f64,
    mouth_cy: f64,
    mouth_rx: f64,
    mouth_color: [f64; 3],
    /// Vertical radius (pixels) at silence.
    pub mouth_min_px: f64,
    /// Vertical radius gain (pixels per unit RMS).
    pub mouth_gain_px: f64,
}

const SUPERSAMPLE: usize = 4;

impl SyntheticFace {
    fn random(rng: &mut StdStream, cfg: &DatasetConfig) -> Self {
        let s = cfg.image_size as f64;
        let mut color = |lo: f64, hi: f64| -> [f64; 3] {
            let base = rng.random_range(lo..hi);
            [0, 1, 2].map(|_| (base + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0))
        };
        let background = color(0.1, 0.3);
        let face_color = color(0.45, 0.62);
        let eye_color = color(0.05, 0.15);
        let mouth_color = color(0.85, 0.95);
        let face = Ellipse {
            cx: s * (0.5 + rng.random_range(-0.06..0.06)),
            cy: s * (0.48 + rng.random_range(-0.05..0.05)),
            rx: s * rng.random_range(0.27..0.32),
            ry: s * rng.random_range(0.34..0.4),
        };
        let eye = |side: f64| Ellipse {
            cx: face.cx + side * 0.4 * face.rx,
            cy: face.cy - 0.3 * face.ry,
            rx: 0.14 * face.rx,
            ry: 0.09 * face.ry,
        };
        Self {
            size: cfg.image_size,
            background,
            eyes: [eye(-1.0), eye(1.0)],
            eye_color,
            mouth_cx: face.cx,
            mouth_cy: face.cy + 0.42 * face.ry,
            mouth_rx: 0.45 * face.rx,
            mouth_color,
            face,
            face_color,
            mouth_min_px: cfg.mouth_min * s,
            mouth_gain_px: cfg.mouth_gain * s,
        }
    }

    /// Mouth vertical radius for a frame RMS.
    pub fn mouth_radius(&self, rms: f64) -> f64 {
        self.mouth_min_px + self.mouth_gain_px * rms
    }

    /// Anti-aliased render with the given mouth vertical radius (pixels).
    pub fn render(&self, mouth_ry: f64) -> PortraitImage {
        let n = self.size;
        let plane = n * n;
        let mouth = Ellipse {
            cx: self.mouth_cx,
            cy: self.mouth_cy,
            rx: self.mouth_rx,
            ry: mouth_ry.max(1e-3),
        };
        let mut data = vec![0.0; 3 * plane];
        let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        for y in 0..n {
            for x in 0..n {
                let mut acc = [0.0; 3];
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        let c = if mouth.contains(px, py) {
                            self.mouth_color
                        } else if self.eyes.iter().any(|e| e.contains(px, py)) {
                            self.eye_color
                        } else if self.face.contains(px, py) {
                            self.face_color
                        } else {
                            self.background
                        };
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                for k in 0..3 {
                    data[k * plane + y * n + x] = acc[k] * inv;
                }
            }
        }
        PortraitImage::new(Tensor::from_parts(vec![3, n, n], data)).expect("render stays in range")
    }

    /// Bounding box of the mouth at vertical radius `max_ry`, padded by one pixel.
    pub fn mouth_region(&self, max_ry: f64) -> Rect {
        let n = self.size as f64;
        let clamp = |v: f64| v.clamp(0.0, n) as usize;
        Rect {
            x0: clamp((self.mouth_cx - self.mouth_rx).floor() - 1.0),
            x1: clamp((self.mouth_cx + self.mouth_rx).ceil() + 1.0),
            y0: clamp((self.mouth_cy - max_ry).floor() - 1.0),
            y1: clamp((self.mouth_cy + max_ry).ceil() + 1.0),
        }
    }

    /// Target frames driven by `audio`, with their RMS and mouth radii.
    pub fn animate(&self, audio: &AudioClip) -> (Vec<PortraitImage>, Vec<f64>, Vec<f64>) {
        let rms = audio.frame_rms();
        let radii: Vec<f64> = rms.iter().map(|&r| self.mouth_radius(r)).collect();
        let frames = radii.iter().map(|&r| self.render(r)).collect();
        (frames, rms, radii)
    }
}

/// One corpus item.
#[derive(Clone, Debug)]
pub struct SyntheticClip {
    pub id: String,
    pub seed: u64,
    pub face: SyntheticFace,
    /// Closed-mouth frame used as the reference portrait.
    pub reference: PortraitImage,
    pub audio: AudioClip,
    pub targets: Vec<PortraitImage>,
    pub frame_rms: Vec<f64>,
    pub mouth_radii: Vec<f64>,
    pub mouth_region: Rect,
}

/// Syllable-envelope tone mixture, peak-normalised into `[0.6, 0.9]`.
pub fn synth_speech_like(rng: &mut StdStream, len: usize) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let n_tones = rng.random_range(2..=3);
    let tones: Vec<(f64, f64, f64)> = (0..n_tones)
        .map(|_| {
            (
                rng.random_range(120.0..2500.0),
                rng.random_range(0.3..1.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let mut envelope = vec![0.0; len];
    let mut pos = rng.random_range(0.0..0.1) * sr;
    while (pos as usize) < len {
        let dur = rng.random_range(0.08..0.25) * sr;
        let amp = rng.random_range(0.25..1.0);
        let start = pos as usize;
        let end = ((pos + dur) as usize).min(len);
        for (i, e) in envelope[start..end].iter_mut().enumerate() {
            let phase = (i as f64 / dur * PI).sin();
            *e = amp * phase * phase;
        }
        pos += dur + rng.random_range(0.03..0.2) * sr;
    }
    let mut samples: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let carrier: f64 = tones.iter().map(|(f, a, ph)| a * (2.0 * PI * f * t + ph).sin()).sum();
            envelope[i] * carrier
        })
        .collect();
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let target = rng.random_range(0.6..0.9);
        samples.iter_mut().for_each(|v| *v *= target / peak);
    }
    samples
}

/// Deterministic corpus of `n_clips` items; item `i` depends only on `(seed, i)`.
pub fn make_synthetic_dataset(n_clips: usize, seed: u64, cfg: &DatasetConfig) -> Result<Vec<SyntheticClip>> {
    if n_clips == 0 {
        return Err(Error::Config("need at least one clip".into()));
    }
    cfg.validate()?;
    (0..n_clips).map(|i| make_clip(seed, i, cfg)).collect()
}

pub fn make_clip(seed: u64, index: usize, cfg: &DatasetConfig) -> Result<SyntheticClip> {
    let label = format!("synthetic/{index}");
    let mut rng = derived_stream(seed, &label);
    let face = SyntheticFace::random(&mut rng, cfg);
    let len = (cfg.clip_seconds * SAMPLE_RATE as f64).round() as usize;
    let audio = AudioClip::new(synth_speech_like(&mut rng, len))?;
    Ok(clip_from_parts(format!("synthetic-{seed}-{index}"), seed, face, audio))
}

pub fn clip_from_parts(id: String, seed: u64, face: SyntheticFace, audio: AudioClip) -> SyntheticClip {
    let (targets, frame_rms, mouth_radii) = face.animate(&audio);
    let max_ry = mouth_radii.iter().cloned().fold(face.mouth_min_px, f64::max);
    SyntheticClip {
        id,
        seed,
        reference: face.render(face.mouth_min_px),
        mouth_region: face.mouth_region(max_ry),
        face,
        audio,
        targets,
        frame_rms,
        mouth_radii,
    }
}
