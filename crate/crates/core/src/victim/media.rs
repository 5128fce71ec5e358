//! Validated image, audio, latent and frame containers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const FPS: u32 = 25;
/// Audio samples per video frame (40 ms at 16 kHz).
pub const SAMPLES_PER_FRAME: usize = (SAMPLE_RATE / FPS) as usize;

/// RGB portrait with values in `[0, 1]`, stored channel-major as `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PortraitImage {
    pixels: Tensor,
}

impl PortraitImage {
    /// Validates a `[3, H, W]` tensor.
    pub fn new(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Input(format!("portrait must be [3, H, W], got {s:?}")));
        }
        if !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(Error::Input(format!(
                "portrait sides must be even, got {}x{}",
                s[1], s[2]
            )));
        }
        if !pixels.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Input("portrait values must be finite and within [0, 1]".into()));
        }
        Ok(Self { pixels })
    }

    /// Clamps into `[0, 1]` before validating; rejects non-finite values.
    pub fn from_clamped(pixels: Tensor) -> Result<Self> {
        if !pixels.is_finite() {
            return Err(Error::Input("portrait values must be finite".into()));
        }
        Self::new(pixels.map(|v| v.clamp(0.0, 1.0)))
    }

    /// From interleaved `H x W x 3` values in `[0, 1]`.
    pub fn from_hwc(height: usize, width: usize, hwc: &[f64]) -> Result<Self> {
        if hwc.len() != height * width * 3 {
            return Err(Error::Input(format!(
                "expected {} interleaved values for {height}x{width}, got {}",
                height * width * 3,
                hwc.len()
            )));
        }
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for (p, px) in hwc.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = px[c];
            }
        }
        Self::new(Tensor::from_parts(vec![3, height, width], data))
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::full(&[3, height, width], value))
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor {
        self.pixels
    }

    pub fn data(&self) -> &[f64] {
        self.pixels.data()
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.pixels.data()[(channel * self.height() + y) * self.width() + x]
    }

    /// Interleaved `H x W x 3` copy.
    pub fn to_hwc(&self) -> Vec<f64> {
        let plane = self.height() * self.width();
        let d = self.pixels.data();
        let mut out = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                out.push(d[c * plane + p]);
            }
        }
        out
    }

    /// Per-pixel channel mean, row-major `H x W`.
    pub fn gray(&self) -> Vec<f64> {
        let plane = self.height() * self.width();
        let d = self.pixels.data();
        (0..plane)
            .map(|p| (d[p] + d[plane + p] + d[2 * plane + p]) / 3.0)
            .collect()
    }

    pub fn max_abs_diff(&self, other: &PortraitImage) -> f64 {
        self.data()
            .iter()
            .zip(other.data())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Mono waveform at 16 kHz with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("audio clip is empty".into()));
        }
        if !samples.iter().all(|v| v.is_finite() && v.abs() <= 1.0) {
            return Err(Error::Input("audio samples must be finite and within [-1, 1]".into()));
        }
        Ok(Self { samples })
    }

    pub fn from_clamped(samples: Vec<f64>) -> Result<Self> {
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("audio samples must be finite".into()));
        }
        Self::new(samples.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
    }

    pub fn silence(len: usize) -> Result<Self> {
        Self::new(vec![0.0; len])
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    /// Number of 40 ms video frames, counting a trailing partial frame.
    pub fn frame_count(&self) -> usize {
        self.samples.len().div_ceil(SAMPLES_PER_FRAME)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Per-frame RMS over zero-padded 640-sample frames.
    pub fn frame_rms(&self) -> Vec<f64> {
        (0..self.frame_count())
            .map(|f| {
                let start = f * SAMPLES_PER_FRAME;
                let end = (start + SAMPLES_PER_FRAME).min(self.samples.len());
                let energy: f64 = self.samples[start..end].iter().map(|v| v * v).sum();
                (energy / SAMPLES_PER_FRAME as f64).sqrt()
            })
            .collect()
    }
}

/// Latent grid `[C, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    values: Tensor,
}

impl LatentGrid {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::Input(format!(
                "latent must be [C, h, w], got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Input("latent values must be finite".into()));
        }
        Ok(Self { values })
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    pub fn data(&self) -> &[f64] {
        self.values.data()
    }
}

/// Generated video frames at 25 FPS.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<PortraitImage>,
}

impl FrameSequence {
    pub fn fps(&self) -> u32 {
        FPS
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn portrait_validation() {
        assert!(PortraitImage::new(Tensor::full(&[3, 4, 4], 1.5)).is_err());
        assert!(PortraitImage::new(Tensor::full(&[1, 4, 4], 0.5)).is_err());
        assert!(PortraitImage::new(Tensor::full(&[3, 3, 4], 0.5)).is_err());
        assert!(PortraitImage::new(Tensor::full(&[3, 4, 4], f64::NAN)).is_err());
        let p = PortraitImage::from_clamped(Tensor::full(&[3, 2, 2], 1.5)).unwrap();
        assert!(p.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hwc_round_trip() {
        let hwc: Vec<f64> = (0..2 * 4 * 3).map(|i| i as f64 / 24.0).collect();
        let p = PortraitImage::from_hwc(2, 4, &hwc).unwrap();
        assert_eq!(p.to_hwc(), hwc);
        assert_eq!(p.get(1, 0, 2), hwc[2 * 3 + 1]);
    }

    #[test]
    fn audio_frames() {
        let clip = AudioClip::new(vec![0.1; 32_000]).unwrap();
        assert_eq!(clip.frame_count(), 50);
        let clip = AudioClip::new(vec![0.1; 641]).unwrap();
        assert_eq!(clip.frame_count(), 2);
        assert!(AudioClip::new(vec![]).is_err());
        assert!(AudioClip::new(vec![1.2]).is_err());
    }
}
