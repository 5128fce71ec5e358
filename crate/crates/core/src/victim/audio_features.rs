//! Differentiable per-frame audio descriptors: log-RMS plus triangular mel-band energies.
//!
//! Each 640-sample frame (40 ms) yields one row `[ln(rms + 1e-6), E_1, .., E_B]`.
//! Band energies are Hann-windowed DFT powers weighted by triangular filters and
//! normalised so a full-scale sinusoid at a filter centre has energy 1.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::media::{AudioClip, SAMPLES_PER_FRAME, SAMPLE_RATE};

pub const DEFAULT_BANDS: usize = 8;
pub const RMS_FLOOR: f64 = 1e-6;
const MIN_FREQ_HZ: f64 = 50.0;

/// `F x D` feature matrix, one row per video frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureSequence {
    values: Tensor,
}

impl AudioFeatureSequence {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 || values.shape()[0] == 0 {
            return Err(Error::Input(format!(
                "features must be [F, D], got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn row(&self, f: usize) -> &[f64] {
        let d = self.dim();
        &self.values.data()[f * d..(f + 1) * d]
    }

    /// Rows `f - radius ..= f + radius` with indices clamped to the clip: the audio tokens of frame `f`.
    pub fn window(&self, f: usize, radius: usize) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity((2 * radius + 1) * d);
        for idx in window_indices(f, radius, self.frames()) {
            data.extend_from_slice(self.row(idx));
        }
        Tensor::from_parts(vec![2 * radius + 1, d], data)
    }
}

/// Source rows of the clamped window around frame `f`.
pub fn window_indices(f: usize, radius: usize, frames: usize) -> impl Iterator<Item = usize> {
    (0..=2 * radius).map(move |j| (f + j).saturating_sub(radius).min(frames - 1))
}

/// Adds the gradient of a window (`[2r+1, D]`) back into the full `[F, D]` gradient.
pub fn scatter_window_grad(full: &mut Tensor, window_grad: &Tensor, f: usize, radius: usize) {
    let (frames, d) = (full.shape()[0], full.shape()[1]);
    for (j, idx) in window_indices(f, radius, frames).enumerate() {
        let src = &window_grad.data()[j * d..(j + 1) * d];
        for (dst, s) in full.data_mut()[idx * d..(idx + 1) * d].iter_mut().zip(src) {
            *dst += s;
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Frame-level feature extractor with cached FFT plans and filter weights.
#[derive(Clone)]
pub struct AudioFeatureExtractor {
    bands: usize,
    window: Vec<f64>,
    /// Per band: `(bin, weight)` pairs with nonzero weight.
    filters: Vec<Vec<(usize, f64)>>,
    power_norm: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for AudioFeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AudioFeatureExtractor")
            .field("bands", &self.bands)
            .finish()
    }
}

impl AudioFeatureExtractor {
    pub fn new(bands: usize) -> Result<Self> {
        if bands == 0 {
            return Err(Error::Config("need at least one filter band".into()));
        }
        let n = SAMPLES_PER_FRAME;
        // periodic Hann
        let window: Vec<f64> = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let window_sum: f64 = window.iter().sum();
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        let (mlo, mhi) = (hz_to_mel(MIN_FREQ_HZ), hz_to_mel(nyquist));
        let edges: Vec<f64> = (0..bands + 2)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (bands + 1) as f64))
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / n as f64;
        let filters = (0..bands)
            .map(|b| {
                let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
                (0..=n / 2)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > lo && f <= mid {
                            (f - lo) / (mid - lo)
                        } else if f > mid && f < hi {
                            (hi - f) / (hi - mid)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect()
            })
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            bands,
            window,
            filters,
            power_norm: (2.0 / window_sum).powi(2),
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn dim(&self) -> usize {
        1 + self.bands
    }

    /// Triangular filter weight of `band` at DFT bin `bin`.
    pub fn filter_weight(&self, band: usize, bin: usize) -> f64 {
        self.filters[band]
            .iter()
            .find(|(k, _)| *k == bin)
            .map_or(0.0, |(_, w)| *w)
    }

    pub fn power_norm(&self) -> f64 {
        self.power_norm
    }

    pub fn hann(&self) -> &[f64] {
        &self.window
    }

    fn frame(samples: &[f64], f: usize) -> Vec<f64> {
        let start = f * SAMPLES_PER_FRAME;
        let mut frame = vec![0.0; SAMPLES_PER_FRAME];
        if start < samples.len() {
            let end = (start + SAMPLES_PER_FRAME).min(samples.len());
            frame[..end - start].copy_from_slice(&samples[start..end]);
        }
        frame
    }

    fn spectrum(&self, frame: &[f64]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .zip(&self.window)
            .map(|(x, w)| Complex::new(x * w, 0.0))
            .collect();
        self.forward.process(&mut buf);
        buf
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<AudioFeatureSequence> {
        self.extract_samples(clip.samples())
    }

    pub fn extract_samples(&self, samples: &[f64]) -> Result<AudioFeatureSequence> {
        if samples.is_empty() {
            return Err(Error::Input("cannot extract features from an empty clip".into()));
        }
        let frames = samples.len().div_ceil(SAMPLES_PER_FRAME);
        let d = self.dim();
        let mut out = vec![0.0; frames * d];
        for f in 0..frames {
            let frame = Self::frame(samples, f);
            let row = &mut out[f * d..(f + 1) * d];
            let rms = (frame.iter().map(|v| v * v).sum::<f64>() / SAMPLES_PER_FRAME as f64).sqrt();
            row[0] = (rms + RMS_FLOOR).ln();
            let spec = self.spectrum(&frame);
            for (b, filt) in self.filters.iter().enumerate() {
                row[1 + b] = self.power_norm * filt.iter().map(|&(k, w)| w * spec[k].norm_sqr()).sum::<f64>();
            }
        }
        AudioFeatureSequence::new(Tensor::from_parts(vec![frames, d], out))
    }

    /// Gradient with respect to the samples, given the gradient with respect to the features.
    pub fn backward(&self, samples: &[f64], grad: &Tensor) -> Result<Vec<f64>> {
        let frames = samples.len().div_ceil(SAMPLES_PER_FRAME);
        grad.ensure_shape(&[frames, self.dim()])?;
        let d = self.dim();
        let n = SAMPLES_PER_FRAME;
        let mut out = vec![0.0; samples.len()];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for f in 0..frames {
            let g = &grad.data()[f * d..(f + 1) * d];
            let frame = Self::frame(samples, f);
            let mut frame_grad = vec![0.0; n];

            let rms = (frame.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
            if rms > 0.0 && g[0] != 0.0 {
                let s = g[0] / ((rms + RMS_FLOOR) * rms * n as f64);
                frame_grad.iter_mut().zip(&frame).for_each(|(o, x)| *o += s * x);
            }

            if g[1..].iter().any(|&v| v != 0.0) {
                let spec = self.spectrum(&frame);
                buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
                for (b, filt) in self.filters.iter().enumerate() {
                    let gb = g[1 + b] * self.power_norm;
                    for &(k, w) in filt {
                        buf[k] += spec[k] * (2.0 * gb * w);
                    }
                }
                // d|X_k|^2/dx_n = 2 Re(X_k e^{+i 2 pi k n / N}): an unnormalised inverse DFT.
                self.inverse.process(&mut buf);
                for ((o, c), w) in frame_grad.iter_mut().zip(&buf).zip(&self.window) {
                    *o += c.re * w;
                }
            }

            let start = f * n;
            let end = (start + n).min(samples.len());
            for (o, gv) in out[start..end].iter_mut().zip(&frame_grad) {
                *o += gv;
            }
        }
        Ok(out)
    }
}

/// Features with the default 8-band extractor.
pub fn audio_features(clip: &AudioClip) -> Result<AudioFeatureSequence> {
    AudioFeatureExtractor::new(DEFAULT_BANDS)?.extract(clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, amp: f64, len: usize) -> AudioClip {
        AudioClip::new(
            (0..len)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn silent_clip_rows() {
        let feats = audio_features(&AudioClip::silence(1600).unwrap()).unwrap();
        assert_eq!(feats.frames(), 3);
        for f in 0..3 {
            assert_eq!(feats.row(f)[0], RMS_FLOOR.ln());
            assert!(feats.row(f)[1..].iter().all(|&e| e == 0.0));
        }
    }

    #[test]
    fn two_seconds_gives_fifty_rows() {
        let feats = audio_features(&tone(300.0, 0.5, 32_000)).unwrap();
        assert_eq!(feats.frames(), 50);
        assert_eq!(feats.dim(), 9);
    }

    #[test]
    fn empty_clip_rejected() {
        let ex = AudioFeatureExtractor::new(8).unwrap();
        assert!(ex.extract_samples(&[]).is_err());
    }

    #[test]
    fn window_clamps_at_edges() {
        let t = Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap();
        let feats = AudioFeatureSequence::new(t).unwrap();
        assert_eq!(feats.window(0, 2).data(), &[0.0, 0.0, 0.0, 1.0, 2.0]);
        assert_eq!(feats.window(2, 1).data(), &[1.0, 2.0, 2.0]);
        let mut full = Tensor::zeros(&[3, 1]);
        scatter_window_grad(&mut full, &Tensor::full(&[5, 1], 1.0), 0, 2);
        assert_eq!(full.data(), &[3.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let clip = tone(700.0, 0.3, 1000);
        let ex = AudioFeatureExtractor::new(4).unwrap();
        let feats = ex.extract(&clip).unwrap();
        let weights: Vec<f64> = (0..feats.tensor().len())
            .map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3)
            .collect();
        let objective = |s: &[f64]| -> f64 {
            let f = ex.extract_samples(s).unwrap();
            f.tensor().data().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let grad = ex
            .backward(
                clip.samples(),
                &Tensor::new(feats.tensor().shape().to_vec(), weights.clone()).unwrap(),
            )
            .unwrap();
        let h = 1e-6;
        for idx in (0..1000).step_by(37) {
            let mut up = clip.samples().to_vec();
            let mut dn = clip.samples().to_vec();
            up[idx] += h;
            dn[idx] -= h;
            let fd = (objective(&up) - objective(&dn)) / (2.0 * h);
            assert!(
                (fd - grad[idx]).abs() <= 1e-5 * (1.0 + fd.abs()),
                "idx {idx}: {fd} vs {}",
                grad[idx]
            );
        }
    }
}
