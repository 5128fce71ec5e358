//! Short-time Fourier transform with periodic-Hann analysis and weighted overlap-add synthesis.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftParams {
    pub window: usize,
    pub hop: usize,
}

impl Default for StftParams {
    fn default() -> Self {
        Self { window: 512, hop: 128 }
    }
}

impl StftParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 4 || self.hop == 0 || self.hop > self.window / 2 {
            return Err(Error::Config(format!(
                "stft needs window >= 4 and 0 < hop <= window/2, got {} / {}",
                self.window, self.hop
            )));
        }
        Ok(())
    }
}

/// Complex spectrogram `[frames][bins]` with `window/2 + 1` bins per frame.
#[derive(Clone, Debug)]
pub struct Spectrogram {
    pub frames: Vec<Vec<Complex64>>,
    len: usize,
}

impl Spectrogram {
    pub fn bins(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    /// Length of the analysed signal.
    pub fn signal_len(&self) -> usize {
        self.len
    }
}

pub struct Stft {
    params: StftParams,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(params: StftParams) -> Result<Self> {
        params.validate()?;
        let n = params.window;
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            params,
            window,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        })
    }

    pub fn params(&self) -> StftParams {
        self.params
    }

    /// Padding on each side so every sample is covered by the same number of frames.
    fn pad(&self) -> usize {
        self.params.window - self.params.hop
    }

    fn frame_count(&self, len: usize) -> usize {
        let padded = len + 2 * self.pad();
        (padded - self.params.window) / self.params.hop + 1
    }

    pub fn analyze(&self, x: &[f64]) -> Result<Spectrogram> {
        let n = self.params.window;
        if x.len() < n {
            return Err(Error::Purification(format!(
                "signal of {} samples is shorter than one {n}-sample window",
                x.len()
            )));
        }
        let pad = self.pad();
        let frames = (0..self.frame_count(x.len()))
            .map(|f| {
                let start = f * self.params.hop;
                let mut buf: Vec<Complex64> = (0..n)
                    .map(|i| {
                        let idx = (start + i) as isize - pad as isize;
                        let v = if idx >= 0 && (idx as usize) < x.len() {
                            x[idx as usize]
                        } else {
                            0.0
                        };
                        Complex64::new(v * self.window[i], 0.0)
                    })
                    .collect();
                self.forward.process(&mut buf);
                buf.truncate(n / 2 + 1);
                buf
            })
            .collect();
        Ok(Spectrogram { frames, len: x.len() })
    }

    /// Weighted overlap-add inverse; exact for unmodified spectrograms up to rounding.
    pub fn synthesize(&self, spec: &Spectrogram) -> Vec<f64> {
        let n = self.params.window;
        let pad = self.pad();
        let total = spec.len + 2 * pad;
        let mut out = vec![0.0; total];
        let mut norm = vec![0.0; total];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for (f, frame) in spec.frames.iter().enumerate() {
            buf[..=n / 2].copy_from_slice(frame);
            for k in 1..n.div_ceil(2) {
                buf[n - k] = frame[k].conj();
            }
            // DC and Nyquist bins of a real signal are real.
            buf[0].im = 0.0;
            if n.is_multiple_of(2) {
                buf[n / 2].im = 0.0;
            }
            self.inverse.process(&mut buf);
            let start = f * self.params.hop;
            for i in 0..n {
                if start + i < total {
                    out[start + i] += buf[i].re / n as f64 * self.window[i];
                    norm[start + i] += self.window[i] * self.window[i];
                }
            }
        }
        out[pad..pad + spec.len]
            .iter()
            .zip(&norm[pad..pad + spec.len])
            .map(|(v, w)| if *w > 1e-12 { v / w } else { 0.0 })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unmodified_round_trip() {
        let stft = Stft::new(StftParams::default()).unwrap();
        let x: Vec<f64> = (0..3001).map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5).collect();
        let y = stft.synthesize(&stft.analyze(&x).unwrap());
        let rms = (x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
        assert!(rms < 1e-12, "rms {rms}");
    }

    #[test]
    fn short_signal_rejected() {
        let stft = Stft::new(StftParams::default()).unwrap();
        assert!(stft.analyze(&[0.0; 100]).is_err());
        assert!(Stft::new(StftParams { window: 512, hop: 0 }).is_err());
    }
}
