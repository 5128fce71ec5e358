//! Clip-level conditioning: clip losses average per-frame losses, each frame
//! conditioned on its own audio-token window.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::audio_features::{scatter_window_grad, AudioFeatureSequence};
use super::media::AudioClip;
use super::model::Denoiser;

#[derive(Clone, Debug)]
pub struct ClipCondition {
    features: AudioFeatureSequence,
    frames: Vec<usize>,
    radius: usize,
}

impl ClipCondition {
    /// Every frame of `audio`.
    pub fn all(model: &dyn Denoiser, audio: &AudioClip) -> Result<Self> {
        let features = model.features().extract(audio)?;
        let frames = (0..features.frames()).collect();
        Self::new(features, frames, model.window_radius())
    }

    pub fn new(features: AudioFeatureSequence, frames: Vec<usize>, radius: usize) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Config("a clip condition needs at least one frame".into()));
        }
        if let Some(&f) = frames.iter().find(|&&f| f >= features.frames()) {
            return Err(Error::Input(format!(
                "frame {f} out of range for {} feature rows",
                features.frames()
            )));
        }
        Ok(Self {
            features,
            frames,
            radius,
        })
    }

    /// Same features, different frames.
    pub fn with_frames(&self, frames: Vec<usize>) -> Result<Self> {
        Self::new(self.features.clone(), frames, self.radius)
    }

    pub fn features(&self) -> &AudioFeatureSequence {
        &self.features
    }

    pub fn frames(&self) -> &[usize] {
        &self.frames
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Token windows of the selected frames, recorded on `tape`.
    pub fn record_tokens(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.frames
            .iter()
            .map(|&f| tape.leaf(self.features.window(f, self.radius), requires_grad))
            .collect()
    }

    /// Folds per-frame token gradients back into a `[F, D]` feature gradient.
    pub fn scatter(&self, token_grads: &[Option<Tensor>]) -> Tensor {
        let mut full = Tensor::zeros(self.features.tensor().shape());
        for (&f, g) in self.frames.iter().zip(token_grads) {
            if let Some(g) = g {
                scatter_window_grad(&mut full, g, f, self.radius);
            }
        }
        full
    }
}
