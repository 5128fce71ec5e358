//! Stage-aware protective perturbations for audio-driven talking-head diffusion.
//!
//! The crate bundles a small trainable victim (a diffusion denoiser with tappable
//! audio cross-attention), the image stream (nullifying loss aggregated over
//! several timestep intervals, optimised with L-infinity PGD), the audio stream
//! (cross-attention fooling under a peak-relative dB budget), purification
//! defenses, quality metrics and an experiment harness.

// Negated float comparisons are used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio_attack;
pub mod autodiff;
pub mod error;
pub mod harness;
pub mod image_attack;
pub mod metrics;
pub mod purification;
pub mod rng;
pub mod tensor;
pub mod victim;

pub use error::{Error, Result};
pub use tensor::Tensor;
