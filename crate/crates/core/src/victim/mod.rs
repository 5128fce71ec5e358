//! The differentiable talking-head surrogate the attacks are run against.

pub mod audio_features;
pub mod checkpoint;
pub mod condition;
pub mod dataset;
pub mod encoder;
pub mod media;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod train;
pub mod units;

pub use audio_features::{audio_features, AudioFeatureExtractor, AudioFeatureSequence};
pub use condition::ClipCondition;
pub use encoder::{decode, encode};
pub use media::{AudioClip, FrameSequence, LatentGrid, PortraitImage, FPS, SAMPLES_PER_FRAME, SAMPLE_RATE};
pub use model::{denoise_predict, DenoiseInputs, Denoiser, ModelConfig, Prediction, VictimModel};
pub use schedule::{DiffusionSchedule, ScheduleConfig};
pub use units::{AttentionMap, Branch, Layer, LayerBranchUnit};
