#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;

use avshield::victim::dataset::{make_clip, DatasetConfig, SyntheticClip};
use avshield::victim::{ModelConfig, ScheduleConfig, VictimModel};

/// Untrained model with a non-zero output layer, so every gradient path is live.
pub fn small_model(hidden: usize, seed: u64) -> VictimModel {
    let cfg = ModelConfig {
        hidden,
        zero_init_output: false,
        ..ModelConfig::default()
    };
    VictimModel::new(cfg, ScheduleConfig::default(), seed).unwrap()
}

pub fn small_clip(image_size: usize, seconds: f64, seed: u64) -> SyntheticClip {
    let cfg = DatasetConfig {
        image_size,
        clip_seconds: seconds,
        ..DatasetConfig::default()
    };
    make_clip(seed, 0, &cfg).unwrap()
}
