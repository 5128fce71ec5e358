//! Model checkpoints as a single JSON document.
//!
//! Layout (all keys required):
//!
//! ```text
//! {
//!   "format": "avshield-checkpoint",
//!   "version": 1,
//!   "schedule": { "steps": 1000, "beta_start": 0.0001, "beta_end": 0.02 },
//!   "model": { "hidden": 16, "attn_dim": 8, ... },
//!   "seed": 42,
//!   "parameters": [ { "name": "audio.proj.w", "shape": [9, 8], "data": [ ... ] }, ... ]
//! }
//! ```
//!
//! Parameters appear in the model's storage order. Floats are written in
//! shortest round-trip form, so loading reproduces the model bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::model::{ModelConfig, VictimModel};
use super::schedule::{DiffusionSchedule, ScheduleConfig};
use super::Denoiser;

pub const FORMAT: &str = "avshield-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedParameter {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    schedule: ScheduleConfig,
    model: ModelConfig,
    seed: u64,
    parameters: Vec<NamedParameter>,
}

pub fn to_json(model: &VictimModel) -> Result<String> {
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        schedule: model.schedule().config(),
        model: *model.config(),
        seed: model.seed(),
        parameters: model
            .named_parameters()
            .map(|(name, t)| NamedParameter {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn from_json(text: &str) -> Result<VictimModel> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(Error::Input(format!(
            "not a version {VERSION} {FORMAT} file (found {} v{})",
            file.format, file.version
        )));
    }
    let schedule = DiffusionSchedule::new(file.schedule)?;
    let mut names = Vec::with_capacity(file.parameters.len());
    let mut params = Vec::with_capacity(file.parameters.len());
    for p in file.parameters {
        params.push(Tensor::new(p.shape, p.data)?);
        names.push(p.name);
    }
    VictimModel::from_parts(file.model, schedule, names, params, file.seed)
}

pub fn save(model: &VictimModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<VictimModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}
