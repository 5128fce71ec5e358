//! Run configuration: one JSON document per run, unknown keys rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio_attack::{AudioAttackConfig, CafTargetPlan};
use crate::error::{Error, Result};
use crate::image_attack::{ImageAttackConfig, IntervalPlan, TimestepInterval};
use crate::purification::{GateParams, JpegParams, PurifierSpec};
use crate::victim::dataset::{DatasetConfig, Rect};
use crate::victim::train::TrainConfig;
use crate::victim::{Branch, Layer, LayerBranchUnit, ModelConfig, ScheduleConfig};

/// Output-directory override.
pub const ENV_OUT_DIR: &str = "AVSHIELD_OUT_DIR";
/// Worker-thread count for per-item parallelism.
pub const ENV_THREADS: &str = "AVSHIELD_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    TrainToy,
    ProtectImage,
    ProtectAudio,
    Protect,
    Generate,
    Purify,
    Evaluate,
    Ablate,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::TrainToy,
        Mode::ProtectImage,
        Mode::ProtectAudio,
        Mode::Protect,
        Mode::Generate,
        Mode::Purify,
        Mode::Evaluate,
        Mode::Ablate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::TrainToy => "train-toy",
            Mode::ProtectImage => "protect-image",
            Mode::ProtectAudio => "protect-audio",
            Mode::Protect => "protect",
            Mode::Generate => "generate",
            Mode::Purify => "purify",
            Mode::Evaluate => "evaluate",
            Mode::Ablate => "ablate",
        }
    }

    /// Whether the mode perturbs the portrait / the audio.
    pub fn attacks(self) -> (bool, bool) {
        match self {
            Mode::ProtectImage => (true, false),
            Mode::ProtectAudio => (false, true),
            Mode::Protect => (true, true),
            _ => (false, false),
        }
    }

    pub fn needs_seed(self) -> bool {
        matches!(
            self,
            Mode::ProtectImage | Mode::ProtectAudio | Mode::Protect | Mode::Ablate
        )
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// One explicit portrait/audio pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub image: PathBuf,
    pub audio: PathBuf,
    /// Mouth rectangle for sync measurements; defaults to the lower-centre box.
    #[serde(default)]
    pub mouth_region: Option<Rect>,
}

/// Procedurally generated pairs with known mouth regions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub count: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub dataset: DatasetConfig,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 4,
            seed: 0,
            dataset: DatasetConfig::default(),
        }
    }
}

/// Where run items come from. All sources are concatenated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputSpec {
    pub pairs: Vec<PairSpec>,
    /// Directory of `name.png` + `name.wav` pairs matched by file stem.
    pub dir: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

/// Victim training for `train-toy`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub dataset: DatasetConfig,
    pub clips: usize,
    pub train: TrainConfig,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            dataset: DatasetConfig::default(),
            clips: 24,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    /// Each single interval of the image plan against the full multi-interval plan.
    Intervals,
    /// One CAF unit per layer on a fixed branch, over the whole schedule.
    Layers,
    /// One CAF unit restricted to each listed interval in turn.
    UnitIntervals,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub kind: AblationKind,
    /// Branch swept by `layers`.
    pub branch: Branch,
    /// Unit swept by `unit_intervals`.
    pub unit: LayerBranchUnit,
    /// Intervals swept by `unit_intervals`.
    pub intervals: Vec<TimestepInterval>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            kind: AblationKind::Intervals,
            branch: Branch::Lip,
            unit: LayerBranchUnit::new(Layer::Mid0, Branch::Lip),
            intervals: vec![
                TimestepInterval::new(0, 100),
                TimestepInterval::new(400, 600),
                TimestepInterval::new(900, 1000),
            ],
        }
    }
}

fn default_purifiers() -> Vec<PurifierSpec> {
    vec![
        PurifierSpec::Jpeg(JpegParams::default()),
        PurifierSpec::SpectralGate(GateParams::default()),
    ]
}

fn default_matrix_modes() -> Vec<Mode> {
    vec![Mode::ProtectImage, Mode::ProtectAudio, Mode::Protect]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    /// Trained victim checkpoint; required by every mode except `train-toy`.
    pub checkpoint: Option<PathBuf>,
    pub inputs: InputSpec,
    /// Attack settings; their `seed` fields are replaced by per-item seeds.
    pub image_attack: ImageAttackConfig,
    pub audio_attack: AudioAttackConfig,
    pub interval_plan: IntervalPlan,
    pub caf_plan: CafTargetPlan,
    pub purifiers: Vec<PurifierSpec>,
    /// Protection modes crossed with `purifiers` by `evaluate`.
    pub matrix_modes: Vec<Mode>,
    pub ablation: AblationSpec,
    pub train: TrainSpec,
    /// Denoising steps per generated frame.
    pub sample_steps: usize,
    /// Master seed; required for protect and ablate modes.
    pub seed: Option<u64>,
    /// Root for run directories; falls back to `AVSHIELD_OUT_DIR`, then `runs`.
    pub output_dir: Option<PathBuf>,
    /// Also write every generated frame as PNG.
    pub save_frames: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Protect,
            checkpoint: None,
            inputs: InputSpec::default(),
            image_attack: ImageAttackConfig::default(),
            audio_attack: AudioAttackConfig::default(),
            interval_plan: IntervalPlan::default(),
            caf_plan: CafTargetPlan::default(),
            purifiers: default_purifiers(),
            matrix_modes: default_matrix_modes(),
            ablation: AblationSpec::default(),
            train: TrainSpec::default(),
            sample_steps: 10,
            seed: None,
            output_dir: None,
            save_frames: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks everything that can be checked without reading inputs.
    pub fn validate(&self) -> Result<()> {
        if self.mode.needs_seed() && self.seed.is_none() {
            return Err(Error::Config(format!("mode {} requires a seed", self.mode)));
        }
        if self.mode != Mode::TrainToy && self.checkpoint.is_none() && self.mode != Mode::Purify {
            return Err(Error::Config(format!("mode {} requires a checkpoint", self.mode)));
        }
        if self.sample_steps == 0 {
            return Err(Error::Config("sample_steps must be positive".into()));
        }
        self.image_attack.validate()?;
        self.audio_attack.validate()?;
        for p in &self.purifiers {
            p.validate()?;
        }
        if self.mode == Mode::Evaluate {
            if let Some(m) = self.matrix_modes.iter().find(|m| m.attacks() == (false, false)) {
                return Err(Error::Config(format!("{m} is not a protection mode")));
            }
        }
        if self.mode == Mode::TrainToy {
            self.train.model.validate()?;
            self.train.dataset.validate()?;
        }
        Ok(())
    }

    /// Canonical JSON: sorted keys, no output location.
    pub fn canonical_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(map) = v.as_object_mut() {
            map.remove("output_dir");
        }
        Ok(serde_json::to_string(&v)?)
    }

    /// Hex sha256 of [`RunConfig::canonical_json`].
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }

    /// `output_dir`, else `AVSHIELD_OUT_DIR`, else `runs`.
    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(ENV_OUT_DIR).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}
