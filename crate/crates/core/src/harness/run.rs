//! Experiment orchestration.
//!
//! Every item gets its own seed, derived from the master seed and the item id,
//! and every random draw for that item (attacks, validation grids, sampling)
//! descends from it. Items run in parallel; the report is assembled afterwards
//! in input order.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::audio_attack::{
    attack_audio, db_x, plan_grid, targeted_variance, AudioAttackConfig, CafTarget, CafTargetPlan,
};
use crate::error::{Error, Result};
use crate::image_attack::{
    attack_image, frozen_grid, nullifying_validation_loss, ImageAttackConfig, IntervalPlan, TimestepInterval,
    VALIDATION_TIMESTEPS,
};
use crate::metrics::{linf, mouth_intensity, psnr, snr, ssim, sync_proxy, video_psnr, video_ssim};
use crate::purification::PurifierSpec;
use crate::rng::derive_seed;
use crate::victim::checkpoint;
use crate::victim::dataset::make_synthetic_dataset;
use crate::victim::sampler::sample_frames;
use crate::victim::train::train_toy;
use crate::victim::{AudioClip, Denoiser, FrameSequence, Layer, LayerBranchUnit, PortraitImage, VictimModel};

use super::config::{AblationKind, Mode, RunConfig, ENV_THREADS};
use super::ingest::{ingest, Item};
use super::io::{file_digest, write_png, write_text, write_wav};
use super::report::{emit_report, CheckpointRef, EvalReport, Record};

/// A finished run: its directory and the report written there.
#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub report: EvalReport,
}

/// Seed for everything random about one item.
pub fn item_seed(master: u64, item_id: &str) -> u64 {
    derive_seed(master, &format!("item/{item_id}"))
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(ENV_THREADS) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{ENV_THREADS} must be a non-negative integer, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Runs `cfg` end to end and writes `config.json`, `report.json` and `artifacts/`
/// under `<output root>/<mode>-<digest prefix>`.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let digest = cfg.digest()?;
    let run_id = format!("{}-{}", cfg.mode, &digest[..12]);
    let dir = cfg.output_root().join(&run_id);
    if dir.exists() {
        log::warn!("{} exists; overwriting", dir.display());
    }
    let canonical: serde_json::Value = serde_json::from_str(&cfg.canonical_json()?)?;
    write_text(
        &dir.join("config.json"),
        &(serde_json::to_string_pretty(&canonical)? + "\n"),
    )?;

    let mut report = EvalReport::new(run_id, cfg.mode, digest, cfg.seed);
    let model = match (&cfg.checkpoint, cfg.mode) {
        (_, Mode::TrainToy) | (None, Mode::Purify) => None,
        (Some(path), _) => {
            report.checkpoint = Some(CheckpointRef {
                path: path.display().to_string(),
                digest: file_digest(path)?,
            });
            Some(checkpoint::load(path)?)
        }
        (None, mode) => return Err(Error::Config(format!("mode {mode} requires a checkpoint"))),
    };
    if let Some(m) = &model {
        check_plans(cfg, m)?;
    }

    let pool = thread_pool()?;
    if cfg.mode == Mode::TrainToy {
        let (record, ck) = run_train(cfg, &dir)?;
        report.records.push(record);
        report.checkpoint = Some(ck);
    } else {
        let (items, errors) = ingest(&cfg.inputs);
        report.errors = errors;
        let ctx = Ctx {
            cfg,
            model: model.as_ref(),
            dir: &dir,
            master: cfg.seed.unwrap_or(0),
        };
        let per_item: Vec<Vec<Record>> = pool.install(|| items.par_iter().map(|item| ctx.item(item)).collect());
        report.records = per_item.into_iter().flatten().collect();
    }
    report.finalize();
    emit_report(&report, &dir.join("report.json"))?;
    Ok(RunOutcome { dir, report })
}

/// Plans must fit the checkpoint's schedule and unit inventory.
pub fn check_plans(cfg: &RunConfig, model: &VictimModel) -> Result<()> {
    let steps = model.schedule().steps();
    cfg.interval_plan.resolve(steps)?;
    cfg.caf_plan.resolve(model)?;
    if cfg.mode == Mode::Ablate && cfg.ablation.kind == AblationKind::UnitIntervals {
        if cfg.ablation.intervals.is_empty() {
            return Err(Error::Config(
                "unit_intervals ablation needs at least one interval".into(),
            ));
        }
        for iv in &cfg.ablation.intervals {
            iv.clamped(steps)?;
        }
    }
    Ok(())
}

fn run_train(cfg: &RunConfig, dir: &Path) -> Result<(Record, CheckpointRef)> {
    let spec = &cfg.train;
    let seed = cfg.seed.unwrap_or(0);
    let corpus = make_synthetic_dataset(spec.clips, seed, &spec.dataset)?;
    let model = VictimModel::new(spec.model, spec.schedule, seed)?;
    let (model, tr) = train_toy(model, &corpus, &spec.train, seed)?;
    let rel = "artifacts/checkpoint.json";
    let path = dir.join(rel);
    std::fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io(dir, e))?;
    checkpoint::save(&model, &path)?;
    let mut r = Record::new("training-corpus", "train", seed);
    r.metric("initial_validation", tr.initial_validation);
    r.metric("final_validation", tr.final_validation);
    r.metric("steps", tr.steps as f64);
    r.trace("loss_curve", tr.loss_curve);
    r.artifacts.push(rel.to_string());
    let ck = CheckpointRef {
        path: path.display().to_string(),
        digest: file_digest(&path)?,
    };
    Ok((r, ck))
}

/// Protected inputs of one item and the traces that produced them.
#[derive(Clone, Debug)]
pub struct Protected {
    pub image: PortraitImage,
    pub audio: AudioClip,
    pub image_losses: Option<Vec<f64>>,
    pub linf_trace: Option<Vec<f64>>,
    pub audio_losses: Option<Vec<f64>>,
    pub db_trace: Option<Vec<f64>>,
}

/// Runs the attacks `mode` calls for; unattacked modalities are returned unchanged.
pub fn protect_item(
    model: &VictimModel,
    cfg: &RunConfig,
    mode: Mode,
    portrait: &PortraitImage,
    audio: &AudioClip,
    seed: u64,
) -> Result<Protected> {
    let (do_image, do_audio) = mode.attacks();
    let mut out = Protected {
        image: portrait.clone(),
        audio: audio.clone(),
        image_losses: None,
        linf_trace: None,
        audio_losses: None,
        db_trace: None,
    };
    if do_image {
        let icfg = ImageAttackConfig {
            seed,
            ..cfg.image_attack
        };
        let (img, tr) = attack_image(model, portrait, audio, &icfg, &cfg.interval_plan)?;
        out.image = img;
        out.image_losses = Some(tr.losses);
        out.linf_trace = Some(tr.linf);
    }
    if do_audio {
        let acfg = AudioAttackConfig {
            seed,
            ..cfg.audio_attack
        };
        let (a, tr) = attack_audio(model, portrait, audio, &acfg, &cfg.caf_plan)?;
        out.audio = a;
        out.audio_losses = Some(tr.losses);
        out.db_trace = Some(tr.db);
    }
    Ok(out)
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    model: Option<&'a VictimModel>,
    dir: &'a Path,
    master: u64,
}

impl Ctx<'_> {
    fn model(&self) -> &VictimModel {
        self.model.expect("mode has a checkpoint")
    }

    fn item(&self, item: &Item) -> Vec<Record> {
        let seed = item_seed(self.master, &item.id);
        log::info!("item {} ({}) seed {seed}", item.id, item.source);
        let mode = self.cfg.mode;
        let cells = match mode {
            Mode::ProtectImage | Mode::ProtectAudio | Mode::Protect => vec![self.protect_cell(item, mode, seed)],
            Mode::Generate => vec![self.generate_cell(item, seed)],
            Mode::Purify => self.purify_cells(item, seed),
            Mode::Evaluate => self.matrix_cells(item, seed),
            Mode::Ablate => self.ablation_cells(item, seed),
            Mode::TrainToy => Vec::new(),
        };
        cells
            .into_iter()
            .map(|(cell, res)| {
                res.unwrap_or_else(|e| {
                    log::warn!("item {} cell {cell}: {e}", item.id);
                    let mut r = Record::new(&item.id, &cell, seed);
                    r.error = Some(e.to_string());
                    r
                })
            })
            .collect()
    }

    fn generate(&self, portrait: &PortraitImage, audio: &AudioClip, seed: u64) -> Result<FrameSequence> {
        sample_frames(self.model(), portrait, audio, self.cfg.sample_steps, seed)
    }

    /// Sync is always scored against the item's clean audio envelope.
    fn sync(&self, item: &Item, frames: &FrameSequence) -> Result<f64> {
        sync_proxy(frames, &item.audio, &item.mouth_region)
    }

    fn rel(item: &Item, name: &str) -> String {
        format!("artifacts/{}/{name}", item.id)
    }

    fn save_image(&self, item: &Item, name: &str, image: &PortraitImage, r: &mut Record) -> Result<()> {
        let rel = Self::rel(item, name);
        write_png(&self.dir.join(&rel), image)?;
        r.artifacts.push(rel);
        Ok(())
    }

    fn save_audio(&self, item: &Item, name: &str, audio: &AudioClip, r: &mut Record) -> Result<()> {
        let rel = Self::rel(item, name);
        write_wav(&self.dir.join(&rel), audio)?;
        r.artifacts.push(rel);
        Ok(())
    }

    fn save_frames(&self, item: &Item, prefix: &str, frames: &FrameSequence, r: &mut Record) -> Result<()> {
        for (i, f) in frames.frames.iter().enumerate() {
            self.save_image(item, &format!("frames/{prefix}_{i:03}.png"), f, r)?;
        }
        Ok(())
    }

    fn protect_cell(&self, item: &Item, mode: Mode, seed: u64) -> (String, Result<Record>) {
        let cell = mode.to_string();
        let res = self.protect_record(item, mode, seed, &cell).map(|(r, _, _)| r);
        (cell, res)
    }

    /// Attack, generate clean and protected videos, and measure both.
    /// Also returns the protected inputs and the clean-input generation.
    fn protect_record(
        &self,
        item: &Item,
        mode: Mode,
        seed: u64,
        cell: &str,
    ) -> Result<(Record, Protected, FrameSequence)> {
        let model = self.model();
        let (do_image, do_audio) = mode.attacks();
        let p = protect_item(model, self.cfg, mode, &item.portrait, &item.audio, seed)?;
        let mut r = Record::new(&item.id, cell, seed);

        let clean = self.generate(&item.portrait, &item.audio, seed)?;
        let prot = self.generate(&p.image, &p.audio, seed)?;
        r.metric("sync_clean", self.sync(item, &clean)?);
        r.metric("sync_protected", self.sync(item, &prot)?);
        r.metric("v_psnr", video_psnr(&clean, &prot)?);
        r.metric("v_ssim", video_ssim(&clean, &prot)?);
        if do_image && do_audio {
            let image_only = self.generate(&p.image, &item.audio, seed)?;
            let audio_only = self.generate(&item.portrait, &p.audio, seed)?;
            r.metric("sync_image_only", self.sync(item, &image_only)?);
            r.metric("sync_audio_only", self.sync(item, &audio_only)?);
        }
        r.metric("i_psnr", psnr(&item.portrait, &p.image)?);
        r.metric("i_ssim", ssim(&item.portrait, &p.image)?);
        r.metric("linf", linf(&item.portrait, &p.image)?);
        r.metric("snr", snr(&item.audio, &p.audio)?);
        let delta: Vec<f64> = p
            .audio
            .samples()
            .iter()
            .zip(item.audio.samples())
            .map(|(a, b)| a - b)
            .collect();
        r.metric("db_x", db_x(&delta, item.audio.samples())?);

        if do_image {
            let grid = frozen_grid(&VALIDATION_TIMESTEPS, &item.portrait, seed);
            r.metric(
                "nullifying_before",
                nullifying_validation_loss(model, &item.portrait, &item.audio, &grid)?,
            );
            r.metric(
                "nullifying_after",
                nullifying_validation_loss(model, &p.image, &item.audio, &grid)?,
            );
        }
        if do_audio {
            let grid = plan_grid(&self.cfg.caf_plan, model, &item.portrait, seed)?;
            let plan = &self.cfg.caf_plan;
            r.metric(
                "variance_before",
                targeted_variance(model, &item.portrait, &item.audio, plan, &grid)?,
            );
            r.metric(
                "variance_after",
                targeted_variance(model, &item.portrait, &p.audio, plan, &grid)?,
            );
        }
        for (name, t) in [
            ("image_loss", &p.image_losses),
            ("linf", &p.linf_trace),
            ("audio_loss", &p.audio_losses),
            ("db", &p.db_trace),
        ] {
            if let Some(t) = t {
                r.trace(name, t.clone());
            }
        }

        let tag = cell.replace('/', "_");
        if do_image {
            self.save_image(item, &format!("{tag}_image.png"), &p.image, &mut r)?;
        }
        if do_audio {
            self.save_audio(item, &format!("{tag}_audio.wav"), &p.audio, &mut r)?;
        }
        if self.cfg.save_frames {
            self.save_frames(item, &format!("{tag}_protected"), &prot, &mut r)?;
        }
        Ok((r, p, clean))
    }

    fn generate_cell(&self, item: &Item, seed: u64) -> (String, Result<Record>) {
        let cell = "generate".to_string();
        let res = (|| {
            let frames = self.generate(&item.portrait, &item.audio, seed)?;
            let mut r = Record::new(&item.id, &cell, seed);
            r.metric("sync", self.sync(item, &frames)?);
            let mouth = mouth_intensity(&frames, &item.mouth_region)?;
            let mean = mouth.iter().sum::<f64>() / mouth.len() as f64;
            let var = mouth.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / mouth.len() as f64;
            r.metric("mouth_std", var.sqrt());
            r.trace("mouth_intensity", mouth);
            self.save_frames(item, "frame", &frames, &mut r)?;
            Ok(r)
        })();
        (cell, res)
    }

    fn purify_cells(&self, item: &Item, seed: u64) -> Vec<(String, Result<Record>)> {
        self.cfg
            .purifiers
            .iter()
            .map(|spec| {
                let cell = format!("purify/{}", spec.name());
                let res = (|| {
                    let mut r = Record::new(&item.id, &cell, seed);
                    if spec.is_image() {
                        let out = spec.apply_image(&item.portrait)?;
                        r.metric("i_psnr", psnr(&item.portrait, &out)?);
                        r.metric("i_ssim", ssim(&item.portrait, &out)?);
                        self.save_image(item, &format!("{}.png", spec.name()), &out, &mut r)?;
                    } else {
                        let out = spec.apply_audio(&item.audio)?;
                        r.metric("snr", snr(&item.audio, &out)?);
                        self.save_audio(item, &format!("{}.wav", spec.name()), &out, &mut r)?;
                    }
                    Ok(r)
                })();
                (cell, res)
            })
            .collect()
    }

    /// Purifier x protection mode: purify the matching modality of the protected pair and regenerate.
    fn matrix_cells(&self, item: &Item, seed: u64) -> Vec<(String, Result<Record>)> {
        let mut out = Vec::new();
        for &mode in &self.cfg.matrix_modes {
            let cell = mode.to_string();
            let (p, clean) = match self.protect_record(item, mode, seed, &cell) {
                Ok((r, p, clean)) => {
                    out.push((cell, Ok(r)));
                    (p, clean)
                }
                Err(e) => {
                    out.push((cell, Err(e)));
                    continue;
                }
            };
            for spec in &self.cfg.purifiers {
                let cell = format!("{mode}/{}", spec.name());
                let res = self.purified_record(item, &cell, seed, spec, &p, &clean);
                out.push((cell, res));
            }
        }
        out
    }

    fn purified_record(
        &self,
        item: &Item,
        cell: &str,
        seed: u64,
        spec: &PurifierSpec,
        p: &Protected,
        clean: &FrameSequence,
    ) -> Result<Record> {
        let mut r = Record::new(&item.id, cell, seed);
        let (image, audio) = if spec.is_image() {
            let img = spec.apply_image(&p.image)?;
            r.metric("i_psnr", psnr(&item.portrait, &img)?);
            r.metric("i_ssim", ssim(&item.portrait, &img)?);
            (img, p.audio.clone())
        } else {
            let a = spec.apply_audio(&p.audio)?;
            r.metric("snr", snr(&item.audio, &a)?);
            (p.image.clone(), a)
        };
        let frames = self.generate(&image, &audio, seed)?;
        r.metric("sync_clean", self.sync(item, clean)?);
        r.metric("sync_purified", self.sync(item, &frames)?);
        r.metric("v_psnr", video_psnr(clean, &frames)?);
        r.metric("v_ssim", video_ssim(clean, &frames)?);
        if self.cfg.save_frames {
            self.save_frames(item, &cell.replace('/', "_"), &frames, &mut r)?;
        }
        Ok(r)
    }

    fn ablation_cells(&self, item: &Item, seed: u64) -> Vec<(String, Result<Record>)> {
        let model = self.model();
        let steps = model.schedule().steps();
        let clean = match self.generate(&item.portrait, &item.audio, seed) {
            Ok(c) => c,
            Err(e) => return vec![("ablate".to_string(), Err(e))],
        };
        let ab = &self.cfg.ablation;
        match ab.kind {
            AblationKind::Intervals => {
                let plan = &self.cfg.interval_plan;
                let mut cells = vec![("mis".to_string(), plan.clone())];
                cells.extend(
                    plan.intervals
                        .iter()
                        .map(|iv| (format!("interval/{iv}"), IntervalPlan::single(*iv))),
                );
                cells
                    .into_iter()
                    .map(|(cell, plan)| {
                        let res = self.image_ablation(item, &cell, seed, &plan, &clean);
                        (cell, res)
                    })
                    .collect()
            }
            AblationKind::Layers => Layer::ALL
                .iter()
                .map(|&layer| {
                    let unit = LayerBranchUnit::new(layer, ab.branch);
                    let plan = caf_single(TimestepInterval::new(1, steps), unit);
                    let cell = format!("layer/{unit}");
                    let res = self.audio_ablation(item, &cell, seed, &plan, &clean);
                    (cell, res)
                })
                .collect(),
            AblationKind::UnitIntervals => ab
                .intervals
                .iter()
                .map(|&iv| {
                    let plan = caf_single(iv, ab.unit);
                    let cell = format!("{}/{iv}", ab.unit);
                    let res = self.audio_ablation(item, &cell, seed, &plan, &clean);
                    (cell, res)
                })
                .collect(),
        }
    }

    fn image_ablation(
        &self,
        item: &Item,
        cell: &str,
        seed: u64,
        plan: &IntervalPlan,
        clean: &FrameSequence,
    ) -> Result<Record> {
        let model = self.model();
        let icfg = ImageAttackConfig {
            seed,
            ..self.cfg.image_attack
        };
        let (img, tr) = attack_image(model, &item.portrait, &item.audio, &icfg, plan)?;
        let grid = frozen_grid(&VALIDATION_TIMESTEPS, &item.portrait, seed);
        let frames = self.generate(&img, &item.audio, seed)?;
        let mut r = Record::new(&item.id, cell, seed);
        r.metric(
            "nullifying_before",
            nullifying_validation_loss(model, &item.portrait, &item.audio, &grid)?,
        );
        r.metric(
            "nullifying_after",
            nullifying_validation_loss(model, &img, &item.audio, &grid)?,
        );
        r.metric("sync_clean", self.sync(item, clean)?);
        r.metric("sync_protected", self.sync(item, &frames)?);
        r.metric("v_psnr", video_psnr(clean, &frames)?);
        r.metric("i_psnr", psnr(&item.portrait, &img)?);
        r.trace("image_loss", tr.losses);
        Ok(r)
    }

    fn audio_ablation(
        &self,
        item: &Item,
        cell: &str,
        seed: u64,
        plan: &CafTargetPlan,
        clean: &FrameSequence,
    ) -> Result<Record> {
        let model = self.model();
        let acfg = AudioAttackConfig {
            seed,
            ..self.cfg.audio_attack
        };
        let (audio, tr) = attack_audio(model, &item.portrait, &item.audio, &acfg, plan)?;
        let grid = plan_grid(plan, model, &item.portrait, seed)?;
        let frames = self.generate(&item.portrait, &audio, seed)?;
        let mut r = Record::new(&item.id, cell, seed);
        r.metric(
            "variance_before",
            targeted_variance(model, &item.portrait, &item.audio, plan, &grid)?,
        );
        r.metric(
            "variance_after",
            targeted_variance(model, &item.portrait, &audio, plan, &grid)?,
        );
        r.metric("sync_clean", self.sync(item, clean)?);
        r.metric("sync_protected", self.sync(item, &frames)?);
        r.metric("v_psnr", video_psnr(clean, &frames)?);
        r.metric("snr", snr(&item.audio, &audio)?);
        r.trace("audio_loss", tr.losses);
        Ok(r)
    }
}

fn caf_single(interval: TimestepInterval, unit: LayerBranchUnit) -> CafTargetPlan {
    CafTargetPlan {
        entries: vec![CafTarget {
            interval,
            units: vec![unit],
        }],
    }
}
