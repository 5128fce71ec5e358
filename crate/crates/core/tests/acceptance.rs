//! Acceptance run: trains the toy victim at 32 px, then checks each criterion and
//! prints one PASS/FAIL line per criterion. Exits non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use avshield::audio_attack::{attack_audio, plan_grid, targeted_variance, AudioAttackConfig, CafTargetPlan};
use avshield::harness::config::{InputSpec, SyntheticSpec};
use avshield::harness::{item_seed, run, Mode, RunConfig};
use avshield::image_attack::{
    attack_image, frozen_grid, nullifying_validation_loss, ImageAttackConfig, IntervalPlan, VALIDATION_TIMESTEPS,
};
use avshield::metrics::{pearson, psnr, snr, ssim, sync_proxy};
use avshield::purification::{jpeg_purify, spectral_gate, GateParams};
use avshield::victim::dataset::{make_synthetic_dataset, DatasetConfig, Rect, SyntheticClip};
use avshield::victim::sampler::sample_frames;
use avshield::victim::train::{train_toy, TrainConfig};
use avshield::victim::{checkpoint, AudioClip, FrameSequence, ModelConfig, PortraitImage, ScheduleConfig, VictimModel};
use tempfile::TempDir;

use common::{gradcheck, oracle};

const IMAGE_SIZE: usize = 32;
const HIDDEN: usize = 16;
const TRAIN_CLIPS: usize = 24;
const TRAIN_SEED: u64 = 1;
const TEST_SEED: u64 = 99;
const RUNS: usize = 20;
const MASTER_SEED: u64 = 0;
const SAMPLE_STEPS: usize = 10;

const TAU: f64 = 16.0 / 255.0;
const TAU_SLACK: f64 = 1e-9;
const DB_BOUND: f64 = -30.0;
const DB_SLACK: f64 = 1e-6;
const BUDGET_RUNTIME: Duration = Duration::from_secs(300);
const MC_SE: f64 = 3.0;
const VARIANCE_REL: f64 = 1e-10;
const GRAD_REL: f64 = 1e-3;
const GRAD_RUNTIME: Duration = Duration::from_secs(600);
const EFFECT_MIN: usize = 18;
const EFFECT_RUNTIME: Duration = Duration::from_secs(1800);
const PURIFY_MIN: usize = 15;
const PSNR_16: f64 = 24.0478;
const PSNR_TOL: f64 = 1e-3;
const SNR_TOL: f64 = 1e-8;
const SYNC_TOL: f64 = 1e-9;

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn dataset_config() -> DatasetConfig {
    DatasetConfig {
        image_size: IMAGE_SIZE,
        clip_seconds: 1.0,
        ..DatasetConfig::default()
    }
}

fn train() -> VictimModel {
    let t0 = Instant::now();
    let corpus = make_synthetic_dataset(TRAIN_CLIPS, TRAIN_SEED, &dataset_config()).unwrap();
    let cfg = ModelConfig {
        hidden: HIDDEN,
        ..ModelConfig::default()
    };
    let model = VictimModel::new(cfg, ScheduleConfig::default(), TRAIN_SEED).unwrap();
    let (model, rep) = train_toy(model, &corpus, &TrainConfig::default(), TRAIN_SEED).unwrap();
    println!(
        "trained toy victim: validation loss {:.4} -> {:.4} in {:.1} s",
        rep.initial_validation,
        rep.final_validation,
        t0.elapsed().as_secs_f64()
    );
    model
}

/// Everything measured on one paired test item.
struct ItemResult {
    max_linf: f64,
    max_db: f64,
    image_iters: usize,
    audio_iters: usize,
    image_time: Duration,
    audio_time: Duration,
    nullifying: (f64, f64),
    variance: (f64, f64),
    sync_clean: f64,
    sync_image: f64,
    sync_audio: f64,
    sync_multi: f64,
    sync_jpeg_multi: f64,
    sync_gate_multi: f64,
}

fn evaluate_item(model: &VictimModel, clip: &SyntheticClip) -> ItemResult {
    let seed = item_seed(MASTER_SEED, &clip.id);
    let (p0, a0) = (&clip.reference, &clip.audio);
    let plan = IntervalPlan::default();
    let cplan = CafTargetPlan::default();

    let t = Instant::now();
    let icfg = ImageAttackConfig {
        seed,
        ..ImageAttackConfig::default()
    };
    let (p1, itr) = attack_image(model, p0, a0, &icfg, &plan).unwrap();
    let image_time = t.elapsed();
    let t = Instant::now();
    let acfg = AudioAttackConfig {
        seed,
        ..AudioAttackConfig::default()
    };
    let (a1, atr) = attack_audio(model, p0, a0, &acfg, &cplan).unwrap();
    let audio_time = t.elapsed();

    let grid = frozen_grid(&VALIDATION_TIMESTEPS, p0, seed);
    let nullifying = (
        nullifying_validation_loss(model, p0, a0, &grid).unwrap(),
        nullifying_validation_loss(model, &p1, a0, &grid).unwrap(),
    );
    let cgrid = plan_grid(&cplan, model, p0, seed).unwrap();
    let variance = (
        targeted_variance(model, p0, a0, &cplan, &cgrid).unwrap(),
        targeted_variance(model, p0, &a1, &cplan, &cgrid).unwrap(),
    );

    let sync = |p: &PortraitImage, a: &AudioClip| {
        let frames = sample_frames(model, p, a, SAMPLE_STEPS, seed).unwrap();
        sync_proxy(&frames, a0, &clip.mouth_region).unwrap()
    };
    let p1_jpeg = jpeg_purify(&p1, 75).unwrap();
    let a1_gate = spectral_gate(&a1, &GateParams::default()).unwrap();
    ItemResult {
        max_linf: itr.linf.iter().cloned().fold(0.0, f64::max),
        max_db: atr.db.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        image_iters: itr.linf.len(),
        audio_iters: atr.db.len(),
        image_time,
        audio_time,
        nullifying,
        variance,
        sync_clean: sync(p0, a0),
        sync_image: sync(&p1, a0),
        sync_audio: sync(p0, &a1),
        sync_multi: sync(&p1, &a1),
        sync_jpeg_multi: sync(&p1_jpeg, &a1),
        sync_gate_multi: sync(&p1, &a1_gate),
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn budgets(results: &[ItemResult]) -> [Line; 2] {
    let linf = results.iter().map(|r| r.max_linf).fold(0.0, f64::max);
    let db = results.iter().map(|r| r.max_db).fold(f64::NEG_INFINITY, f64::max);
    let (ti, ta): (Duration, Duration) = (
        results.iter().map(|r| r.image_time).sum(),
        results.iter().map(|r| r.audio_time).sum(),
    );
    let (ni, na): (usize, usize) = (
        results.iter().map(|r| r.image_iters).sum(),
        results.iter().map(|r| r.audio_iters).sum(),
    );
    [
        Line {
            id: 1,
            name: "image budget",
            pass: linf <= TAU + TAU_SLACK && ti < BUDGET_RUNTIME && ni > 0,
            detail: format!(
                "max linf {linf:.9} <= {:.9} over {ni} iterations of {RUNS} runs; {:.1} s",
                TAU + TAU_SLACK,
                ti.as_secs_f64()
            ),
        },
        Line {
            id: 2,
            name: "audio budget",
            pass: db <= DB_BOUND + DB_SLACK && ta < BUDGET_RUNTIME && na > 0,
            detail: format!(
                "max dB_x {db:.6} <= {:.6} over {na} iterations of {RUNS} runs; {:.1} s",
                DB_BOUND + DB_SLACK,
                ta.as_secs_f64()
            ),
        },
    ]
}

fn oracles() -> Line {
    let z = oracle::forward_noise_worst_z();
    let rel = oracle::spatial_variance_worst_rel();
    let k1 = oracle::mis_k1_bitwise();
    let ab = oracle::alpha_bar_identity_exact();
    Line {
        id: 3,
        name: "formula oracles",
        pass: z < MC_SE && rel <= VARIANCE_REL && k1 && ab,
        detail: format!(
            "forward noise worst {z:.2} SE < {MC_SE}; spatial variance rel {rel:.1e} <= {VARIANCE_REL:.0e}; \
             single-interval bitwise {k1}; running product exact {ab}"
        ),
    }
}

fn gradients() -> Line {
    let t0 = Instant::now();
    let null = gradcheck::nullifying_errors()
        .into_iter()
        .map(|(_, e)| e)
        .fold(0.0, f64::max);
    let mis = gradcheck::mis_error();
    let caf = gradcheck::caf_error();
    let took = t0.elapsed();
    Line {
        id: 4,
        name: "gradient checks",
        pass: null.max(mis).max(caf) <= GRAD_REL && took < GRAD_RUNTIME,
        detail: format!(
            "relative error nullifying {null:.1e}, mis {mis:.1e}, caf {caf:.1e} <= {GRAD_REL:.0e} on {} coordinates; {:.1} s",
            gradcheck::COORDS,
            took.as_secs_f64()
        ),
    }
}

fn effectiveness(results: &[ItemResult], took: Duration) -> Line {
    let null_down = results.iter().filter(|r| r.nullifying.1 < r.nullifying.0).count();
    let var_down = results.iter().filter(|r| r.variance.1 < r.variance.0).count();
    let clean = mean(results.iter().map(|r| r.sync_clean));
    let image = mean(results.iter().map(|r| r.sync_image));
    let audio = mean(results.iter().map(|r| r.sync_audio));
    let multi = mean(results.iter().map(|r| r.sync_multi));
    let order = clean > image && clean > audio && multi <= image.min(audio);
    Line {
        id: 5,
        name: "attack effectiveness",
        pass: null_down >= EFFECT_MIN && var_down >= EFFECT_MIN && order && took < EFFECT_RUNTIME,
        detail: format!(
            "nullifying lowered {null_down}/{RUNS}, attention variance lowered {var_down}/{RUNS} (need {EFFECT_MIN}); \
             mean sync clean {clean:.4} image-only {image:.4} audio-only {audio:.4} multimodal {multi:.4}; {:.1} s",
            took.as_secs_f64()
        ),
    }
}

fn purification(results: &[ItemResult]) -> Line {
    let jpeg = results.iter().filter(|r| r.sync_jpeg_multi < r.sync_clean).count();
    let gate = results.iter().filter(|r| r.sync_gate_multi < r.sync_clean).count();
    Line {
        id: 6,
        name: "anti-purification",
        pass: jpeg >= PURIFY_MIN && gate >= PURIFY_MIN,
        detail: format!(
            "multimodal sync below clean after jpeg(75) in {jpeg}/{RUNS}, after spectral gate in {gate}/{RUNS} (need {PURIFY_MIN}); \
             mean sync jpeg {:.4} gate {:.4}",
            mean(results.iter().map(|r| r.sync_jpeg_multi)),
            mean(results.iter().map(|r| r.sync_gate_multi))
        ),
    }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(model: &VictimModel, clip: &SyntheticClip) -> Line {
    let tmp = TempDir::new().unwrap();
    let ck = tmp.path().join("victim.json");
    checkpoint::save(model, &ck).unwrap();
    let cfg = |out: &str| RunConfig {
        mode: Mode::Protect,
        checkpoint: Some(ck.clone()),
        inputs: InputSpec {
            synthetic: Some(SyntheticSpec {
                count: 2,
                seed: TEST_SEED,
                dataset: dataset_config(),
            }),
            ..InputSpec::default()
        },
        image_attack: ImageAttackConfig {
            iters: 10,
            ..ImageAttackConfig::default()
        },
        audio_attack: AudioAttackConfig {
            iters: 10,
            ..AudioAttackConfig::default()
        },
        sample_steps: 4,
        seed: Some(MASTER_SEED),
        output_dir: Some(tmp.path().join(out)),
        ..RunConfig::default()
    };
    let (a, b) = (run(&cfg("a")).unwrap(), run(&cfg("b")).unwrap());
    let (ta, tb) = (tree(&a.dir.join("artifacts")), tree(&b.dir.join("artifacts")));
    let artifacts = !ta.is_empty() && ta == tb;
    let bodies = a.report.body_json().unwrap() == b.report.body_json().unwrap();

    let seed = item_seed(MASTER_SEED, &clip.id);
    let icfg = ImageAttackConfig {
        seed,
        iters: 10,
        ..ImageAttackConfig::default()
    };
    let acfg = AudioAttackConfig {
        seed,
        iters: 10,
        ..AudioAttackConfig::default()
    };
    let once = || {
        let (p, _) = attack_image(model, &clip.reference, &clip.audio, &icfg, &IntervalPlan::default()).unwrap();
        let (s, _) = attack_audio(model, &clip.reference, &clip.audio, &acfg, &CafTargetPlan::default()).unwrap();
        (p, s)
    };
    let direct = once() == once();
    Line {
        id: 7,
        name: "determinism",
        pass: artifacts && bodies && direct,
        detail: format!(
            "{} artifact files identical {artifacts}; report bodies identical {bodies}; direct attacks bitwise {direct}",
            ta.len()
        ),
    }
}

fn affine_frames(audio: &AudioClip, slope: f64) -> FrameSequence {
    let frames = audio
        .frame_rms()
        .iter()
        .map(|r| PortraitImage::constant(IMAGE_SIZE, IMAGE_SIZE, (0.5 + slope * r).clamp(0.0, 1.0)).unwrap())
        .collect();
    FrameSequence { frames }
}

fn metric_sanity(clip: &SyntheticClip) -> Line {
    let ss = ssim(&clip.reference, &clip.reference).unwrap();
    let a = PortraitImage::constant(IMAGE_SIZE, IMAGE_SIZE, 0.5).unwrap();
    let b = PortraitImage::constant(IMAGE_SIZE, IMAGE_SIZE, 0.5 + 16.0 / 255.0).unwrap();
    let ps = psnr(&a, &b).unwrap();
    let noisy = AudioClip::new(clip.audio.samples().iter().map(|v| 0.9 * v).collect()).unwrap();
    let sn = snr(&clip.audio, &noisy).unwrap();
    let region = Rect {
        x0: 8,
        y0: 16,
        x1: 24,
        y1: 24,
    };
    let pos = sync_proxy(&affine_frames(&clip.audio, 0.8), &clip.audio, &region).unwrap();
    let neg = sync_proxy(&affine_frames(&clip.audio, -0.8), &clip.audio, &region).unwrap();
    let rms = clip.audio.frame_rms();
    let lin: Vec<f64> = rms.iter().map(|r| 3.0 * r - 2.0).collect();
    let pr = pearson(&rms, &lin).unwrap();
    Line {
        id: 8,
        name: "metric sanity",
        pass: ss == 1.0
            && (ps - PSNR_16).abs() <= PSNR_TOL
            && (sn - 20.0).abs() <= SNR_TOL
            && (pos - 1.0).abs() <= SYNC_TOL
            && (neg + 1.0).abs() <= SYNC_TOL
            && (pr - 1.0).abs() <= SYNC_TOL,
        detail: format!(
            "ssim(a,a) {ss}; psnr 16/255 {ps:.5} dB; snr {sn:.10} dB; sync matched {pos:.12} negated {neg:.12}"
        ),
    }
}

fn main() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let test = make_synthetic_dataset(RUNS, TEST_SEED, &dataset_config()).unwrap();

    lines.push(oracles());
    lines.push(gradients());
    lines.push(metric_sanity(&test[0]));

    let model = train();
    let t0 = Instant::now();
    let results: Vec<ItemResult> = test
        .iter()
        .enumerate()
        .map(|(i, clip)| {
            let r = evaluate_item(&model, clip);
            println!(
                "item {i:2} {}: nullifying {:.4} -> {:.4}, variance {:.4e} -> {:.4e}, sync clean {:.3} image {:.3} audio {:.3} multi {:.3} jpeg {:.3} gate {:.3}",
                clip.id, r.nullifying.0, r.nullifying.1, r.variance.0, r.variance.1,
                r.sync_clean, r.sync_image, r.sync_audio, r.sync_multi, r.sync_jpeg_multi, r.sync_gate_multi
            );
            r
        })
        .collect();
    let took = t0.elapsed();
    lines.extend(budgets(&results));
    lines.push(effectiveness(&results, took));
    lines.push(purification(&results));
    lines.push(determinism(&model, &test[0]));

    lines.sort_by_key(|l| l.id);
    println!();
    for l in &lines {
        println!(
            "{} [{}] {}: {}",
            if l.pass { "PASS" } else { "FAIL" },
            l.id,
            l.name,
            l.detail
        );
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    println!(
        "{} of {} criteria passed in {:.1} s",
        lines.len() - failed,
        lines.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
