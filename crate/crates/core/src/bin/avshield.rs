use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use avshield::harness::config::{AblationKind, PairSpec, SyntheticSpec};
use avshield::harness::{run, Mode, RunConfig, ENV_OUT_DIR};

/// Protective perturbations for portrait/audio pairs against a toy talking-head diffusion model.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the toy victim on a synthetic corpus.
    TrainToy(Common),
    /// Perturb the portrait only.
    ProtectImage(Common),
    /// Perturb the audio only.
    ProtectAudio(Common),
    /// Perturb both streams.
    Protect(Common),
    /// Generate frames from unmodified inputs.
    Generate(Common),
    /// Apply purifiers to the inputs.
    Purify(Common),
    /// Protection modes crossed with purifiers.
    Evaluate(Common),
    /// Interval or layer sweeps.
    Ablate(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Intervals,
    Layers,
    UnitIntervals,
}

#[derive(Args)]
struct Common {
    /// JSON run config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Master seed (required for protect and ablate modes).
    #[arg(long)]
    seed: Option<u64>,
    /// Root for run directories.
    #[arg(long, env = ENV_OUT_DIR)]
    out: Option<PathBuf>,
    /// Portrait PNG; pair with --audio.
    #[arg(long, requires = "audio")]
    image: Option<PathBuf>,
    /// Audio WAV; pair with --image.
    #[arg(long, requires = "image")]
    audio: Option<PathBuf>,
    /// Directory of name.png + name.wav pairs.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Add this many synthetic pairs.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    synthetic_seed: u64,
    /// Side of synthetic portraits (and of training images for train-toy).
    #[arg(long)]
    image_size: Option<usize>,
    /// Attack iterations for both streams.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    sample_steps: Option<usize>,
    /// Training epochs for train-toy.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    ablation: Option<Kind>,
    #[arg(long)]
    save_frames: bool,
}

impl Cmd {
    fn split(self) -> (Mode, Common) {
        match self {
            Cmd::TrainToy(c) => (Mode::TrainToy, c),
            Cmd::ProtectImage(c) => (Mode::ProtectImage, c),
            Cmd::ProtectAudio(c) => (Mode::ProtectAudio, c),
            Cmd::Protect(c) => (Mode::Protect, c),
            Cmd::Generate(c) => (Mode::Generate, c),
            Cmd::Purify(c) => (Mode::Purify, c),
            Cmd::Evaluate(c) => (Mode::Evaluate, c),
            Cmd::Ablate(c) => (Mode::Ablate, c),
        }
    }
}

fn build_config(mode: Mode, a: Common) -> avshield::Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.mode = mode;
    if mode.needs_seed() && a.seed.is_none() {
        return Err(avshield::Error::Config(format!("{mode} requires --seed")));
    }
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint;
    }
    if a.seed.is_some() {
        cfg.seed = a.seed;
    }
    if a.out.is_some() {
        cfg.output_dir = a.out;
    }
    if let (Some(image), Some(audio)) = (a.image, a.audio) {
        cfg.inputs.pairs.push(PairSpec {
            image,
            audio,
            mouth_region: None,
        });
    }
    if a.dir.is_some() {
        cfg.inputs.dir = a.dir;
    }
    if let Some(count) = a.synthetic {
        let mut syn = cfg.inputs.synthetic.unwrap_or_default();
        syn.count = count;
        syn.seed = a.synthetic_seed;
        cfg.inputs.synthetic = Some(syn);
    }
    if let Some(size) = a.image_size {
        cfg.train.dataset.image_size = size;
        let syn: &mut SyntheticSpec = cfg.inputs.synthetic.get_or_insert_with(|| SyntheticSpec {
            count: 0,
            ..SyntheticSpec::default()
        });
        syn.dataset.image_size = size;
    }
    if let Some(n) = a.iters {
        cfg.image_attack.iters = n;
        cfg.audio_attack.iters = n;
    }
    if let Some(n) = a.sample_steps {
        cfg.sample_steps = n;
    }
    if let Some(n) = a.epochs {
        cfg.train.train.epochs = n;
    }
    if let Some(k) = a.ablation {
        cfg.ablation.kind = match k {
            Kind::Intervals => AblationKind::Intervals,
            Kind::Layers => AblationKind::Layers,
            Kind::UnitIntervals => AblationKind::UnitIntervals,
        };
    }
    cfg.save_frames |= a.save_frames;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (mode, common) = Cli::parse().cmd.split();
    let outcome = build_config(mode, common).and_then(|cfg| run(&cfg));
    match outcome {
        Ok(out) => {
            println!("run directory: {}", out.dir.display());
            let failed = out.report.records.iter().filter(|r| r.error.is_some()).count();
            println!(
                "{} records ({failed} failed), {} input errors",
                out.report.records.len(),
                out.report.errors.len()
            );
            for (cell, metrics) in &out.report.aggregates {
                println!("[{cell}]");
                for (name, agg) in metrics {
                    println!(
                        "  {name:<20} mean {:>12.6} median {:>12.6} n={}",
                        agg.mean, agg.median, agg.count
                    );
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
