//! Noise-prediction training of the toy victim on the synthetic corpus.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, derived_stream};
use crate::tensor::Tensor;

use super::audio_features::AudioFeatureSequence;
use super::dataset::SyntheticClip;
use super::encoder::encode_on;
use super::model::{DenoiseInputs, Denoiser, VictimModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// (clip, frame) pairs per optimiser step.
    pub batch: usize,
    pub learning_rate: f64,
    /// Frames per clip in the frozen validation set.
    pub validation_frames: usize,
    /// Per-example weight `min(snr_t, gamma) / snr_t` with `snr_t = ab_t / (1 - ab_t)`.
    /// `None` trains on the plain mean squared error.
    pub min_snr_gamma: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch: 4,
            learning_rate: 3e-3,
            validation_frames: 4,
            min_snr_gamma: Some(5.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub initial_validation: f64,
    pub final_validation: f64,
    pub steps: usize,
}

struct Prepared<'a> {
    clip: &'a SyntheticClip,
    features: AudioFeatureSequence,
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &[Tensor], lr: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            lr,
        }
    }

    fn update(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = Self::B1 * *mv + (1.0 - Self::B1) * gv;
                *vv = Self::B2 * *vv + (1.0 - Self::B2) * gv * gv;
                *pv -= self.lr * (*mv / c1) / ((*vv / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// One noised training example: `(clip, frame, t, eps)`.
#[derive(Clone, Debug)]
pub struct NoisedExample {
    pub clip: usize,
    pub frame: usize,
    pub t: usize,
    pub eps: Tensor,
}

/// Records the mean-squared noise-prediction error of `examples` on `tape`.
fn record_loss(
    model: &VictimModel,
    tape: &mut Tape,
    params: &super::model::ParamVars,
    data: &[Prepared<'_>],
    examples: &[NoisedExample],
    gamma: Option<f64>,
) -> Result<Var> {
    let sched = model.schedule();
    let mut terms = Vec::with_capacity(examples.len());
    for ex in examples {
        let item = &data[ex.clip];
        let (sa, sb) = sched.noising_coefficients(ex.t)?;
        let target = tape.constant(item.clip.targets[ex.frame].tensor().clone());
        let z0 = encode_on(tape, target);
        let eps = tape.constant(ex.eps.clone());
        let a = tape.scale(z0, sa);
        let b = tape.scale(eps, sb);
        let noisy = tape.add(a, b);
        let ref_pixels = tape.constant(item.clip.reference.tensor().clone());
        let reference = encode_on(tape, ref_pixels);
        let tokens = tape.constant(item.features.window(ex.frame, model.config().window_radius));
        let inputs = DenoiseInputs {
            noisy,
            t: ex.t,
            reference,
            tokens,
        };
        let pred = model.forward(tape, params, &inputs, &[])?;
        let diff = tape.sub(eps, pred.eps);
        let sq = tape.sum_squares(diff);
        let n = ex.eps.len() as f64;
        let w = match gamma {
            Some(g) => {
                let ab = sched.alpha_bar(ex.t);
                let snr = ab / (1.0 - ab);
                snr.min(g) / snr
            }
            None => 1.0,
        };
        terms.push(tape.scale(sq, w / n));
    }
    let total = tape.sum_scalars(&terms);
    Ok(tape.scale(total, 1.0 / examples.len() as f64))
}

fn prepare<'a>(model: &VictimModel, corpus: &'a [SyntheticClip]) -> Result<Vec<Prepared<'a>>> {
    corpus
        .iter()
        .map(|clip| {
            Ok(Prepared {
                clip,
                features: model.features().extract(&clip.audio)?,
            })
        })
        .collect()
}

fn latent_shape(clip: &SyntheticClip) -> [usize; 3] {
    [3, clip.reference.height() / 2, clip.reference.width() / 2]
}

/// Frozen validation examples: evenly spaced frames, seeded timesteps and noise.
pub fn validation_examples(
    corpus: &[SyntheticClip],
    frames_per_clip: usize,
    steps: usize,
    seed: u64,
) -> Vec<NoisedExample> {
    let mut rng = derived_stream(seed, "validation");
    let mut out = Vec::new();
    for (ci, clip) in corpus.iter().enumerate() {
        let n = clip.targets.len();
        let k = frames_per_clip.clamp(1, n);
        for j in 0..k {
            let frame = j * n / k;
            let t = rng::uniform_step(&mut rng, 1, steps);
            let eps = rng::gaussian(&mut rng, &latent_shape(clip));
            out.push(NoisedExample {
                clip: ci,
                frame,
                t,
                eps,
            });
        }
    }
    out
}

/// Mean noise-prediction error over frozen examples.
pub fn noise_prediction_loss(model: &VictimModel, corpus: &[SyntheticClip], examples: &[NoisedExample]) -> Result<f64> {
    let data = prepare(model, corpus)?;
    let mut total = 0.0;
    for chunk in examples.chunks(8) {
        let mut tape = Tape::new();
        let params = model.record_params(&mut tape, false);
        let loss = record_loss(model, &mut tape, &params, &data, chunk, None)?;
        total += tape.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Adam on the mean-squared noise-prediction error; deterministic given `seed`.
pub fn train_toy(
    mut model: VictimModel,
    corpus: &[SyntheticClip],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(VictimModel, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    if cfg.batch == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("batch must be positive and learning_rate > 0".into()));
    }
    let steps_total = model.schedule().steps();
    let validation = validation_examples(corpus, cfg.validation_frames, steps_total, seed);
    let initial_validation = noise_prediction_loss(&model, corpus, &validation)?;

    let data = prepare(&model, corpus)?;
    let mut pairs: Vec<(usize, usize)> = corpus
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| (0..c.targets.len()).map(move |f| (ci, f)))
        .collect();
    let mut rng = derived_stream(seed, "train");
    let mut adam = Adam::new(model.parameters(), cfg.learning_rate);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for _epoch in 0..cfg.epochs {
        pairs.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in pairs.chunks(cfg.batch) {
            let examples: Vec<NoisedExample> = chunk
                .iter()
                .map(|&(clip, frame)| NoisedExample {
                    clip,
                    frame,
                    t: rng::uniform_step(&mut rng, 1, steps_total),
                    eps: rng::gaussian(&mut rng, &latent_shape(&corpus[clip])),
                })
                .collect();
            let mut tape = Tape::new();
            let params = model.record_params(&mut tape, true);
            let loss = record_loss(&model, &mut tape, &params, &data, &examples, cfg.min_snr_gamma)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Training {
                    step,
                    detail: format!("loss became {value}"),
                });
            }
            let mut grads = tape.backward(loss);
            let per_param: Vec<Option<Tensor>> = params.vars().iter().map(|&v| grads.take(v)).collect();
            adam.update(model.parameters_mut(), &per_param);
            epoch_loss += value;
            batches += 1;
            step += 1;
        }
        loss_curve.push(epoch_loss / batches.max(1) as f64);
        log::debug!("epoch {} loss {:.5}", loss_curve.len(), loss_curve.last().unwrap());
    }

    let final_validation = noise_prediction_loss(&model, corpus, &validation)?;
    Ok((
        model,
        TrainReport {
            loss_curve,
            initial_validation,
            final_validation,
            steps: step,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::victim::dataset::{make_synthetic_dataset, DatasetConfig};
    use crate::victim::model::ModelConfig;
    use crate::victim::schedule::ScheduleConfig;

    fn tiny() -> (VictimModel, Vec<SyntheticClip>) {
        let cfg = ModelConfig {
            hidden: 4,
            attn_dim: 4,
            audio_dim: 4,
            time_dim: 4,
            window_radius: 1,
            bands: 4,
            zero_init_output: true,
        };
        let model = VictimModel::new(cfg, ScheduleConfig::default(), 3).unwrap();
        let data = DatasetConfig {
            image_size: 16,
            clip_seconds: 0.12,
            ..DatasetConfig::default()
        };
        (model, make_synthetic_dataset(2, 4, &data).unwrap())
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let (model, corpus) = tiny();
        let before = model.parameters().to_vec();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (trained, report) = train_toy(model, &corpus, &cfg, 1).unwrap();
        assert_eq!(trained.parameters(), before.as_slice());
        assert!(report.loss_curve.is_empty());
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let (m1, c1) = tiny();
        let (m2, c2) = tiny();
        let (a, _) = train_toy(m1, &c1, &cfg, 11).unwrap();
        let (b, _) = train_toy(m2, &c2, &cfg, 11).unwrap();
        assert_eq!(a.parameters(), b.parameters());
    }

    #[test]
    fn empty_corpus_rejected() {
        let (model, _) = tiny();
        assert!(train_toy(model, &[], &TrainConfig::default(), 0).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let (model, corpus) = tiny();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e300,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_toy(model, &corpus, &cfg, 0),
            Err(Error::Training { .. })
        ));
    }
}
