//! Audio stream: cross-attention fooling (flattening the spatial variance of
//! audio-conditioned attention) under a peak-relative dB budget.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image_attack::{sign, TimestepInterval};
use crate::rng::{self, StdStream};
use crate::tensor::Tensor;
use crate::victim::encoder::encode_on;
use crate::victim::{
    AttentionMap, AudioClip, ClipCondition, DenoiseInputs, Denoiser, LatentGrid, Layer, LayerBranchUnit, PortraitImage,
};

fn peak(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// `20·log10(max |x_i|)`.
pub fn db(x: &[f64]) -> Result<f64> {
    let p = peak(x);
    if p == 0.0 {
        return Err(Error::UndefinedLevel);
    }
    Ok(20.0 * p.log10())
}

/// `db(delta) − db(x)`; an all-zero `delta` gives `-inf`.
pub fn db_x(delta: &[f64], x: &[f64]) -> Result<f64> {
    let reference = db(x)?;
    if peak(delta) == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(db(delta)? - reference)
}

/// Largest per-sample perturbation allowed by `bound` relative to `x`.
pub fn db_cap(x: &[f64], bound: f64) -> Result<f64> {
    let p = peak(x);
    if p == 0.0 {
        return Err(Error::UndefinedLevel);
    }
    Ok(p * 10f64.powf(bound / 20.0))
}

/// Clamps every `|delta_i|` to `peak(x)·10^(bound/20)`.
pub fn project_db(delta: &[f64], x: &[f64], bound: f64) -> Result<Vec<f64>> {
    let cap = db_cap(x, bound)?;
    Ok(delta.iter().map(|d| d.clamp(-cap, cap)).collect())
}

/// Population variance over queries of each key column, averaged over keys.
pub fn spatial_variance(map: &AttentionMap) -> f64 {
    let (q, j) = (map.queries(), map.tokens());
    let d = map.tensor().data();
    let mut total = 0.0;
    for c in 0..j {
        if (1..q).all(|r| d[r * j + c] == d[c]) {
            continue;
        }
        let mean = (0..q).map(|r| d[r * j + c]).sum::<f64>() / q as f64;
        total += (0..q).map(|r| (d[r * j + c] - mean).powi(2)).sum::<f64>() / q as f64;
    }
    total / j as f64
}

/// One interval and the units attacked when a timestep is drawn from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CafTarget {
    pub interval: TimestepInterval,
    pub units: Vec<LayerBranchUnit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CafTargetPlan {
    pub entries: Vec<CafTarget>,
}

impl Default for CafTargetPlan {
    fn default() -> Self {
        use crate::victim::Branch::{Expression, Lip};
        let u = LayerBranchUnit::new;
        Self {
            entries: vec![
                CafTarget {
                    interval: TimestepInterval::new(1, 100),
                    units: vec![u(Layer::Up1, Lip)],
                },
                CafTarget {
                    interval: TimestepInterval::new(400, 600),
                    units: vec![u(Layer::Mid0, Lip), u(Layer::Mid0, Expression)],
                },
                CafTarget {
                    interval: TimestepInterval::new(900, 1000),
                    units: vec![u(Layer::Mid0, Lip), u(Layer::Down0, Lip)],
                },
            ],
        }
    }
}

impl CafTargetPlan {
    /// Checks the plan against `model` and returns entries with clamped intervals.
    pub fn resolve(&self, model: &dyn Denoiser) -> Result<Vec<CafTarget>> {
        if self.entries.is_empty() {
            return Err(Error::Config("target plan needs at least one entry".into()));
        }
        let steps = model.schedule().steps();
        let mut out: Vec<CafTarget> = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if e.units.is_empty() {
                return Err(Error::Config(format!("target set for {} is empty", e.interval)));
            }
            model.check_taps(&e.units)?;
            let interval = e.interval.clamped(steps)?;
            if let Some(o) = out.iter().find(|o| o.interval.overlaps(interval)) {
                return Err(Error::Config(format!(
                    "intervals {} and {interval} overlap",
                    o.interval
                )));
            }
            out.push(CafTarget {
                interval,
                units: e.units.clone(),
            });
        }
        Ok(out)
    }

    /// Distinct units across all entries, sorted.
    pub fn all_units(&self) -> Vec<LayerBranchUnit> {
        let mut u: Vec<_> = self.entries.iter().flat_map(|e| e.units.iter().copied()).collect();
        u.sort();
        u.dedup();
        u
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioAttackConfig {
    /// Bound on `dB_x(δ)`.
    pub db_bound: f64,
    /// Step size in sample units; `None` uses `cap / 25`.
    pub eta_a: Option<f64>,
    pub iters: usize,
    pub seed: u64,
    /// Frames drawn at random per iteration (a stochastic estimate of the
    /// clip loss); `None` uses every frame.
    pub frames_per_step: Option<usize>,
}

impl Default for AudioAttackConfig {
    fn default() -> Self {
        Self {
            db_bound: -30.0,
            eta_a: None,
            iters: 100,
            seed: 0,
            frames_per_step: Some(5),
        }
    }
}

impl AudioAttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.db_bound < 0.0) {
            return Err(Error::Config(format!(
                "db_bound must be negative, got {}",
                self.db_bound
            )));
        }
        if let Some(eta) = self.eta_a {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::Config(format!("eta_a must be positive, got {eta}")));
            }
        }
        if self.frames_per_step == Some(0) {
            return Err(Error::Config("frames_per_step must be positive".into()));
        }
        Ok(())
    }

    pub fn step_size(&self, anchor: &AudioClip) -> Result<f64> {
        match self.eta_a {
            Some(eta) => Ok(eta),
            None => Ok(db_cap(anchor.samples(), self.db_bound)? / 25.0),
        }
    }
}

/// Anchor, iterate and history of one audio attack.
#[derive(Clone, Debug)]
pub struct AudioPerturbationState {
    pub anchor: AudioClip,
    pub current: AudioClip,
    pub iteration: usize,
    pub loss_trace: Vec<f64>,
    /// `dB_{A⁰}(Aⁿ − A⁰)` after each step.
    pub db_trace: Vec<f64>,
}

impl AudioPerturbationState {
    pub fn new(anchor: AudioClip) -> Self {
        Self {
            current: anchor.clone(),
            anchor,
            iteration: 0,
            loss_trace: Vec::new(),
            db_trace: Vec::new(),
        }
    }

    pub fn delta(&self) -> Vec<f64> {
        self.current
            .samples()
            .iter()
            .zip(self.anchor.samples())
            .map(|(a, b)| a - b)
            .collect()
    }

    pub fn level(&self) -> Result<f64> {
        db_x(&self.delta(), self.anchor.samples())
    }
}

/// Sign step, dB projection and `[-1, 1]` clamp.
pub fn pgd_audio_step(state: &mut AudioPerturbationState, grad: &[f64], eta: f64, bound: f64) -> Result<()> {
    if grad.len() != state.current.len() {
        return Err(Error::Shape {
            expected: vec![state.current.len()],
            actual: vec![grad.len()],
        });
    }
    let anchor = state.anchor.samples();
    let stepped: Vec<f64> = state
        .current
        .samples()
        .iter()
        .zip(anchor)
        .zip(grad)
        .map(|((&a, &a0), &g)| a - eta * sign(g) - a0)
        .collect();
    let delta = project_db(&stepped, anchor, bound)?;
    let next = anchor
        .iter()
        .zip(&delta)
        .map(|(a0, d)| (a0 + d).clamp(-1.0, 1.0))
        .collect();
    state.current = AudioClip::new(next)?;
    state.iteration += 1;
    state.db_trace.push(state.level()?);
    Ok(())
}

/// Records the mean spatial variance of `units` over the frames in `tokens`.
fn record_caf(
    tape: &mut Tape,
    model: &dyn Denoiser,
    image: &PortraitImage,
    tokens: &[Var],
    t: usize,
    eps: &Tensor,
    units: &[LayerBranchUnit],
) -> Result<Var> {
    if units.is_empty() {
        return Err(Error::Config("target unit set is empty".into()));
    }
    model.check_taps(units)?;
    let (sa, sb) = model.schedule().noising_coefficients(t)?;
    let pixels = tape.constant(image.tensor().clone());
    let z0 = encode_on(tape, pixels);
    tape.value(z0).ensure_shape(eps.shape())?;
    let eps_var = tape.constant(eps.clone());
    let a = tape.scale(z0, sa);
    let b = tape.scale(eps_var, sb);
    let noisy = tape.add(a, b);
    let mut per_frame = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        let inputs = DenoiseInputs {
            noisy,
            t,
            reference: z0,
            tokens: tok,
        };
        let pred = model.predict(tape, &inputs, units)?;
        let vars: Vec<Var> = pred.maps.iter().map(|&(_, m)| tape.column_variance(m)).collect();
        let s = tape.sum_scalars(&vars);
        per_frame.push(tape.scale(s, 1.0 / units.len() as f64));
    }
    let total = tape.sum_scalars(&per_frame);
    Ok(tape.scale(total, 1.0 / tokens.len() as f64))
}

/// CAF loss at a fixed `(t, eps)`: mean over `units` and over the frames of `cond`.
pub fn caf_loss_at(
    model: &dyn Denoiser,
    image: &PortraitImage,
    cond: &ClipCondition,
    t: usize,
    eps: &LatentGrid,
    units: &[LayerBranchUnit],
) -> Result<f64> {
    let mut tape = Tape::new();
    let tokens = cond.record_tokens(&mut tape, false);
    let loss = record_caf(&mut tape, model, image, &tokens, t, eps.tensor(), units)?;
    Ok(tape.value(loss).item())
}

/// CAF loss at a fixed `(t, eps)` and its gradient with respect to the samples of `audio`.
///
/// `frames` selects the frames to average over; `None` uses all of them.
pub fn caf_loss_grad_at(
    model: &dyn Denoiser,
    image: &PortraitImage,
    audio: &AudioClip,
    frames: Option<Vec<usize>>,
    t: usize,
    eps: &LatentGrid,
    units: &[LayerBranchUnit],
) -> Result<(f64, Vec<f64>)> {
    let full = ClipCondition::all(model, audio)?;
    let cond = match frames {
        Some(f) => full.with_frames(f)?,
        None => full,
    };
    let mut tape = Tape::new();
    let tokens = cond.record_tokens(&mut tape, true);
    let loss = record_caf(&mut tape, model, image, &tokens, t, eps.tensor(), units)?;
    let mut grads = tape.backward(loss);
    let token_grads: Vec<Option<Tensor>> = tokens.iter().map(|&v| grads.take(v)).collect();
    let feature_grad = cond.scatter(&token_grads);
    let sample_grad = model.features().backward(audio.samples(), &feature_grad)?;
    Ok((tape.value(loss).item(), sample_grad))
}

fn latent_shape(image: &PortraitImage) -> [usize; 3] {
    [3, image.height() / 2, image.width() / 2]
}

/// Draws `t ~ U(interval)` then Gaussian `eps`, and evaluates the CAF loss over every frame.
pub fn caf_loss(
    model: &dyn Denoiser,
    image: &PortraitImage,
    audio: &AudioClip,
    interval: TimestepInterval,
    units: &[LayerBranchUnit],
    rng: &mut StdStream,
) -> Result<f64> {
    if units.is_empty() {
        return Err(Error::Config("target unit set is empty".into()));
    }
    let interval = interval.clamped(model.schedule().steps())?;
    let t = interval.sample(rng);
    let eps = LatentGrid::new(rng::gaussian(rng, &latent_shape(image)))?;
    let cond = ClipCondition::all(model, audio)?;
    caf_loss_at(model, image, &cond, t, &eps, units)
}

/// Per-iteration history of [`attack_audio`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AudioAttackTrace {
    pub losses: Vec<f64>,
    /// Index of the plan entry drawn at each iteration.
    pub entries: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub db: Vec<f64>,
}

/// Sign-gradient descent on the CAF loss, one plan entry and timestep per iteration.
///
/// `image` is the clean reference portrait; it is never modified.
pub fn attack_audio(
    model: &dyn Denoiser,
    image: &PortraitImage,
    anchor: &AudioClip,
    cfg: &AudioAttackConfig,
    plan: &CafTargetPlan,
) -> Result<(AudioClip, AudioAttackTrace)> {
    cfg.validate()?;
    let entries = plan.resolve(model)?;
    let eta = cfg.step_size(anchor)?;
    let n_frames = anchor.frame_count();
    let mut draws = rng::derived_stream(cfg.seed, "audio-attack");
    let mut frame_rng = rng::derived_stream(cfg.seed, "audio-attack/frames");
    let shape = latent_shape(image);
    let mut state = AudioPerturbationState::new(anchor.clone());
    let mut trace = AudioAttackTrace::default();

    for n in 0..cfg.iters {
        let k = draws.random_range(0..entries.len());
        let entry = &entries[k];
        let t = entry.interval.sample(&mut draws);
        let eps = LatentGrid::new(rng::gaussian(&mut draws, &shape))?;
        let frames = match cfg.frames_per_step {
            Some(m) if m < n_frames => {
                let mut picked = index::sample(&mut frame_rng, n_frames, m).into_vec();
                picked.sort_unstable();
                Some(picked)
            }
            _ => None,
        };
        let (loss, grad) = caf_loss_grad_at(model, image, &state.current, frames, t, &eps, &entry.units)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Attack {
                iteration: n,
                detail: format!("audio loss became {loss}"),
            });
        }
        state.loss_trace.push(loss);
        pgd_audio_step(&mut state, &grad, eta, cfg.db_bound)?;
        trace.entries.push(k);
        trace.timesteps.push(t);
        log::trace!("audio iteration {n} entry {k} t {t} loss {loss:.6}");
    }
    trace.losses = state.loss_trace;
    trace.db = state.db_trace;
    Ok((state.current, trace))
}

/// One frozen `(t, eps)` per plan entry, `t` at the interval midpoint.
pub fn plan_grid(
    plan: &CafTargetPlan,
    model: &dyn Denoiser,
    image: &PortraitImage,
    seed: u64,
) -> Result<Vec<(usize, LatentGrid)>> {
    let entries = plan.resolve(model)?;
    let mut rng = rng::derived_stream(seed, "caf-grid");
    entries
        .iter()
        .map(|e| {
            let t = (e.interval.lo + e.interval.hi) / 2;
            Ok((t, LatentGrid::new(rng::gaussian(&mut rng, &latent_shape(image)))?))
        })
        .collect()
}

/// Mean targeted spatial variance over plan entries at their frozen grid points.
pub fn targeted_variance(
    model: &dyn Denoiser,
    image: &PortraitImage,
    audio: &AudioClip,
    plan: &CafTargetPlan,
    grid: &[(usize, LatentGrid)],
) -> Result<f64> {
    let entries = plan.resolve(model)?;
    if grid.len() != entries.len() {
        return Err(Error::Config(format!(
            "grid has {} points for {} plan entries",
            grid.len(),
            entries.len()
        )));
    }
    let cond = ClipCondition::all(model, audio)?;
    let mut total = 0.0;
    for (e, (t, eps)) in entries.iter().zip(grid) {
        total += caf_loss_at(model, image, &cond, *t, eps, &e.units)?;
    }
    Ok(total / entries.len() as f64)
}
