//! Image stream: nullifying loss, multi-interval timestep sampling and
//! L∞-projected sign-gradient descent on the reference portrait.
//!
//! The nullifying loss rewards a denoiser that reproduces the injected noise
//! exactly, i.e. one whose output collapses onto the (static) reference. Clip
//! losses average the per-frame loss over the selected frames.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, StdStream};
use crate::tensor::Tensor;
use crate::victim::encoder::encode_on;
use crate::victim::{AudioClip, ClipCondition, DenoiseInputs, Denoiser, LatentGrid, PortraitImage};

/// Closed timestep range `[lo, hi]`, written `[lo, hi]` in JSON.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct TimestepInterval {
    pub lo: usize,
    pub hi: usize,
}

impl TimestepInterval {
    pub const fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    /// The interval clamped to `[1, steps]`; empty results are errors.
    pub fn clamped(self, steps: usize) -> Result<Self> {
        let lo = self.lo.max(1);
        let hi = self.hi.min(steps);
        if lo > hi {
            return Err(Error::Config(format!(
                "interval {self} is empty after clamping to [1, {steps}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(self, t: usize) -> bool {
        (self.lo..=self.hi).contains(&t)
    }

    pub fn overlaps(self, other: Self) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    pub fn sample(self, rng: &mut StdStream) -> usize {
        rng::uniform_step(rng, self.lo, self.hi)
    }
}

impl From<[usize; 2]> for TimestepInterval {
    fn from([lo, hi]: [usize; 2]) -> Self {
        Self { lo, hi }
    }
}

impl From<TimestepInterval> for [usize; 2] {
    fn from(i: TimestepInterval) -> Self {
        [i.lo, i.hi]
    }
}

impl std::fmt::Display for TimestepInterval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

/// Timestep intervals and their loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntervalPlan {
    pub intervals: Vec<TimestepInterval>,
    pub weights: Vec<f64>,
}

impl Default for IntervalPlan {
    /// `[0,100] [100,200] [300,400] [900,1000]` with equal weights; `0` is
    /// clamped to step 1 at use.
    fn default() -> Self {
        Self::uniform(vec![
            TimestepInterval::new(0, 100),
            TimestepInterval::new(100, 200),
            TimestepInterval::new(300, 400),
            TimestepInterval::new(900, 1000),
        ])
    }
}

impl IntervalPlan {
    /// Weights `1/K`.
    pub fn uniform(intervals: Vec<TimestepInterval>) -> Self {
        let k = intervals.len().max(1) as f64;
        let weights = vec![1.0 / k; intervals.len()];
        Self { intervals, weights }
    }

    /// One interval with weight 1.
    pub fn single(interval: TimestepInterval) -> Self {
        Self {
            intervals: vec![interval],
            weights: vec![1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Checks the plan against a schedule of `steps` and returns the clamped intervals.
    pub fn resolve(&self, steps: usize) -> Result<Vec<TimestepInterval>> {
        if self.intervals.is_empty() {
            return Err(Error::Config("interval plan needs at least one interval".into()));
        }
        if self.weights.len() != self.intervals.len() {
            return Err(Error::Config(format!(
                "{} intervals but {} weights",
                self.intervals.len(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("interval weights must be finite and nonnegative".into()));
        }
        if !self.weights.iter().any(|&w| w > 0.0) {
            return Err(Error::Config("at least one interval weight must be positive".into()));
        }
        self.intervals.iter().map(|i| i.clamped(steps)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageAttackConfig {
    /// L∞ budget in pixel units.
    pub tau: f64,
    pub eta_p: f64,
    pub iters: usize,
    pub seed: u64,
    /// Frames drawn at random per iteration (a stochastic estimate of the
    /// clip loss); `None` uses every frame.
    pub frames_per_step: Option<usize>,
}

impl Default for ImageAttackConfig {
    fn default() -> Self {
        Self {
            tau: 16.0 / 255.0,
            eta_p: 1.0 / 255.0,
            iters: 100,
            seed: 0,
            frames_per_step: Some(5),
        }
    }
}

impl ImageAttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        if !(self.eta_p > 0.0 && self.eta_p <= self.tau) {
            return Err(Error::Config(format!("eta_p must be in (0, tau], got {}", self.eta_p)));
        }
        if self.frames_per_step == Some(0) {
            return Err(Error::Config("frames_per_step must be positive".into()));
        }
        Ok(())
    }
}

/// Anchor, iterate and history of one image attack.
#[derive(Clone, Debug)]
pub struct PerturbationState {
    pub anchor: PortraitImage,
    pub current: PortraitImage,
    pub iteration: usize,
    pub loss_trace: Vec<f64>,
    /// `‖Pⁿ − P⁰‖∞` after each step.
    pub linf_trace: Vec<f64>,
}

impl PerturbationState {
    pub fn new(anchor: PortraitImage) -> Self {
        Self {
            current: anchor.clone(),
            anchor,
            iteration: 0,
            loss_trace: Vec::new(),
            linf_trace: Vec::new(),
        }
    }

    pub fn linf(&self) -> f64 {
        self.current.max_abs_diff(&self.anchor)
    }
}

/// Sign with `sign(0) = 0`.
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Pⁿ⁺¹ = clamp(Pⁿ − η·sign(g), max(P⁰−τ, 0), min(P⁰+τ, 1))`.
pub fn pgd_image_step(state: &mut PerturbationState, grad: &Tensor, cfg: &ImageAttackConfig) -> Result<()> {
    grad.ensure_shape(state.current.tensor().shape())?;
    let next: Vec<f64> = state
        .current
        .data()
        .iter()
        .zip(state.anchor.data())
        .zip(grad.data())
        .map(|((&p, &a), &g)| {
            let lo = (a - cfg.tau).max(0.0);
            let hi = (a + cfg.tau).min(1.0);
            (p - cfg.eta_p * sign(g)).clamp(lo, hi)
        })
        .collect();
    state.current = PortraitImage::new(Tensor::new(state.current.tensor().shape().to_vec(), next)?)?;
    state.iteration += 1;
    state.linf_trace.push(state.linf());
    Ok(())
}

/// Records the clip nullifying loss for pixels already on `tape`.
pub(crate) fn record_nullifying(
    tape: &mut Tape,
    model: &dyn Denoiser,
    pixels: Var,
    tokens: &[Var],
    t: usize,
    eps: &Tensor,
) -> Result<Var> {
    let (sa, sb) = model.schedule().noising_coefficients(t)?;
    let z0 = encode_on(tape, pixels);
    tape.value(z0).ensure_shape(eps.shape())?;
    let eps_var = tape.constant(eps.clone());
    let a = tape.scale(z0, sa);
    let b = tape.scale(eps_var, sb);
    let noisy = tape.add(a, b);
    let mut terms = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        let inputs = DenoiseInputs {
            noisy,
            t,
            reference: z0,
            tokens: tok,
        };
        let pred = model.predict(tape, &inputs, &[])?;
        let diff = tape.sub(eps_var, pred.eps);
        terms.push(tape.sum_squares(diff));
    }
    let total = tape.sum_scalars(&terms);
    Ok(tape.scale(total, 1.0 / tokens.len() as f64))
}

fn latent_shape(image: &PortraitImage) -> [usize; 3] {
    [3, image.height() / 2, image.width() / 2]
}

/// `‖eps − ε_θ(z_t, t, P, A)‖²`, averaged over the frames of `cond`.
pub fn nullifying_loss(
    model: &dyn Denoiser,
    image: &PortraitImage,
    cond: &ClipCondition,
    t: usize,
    eps: &LatentGrid,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pixels = tape.constant(image.tensor().clone());
    let tokens = cond.record_tokens(&mut tape, false);
    let loss = record_nullifying(&mut tape, model, pixels, &tokens, t, eps.tensor())?;
    Ok(tape.value(loss).item())
}

/// Nullifying loss and its gradient with respect to the pixels.
pub fn nullifying_loss_grad(
    model: &dyn Denoiser,
    image: &PortraitImage,
    cond: &ClipCondition,
    t: usize,
    eps: &LatentGrid,
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let pixels = tape.leaf(image.tensor().clone(), true);
    let tokens = cond.record_tokens(&mut tape, false);
    let loss = record_nullifying(&mut tape, model, pixels, &tokens, t, eps.tensor())?;
    let mut grads = tape.backward(loss);
    let g = grads
        .take(pixels)
        .unwrap_or_else(|| Tensor::zeros(image.tensor().shape()));
    Ok((tape.value(loss).item(), g))
}

/// Draws `(t_k, eps_k)` for every interval, in plan order.
pub fn draw_interval_samples(
    model: &dyn Denoiser,
    image: &PortraitImage,
    plan: &IntervalPlan,
    rng: &mut StdStream,
) -> Result<Vec<(usize, Tensor)>> {
    let intervals = plan.resolve(model.schedule().steps())?;
    let shape = latent_shape(image);
    Ok(intervals
        .iter()
        .map(|i| {
            let t = i.sample(rng);
            (t, rng::gaussian(rng, &shape))
        })
        .collect())
}

fn mis_on_tape(
    model: &dyn Denoiser,
    image: &PortraitImage,
    cond: &ClipCondition,
    plan: &IntervalPlan,
    rng: &mut StdStream,
    want_grad: bool,
) -> Result<(f64, Option<Tensor>)> {
    let draws = draw_interval_samples(model, image, plan, rng)?;
    let mut tape = Tape::new();
    let pixels = tape.leaf(image.tensor().clone(), want_grad);
    let tokens = cond.record_tokens(&mut tape, false);
    let mut terms = Vec::with_capacity(draws.len());
    for ((t, eps), &w) in draws.iter().zip(&plan.weights) {
        if w == 0.0 {
            continue;
        }
        let l = record_nullifying(&mut tape, model, pixels, &tokens, *t, eps)?;
        terms.push(tape.scale(l, w));
    }
    let total = tape.sum_scalars(&terms);
    let value = tape.value(total).item();
    let grad = want_grad.then(|| {
        tape.backward(total)
            .take(pixels)
            .unwrap_or_else(|| Tensor::zeros(image.tensor().shape()))
    });
    Ok((value, grad))
}

/// `Σ_k λ_k · nullifying_loss(t_k, eps_k)` with one `(t_k, eps_k)` drawn per interval.
pub fn mis_loss(
    model: &dyn Denoiser,
    image: &PortraitImage,
    cond: &ClipCondition,
    plan: &IntervalPlan,
    rng: &mut StdStream,
) -> Result<f64> {
    Ok(mis_on_tape(model, image, cond, plan, rng, false)?.0)
}

pub fn mis_loss_grad(
    model: &dyn Denoiser,
    image: &PortraitImage,
    cond: &ClipCondition,
    plan: &IntervalPlan,
    rng: &mut StdStream,
) -> Result<(f64, Tensor)> {
    let (v, g) = mis_on_tape(model, image, cond, plan, rng, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// Per-iteration history of [`attack_image`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageAttackTrace {
    pub losses: Vec<f64>,
    pub linf: Vec<f64>,
}

/// Projected sign-gradient descent on the multi-interval nullifying loss.
pub fn attack_image(
    model: &dyn Denoiser,
    anchor: &PortraitImage,
    audio: &AudioClip,
    cfg: &ImageAttackConfig,
    plan: &IntervalPlan,
) -> Result<(PortraitImage, ImageAttackTrace)> {
    cfg.validate()?;
    plan.resolve(model.schedule().steps())?;
    let full = ClipCondition::all(model, audio)?;
    let n_frames = full.frames().len();
    let mut draws = rng::derived_stream(cfg.seed, "image-attack");
    let mut frame_rng = rng::derived_stream(cfg.seed, "image-attack/frames");
    let mut state = PerturbationState::new(anchor.clone());

    for n in 0..cfg.iters {
        let cond = match cfg.frames_per_step {
            Some(m) if m < n_frames => {
                let mut picked = index::sample(&mut frame_rng, n_frames, m).into_vec();
                picked.sort_unstable();
                full.with_frames(picked)?
            }
            _ => full.clone(),
        };
        let (loss, grad) = mis_loss_grad(model, &state.current, &cond, plan, &mut draws)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Attack {
                iteration: n,
                detail: format!("image loss became {loss}"),
            });
        }
        state.loss_trace.push(loss);
        pgd_image_step(&mut state, &grad, cfg)?;
        log::trace!("image iteration {n} loss {loss:.6}");
    }
    let trace = ImageAttackTrace {
        losses: state.loss_trace,
        linf: state.linf_trace,
    };
    Ok((state.current, trace))
}

/// Fixed `(t, eps)` pairs for before/after comparisons.
pub fn frozen_grid(timesteps: &[usize], image: &PortraitImage, seed: u64) -> Vec<(usize, LatentGrid)> {
    let mut rng = rng::derived_stream(seed, "frozen-grid");
    let shape = latent_shape(image);
    timesteps
        .iter()
        .map(|&t| {
            let eps = LatentGrid::new(rng::gaussian(&mut rng, &shape)).expect("gaussian draws are finite");
            (t, eps)
        })
        .collect()
}

/// Timesteps of the default nullifying validation grid.
pub const VALIDATION_TIMESTEPS: [usize; 4] = [50, 150, 350, 950];

/// Mean nullifying loss over a frozen grid, every frame of `audio`.
pub fn nullifying_validation_loss(
    model: &dyn Denoiser,
    image: &PortraitImage,
    audio: &AudioClip,
    grid: &[(usize, LatentGrid)],
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Config("validation grid is empty".into()));
    }
    let cond = ClipCondition::all(model, audio)?;
    let mut total = 0.0;
    for (t, eps) in grid {
        total += nullifying_loss(model, image, &cond, *t, eps)?;
    }
    Ok(total / grid.len() as f64)
}
