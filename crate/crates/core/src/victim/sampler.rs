//! Deterministic DDIM-style frame generation.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

use super::encoder::{decode, encode_on};
use super::media::{AudioClip, FrameSequence, LatentGrid, PortraitImage};
use super::model::{DenoiseInputs, Denoiser};

/// Descending timesteps from `T` to 1, `steps` of them.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    if steps <= 1 {
        return vec![total];
    }
    let steps = steps.min(total);
    (0..steps)
        .map(|i| {
            let frac = i as f64 / (steps - 1) as f64;
            (total as f64 - frac * (total - 1) as f64).round() as usize
        })
        .collect()
}

/// Generates one frame per 40 ms of `audio`.
///
/// Frame `f` starts from its own Gaussian latent (stream derived from `(seed, f)`)
/// and is denoised independently, conditioned on `reference` and the frame's audio tokens.
/// The predicted clean latent is clipped to `[0, 1]` at each step.
pub fn sample_frames(
    model: &dyn Denoiser,
    reference: &PortraitImage,
    audio: &AudioClip,
    steps: usize,
    seed: u64,
) -> Result<FrameSequence> {
    if steps == 0 {
        return Err(Error::Config("sampling needs at least one step".into()));
    }
    let features = model.features().extract(audio)?;
    let shape = [3, reference.height() / 2, reference.width() / 2];
    let sched = model.schedule();
    let timesteps = ddim_timesteps(sched.steps(), steps);
    let radius = model.window_radius();

    let frames = (0..features.frames())
        .map(|f| {
            let tokens = features.window(f, radius);
            let mut z = rng::gaussian(&mut rng::derived_stream(seed, &format!("frame/{f}")), &shape);
            let mut x0 = Tensor::zeros(&shape);
            for (i, &t) in timesteps.iter().enumerate() {
                let eps = predict_eps(model, reference, &z, t, &tokens)?;
                let ab = sched.alpha_bar(t);
                let ab_prev = timesteps.get(i + 1).map_or(1.0, |&tp| sched.alpha_bar(tp));
                let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
                let x0_data: Vec<f64> = z
                    .data()
                    .iter()
                    .zip(eps.data())
                    .map(|(zv, ev)| ((zv - sb * ev) / sa).clamp(0.0, 1.0))
                    .collect();
                let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
                let next: Vec<f64> = x0_data.iter().zip(eps.data()).map(|(x, e)| pa * x + pb * e).collect();
                x0 = Tensor::from_parts(shape.to_vec(), x0_data);
                z = Tensor::from_parts(shape.to_vec(), next);
            }
            decode(&LatentGrid::new(x0)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameSequence { frames })
}

fn predict_eps(
    model: &dyn Denoiser,
    reference: &PortraitImage,
    z: &Tensor,
    t: usize,
    tokens: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pixels = tape.constant(reference.tensor().clone());
    let reference = encode_on(&mut tape, pixels);
    let inputs = DenoiseInputs {
        noisy: tape.constant(z.clone()),
        t,
        reference,
        tokens: tape.constant(tokens.clone()),
    };
    let pred = model.predict(&mut tape, &inputs, &[])?;
    Ok(tape.value(pred.eps).clone())
}
