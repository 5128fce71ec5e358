//! The toy audio-conditioned denoiser `eps_theta(z_t, t, P_ref, A)`.
//!
//! Three blocks run `down_0 -> mid_0 -> up_1`. Each block is a 3x3 conv mixer with a
//! timestep bias followed by three parallel cross-attention branches (lip, expression,
//! pose) whose outputs are summed back into the block. The reference latent is
//! concatenated with the noisy latent at the input; audio enters only through the
//! nine cross-attention branches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::audio_features::AudioFeatureExtractor;
use super::encoder::{encode_on, LATENT_CHANNELS};
use super::media::{LatentGrid, PortraitImage};
use super::schedule::{DiffusionSchedule, ScheduleConfig};
use super::units::{AttentionMap, Branch, Layer, LayerBranchUnit};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channel width of every block.
    pub hidden: usize,
    /// Query/key/value width inside each attention branch.
    pub attn_dim: usize,
    /// Width of the projected audio tokens.
    pub audio_dim: usize,
    /// Width of the sinusoidal timestep embedding (even).
    pub time_dim: usize,
    /// Audio tokens per frame are the feature rows `f - r ..= f + r`.
    pub window_radius: usize,
    /// Filter-bank bands in the audio features.
    pub bands: usize,
    pub zero_init_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            attn_dim: 8,
            audio_dim: 8,
            time_dim: 16,
            window_radius: 2,
            bands: 8,
            zero_init_output: true,
        }
    }
}

impl ModelConfig {
    pub fn tokens(&self) -> usize {
        2 * self.window_radius + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.attn_dim == 0 || self.audio_dim == 0 || self.bands == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config("time_dim must be positive and even".into()));
        }
        if self.window_radius == 0 {
            return Err(Error::Config(
                "window_radius must be at least 1 (a single audio token has no spatial attention structure)".into(),
            ));
        }
        Ok(())
    }
}

/// Shapes of every named parameter, in storage order.
pub(crate) fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (c, d, da, e) = (cfg.hidden, cfg.attn_dim, cfg.audio_dim, cfg.time_dim);
    let feat = 1 + cfg.bands;
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("audio.proj.w".into(), vec![feat, da]),
        ("audio.proj.b".into(), vec![da]),
        ("audio.pos".into(), vec![cfg.tokens(), da]),
        ("down_0.conv.w".into(), vec![c, 2 * LATENT_CHANNELS, 3, 3]),
        ("down_0.conv.b".into(), vec![c]),
        ("mid_0.conv.w".into(), vec![c, c, 3, 3]),
        ("mid_0.conv.b".into(), vec![c]),
        ("up_1.conv.w".into(), vec![c, 2 * c, 3, 3]),
        ("up_1.conv.b".into(), vec![c]),
        ("out.conv.w".into(), vec![LATENT_CHANNELS, c, 3, 3]),
        ("out.conv.b".into(), vec![LATENT_CHANNELS]),
    ];
    for layer in Layer::ALL {
        out.push((format!("{}.time.w", layer.name()), vec![e, c]));
        out.push((format!("{}.time.b", layer.name()), vec![c]));
    }
    for unit in LayerBranchUnit::all() {
        out.push((format!("{unit}.wq"), vec![c, d]));
        out.push((format!("{unit}.wk"), vec![da, d]));
        out.push((format!("{unit}.wv"), vec![da, d]));
        out.push((format!("{unit}.wo"), vec![d, c]));
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct AttnSlots {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Clone, Copy, Debug)]
struct BlockSlots {
    conv_w: usize,
    conv_b: usize,
    time_w: usize,
    time_b: usize,
    attn: [AttnSlots; 3],
}

#[derive(Clone, Debug)]
struct Slots {
    proj_w: usize,
    proj_b: usize,
    pos: usize,
    blocks: [BlockSlots; 3],
    out_w: usize,
    out_b: usize,
}

impl Slots {
    fn resolve(names: &[String]) -> Self {
        let find = |n: &str| names.iter().position(|x| x == n).expect("layout contains parameter");
        let block = |layer: Layer| BlockSlots {
            conv_w: find(&format!("{}.conv.w", layer.name())),
            conv_b: find(&format!("{}.conv.b", layer.name())),
            time_w: find(&format!("{}.time.w", layer.name())),
            time_b: find(&format!("{}.time.b", layer.name())),
            attn: Branch::ALL.map(|b| {
                let u = LayerBranchUnit::new(layer, b);
                AttnSlots {
                    wq: find(&format!("{u}.wq")),
                    wk: find(&format!("{u}.wk")),
                    wv: find(&format!("{u}.wv")),
                    wo: find(&format!("{u}.wo")),
                }
            }),
        };
        Self {
            proj_w: find("audio.proj.w"),
            proj_b: find("audio.proj.b"),
            pos: find("audio.pos"),
            blocks: Layer::ALL.map(block),
            out_w: find("out.conv.w"),
            out_b: find("out.conv.b"),
        }
    }
}

/// Inputs of one noise prediction, already recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DenoiseInputs {
    /// Noisy latent `z_t`, `[C, h, w]`.
    pub noisy: Var,
    pub t: usize,
    /// Encoded reference portrait, same shape as `noisy`.
    pub reference: Var,
    /// Audio tokens `[J, D]` for the frame being generated.
    pub tokens: Var,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub eps: Var,
    /// Softmax maps `[Q, J]` for each requested unit, in request order.
    pub maps: Vec<(LayerBranchUnit, Var)>,
}

/// A differentiable noise predictor with tappable cross-attention.
pub trait Denoiser: Sync {
    fn schedule(&self) -> &DiffusionSchedule;

    fn features(&self) -> &AudioFeatureExtractor;

    fn window_radius(&self) -> usize;

    /// Units that can be tapped.
    fn units(&self) -> Vec<LayerBranchUnit> {
        LayerBranchUnit::all()
    }

    fn predict(&self, tape: &mut Tape, inputs: &DenoiseInputs, taps: &[LayerBranchUnit]) -> Result<Prediction>;

    fn check_taps(&self, taps: &[LayerBranchUnit]) -> Result<()> {
        let known = self.units();
        match taps.iter().find(|u| !known.contains(u)) {
            Some(u) => Err(Error::Config(format!("unit {u} does not exist in this model"))),
            None => Ok(()),
        }
    }
}

/// Parameter leaves recorded on one tape.
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Sinusoidal embedding `[1, dim]`: sines then cosines at geometric frequencies.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    Tensor::from_parts(vec![1, dim], out)
}

#[derive(Clone, Debug)]
pub struct VictimModel {
    config: ModelConfig,
    schedule: DiffusionSchedule,
    names: Vec<String>,
    params: Vec<Tensor>,
    slots: Slots,
    features: AudioFeatureExtractor,
    seed: u64,
}

impl VictimModel {
    /// Freshly initialised model; weights are drawn from a seeded stream.
    pub fn new(config: ModelConfig, schedule: ScheduleConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = DiffusionSchedule::new(schedule)?;
        let layout = parameter_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(layout.len());
        let mut params = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let n: usize = shape.iter().product();
            let std = init_std(&name, &shape, &config);
            let data = if std == 0.0 {
                vec![0.0; n]
            } else {
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        std * z
                    })
                    .collect()
            };
            names.push(name);
            params.push(Tensor::from_parts(shape, data));
        }
        Self::from_parts(config, schedule, names, params, seed)
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        schedule: DiffusionSchedule,
        names: Vec<String>,
        params: Vec<Tensor>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != params.len() || layout.iter().zip(&names).any(|((n, _), m)| n != m) {
            return Err(Error::Input("parameter names do not match the model layout".into()));
        }
        for ((name, shape), t) in layout.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Input(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let slots = Slots::resolve(&names);
        Ok(Self {
            features: AudioFeatureExtractor::new(config.bands)?,
            config,
            schedule,
            names,
            params,
            slots,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn named_parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn record_params(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .map(|p| tape.leaf(p.clone(), requires_grad))
                .collect(),
        )
    }

    /// Noise prediction using already-recorded parameters.
    pub fn forward(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        inputs: &DenoiseInputs,
        taps: &[LayerBranchUnit],
    ) -> Result<Prediction> {
        self.check_taps(taps)?;
        self.schedule.check_step(inputs.t)?;
        let zs = tape.value(inputs.noisy).shape().to_vec();
        tape.value(inputs.reference).ensure_shape(&zs)?;
        if zs.len() != 3 || zs[0] != LATENT_CHANNELS || !zs[1].is_multiple_of(2) || !zs[2].is_multiple_of(2) {
            return Err(Error::Input(format!(
                "latent must be [3, h, w] with even h, w; got {zs:?}"
            )));
        }
        tape.value(inputs.tokens)
            .ensure_shape(&[self.config.tokens(), self.features.dim()])?;
        let (h, w) = (zs[1], zs[2]);
        let p = |i: usize| pv.0[i];
        let s = &self.slots;

        let proj = tape.matmul(inputs.tokens, p(s.proj_w));
        let proj = tape.add_row_bias(proj, p(s.proj_b));
        let proj = tape.silu(proj);
        let audio = tape.add(proj, p(s.pos));

        let temb = tape.constant(timestep_embedding(inputs.t, self.config.time_dim));
        let mut maps = Vec::with_capacity(taps.len());

        let x = tape.concat_channels(inputs.noisy, inputs.reference);
        let h0 = self.block(tape, pv, Layer::Down0, x, temb, audio, (h, w), taps, &mut maps);
        let pooled = tape.avg_pool2(h0);
        let h1 = self.block(
            tape,
            pv,
            Layer::Mid0,
            pooled,
            temb,
            audio,
            (h / 2, w / 2),
            taps,
            &mut maps,
        );
        let up = tape.upsample2(h1);
        let skip = tape.concat_channels(up, h0);
        let h2 = self.block(tape, pv, Layer::Up1, skip, temb, audio, (h, w), taps, &mut maps);
        let eps = tape.conv3x3(h2, p(s.out_w), p(s.out_b));

        // report maps in request order
        let ordered = taps
            .iter()
            .map(|u| *maps.iter().find(|(m, _)| m == u).expect("tapped unit recorded"))
            .collect();
        Ok(Prediction { eps, maps: ordered })
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        layer: Layer,
        input: Var,
        temb: Var,
        audio: Var,
        (h, w): (usize, usize),
        taps: &[LayerBranchUnit],
        maps: &mut Vec<(LayerBranchUnit, Var)>,
    ) -> Var {
        let bs = self.slots.blocks[layer.index()];
        let p = |i: usize| pv.0[i];
        let conv = tape.conv3x3(input, p(bs.conv_w), p(bs.conv_b));
        let tb = tape.matmul(temb, p(bs.time_w));
        let tb = tape.add_row_bias(tb, p(bs.time_b));
        let tb = tape.silu(tb);
        let mixed = tape.add_channel_bias(conv, tb);
        let hidden = tape.silu(mixed);

        let queries_in = tape.channels_to_tokens(hidden);
        let scale = 1.0 / (self.config.attn_dim as f64).sqrt();
        let mut total: Option<Var> = None;
        for branch in Branch::ALL {
            let a = bs.attn[branch.index()];
            let q = tape.matmul(queries_in, p(a.wq));
            let k = tape.matmul(audio, p(a.wk));
            let v = tape.matmul(audio, p(a.wv));
            let scores = tape.matmul_nt(q, k);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            let unit = LayerBranchUnit::new(layer, branch);
            if taps.contains(&unit) {
                maps.push((unit, attn));
            }
            let ctx = tape.matmul(attn, v);
            let out = tape.matmul(ctx, p(a.wo));
            total = Some(match total {
                Some(acc) => tape.add(acc, out),
                None => out,
            });
        }
        let injected = tape.tokens_to_channels(total.expect("three branches"), h, w);
        tape.add(hidden, injected)
    }
}

fn init_std(name: &str, shape: &[usize], cfg: &ModelConfig) -> f64 {
    if name.ends_with(".b") {
        return 0.0;
    }
    if name == "out.conv.w" && cfg.zero_init_output {
        return 0.0;
    }
    if name == "audio.pos" {
        return 0.5;
    }
    let fan_in: usize = match shape.len() {
        4 => shape[1] * 9,
        _ => shape[0],
    };
    let base = 1.0 / (fan_in as f64).sqrt();
    if name.ends_with(".wo") {
        0.5 * base
    } else {
        base
    }
}

impl Denoiser for VictimModel {
    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn features(&self) -> &AudioFeatureExtractor {
        &self.features
    }

    fn window_radius(&self) -> usize {
        self.config.window_radius
    }

    fn predict(&self, tape: &mut Tape, inputs: &DenoiseInputs, taps: &[LayerBranchUnit]) -> Result<Prediction> {
        let pv = self.record_params(tape, false);
        self.forward(tape, &pv, inputs, taps)
    }
}

/// One noise prediction outside any attack loop.
///
/// `tokens` are the `[J, D]` audio tokens of the frame (see
/// [`AudioFeatureSequence::window`](super::audio_features::AudioFeatureSequence::window)).
pub fn denoise_predict(
    model: &dyn Denoiser,
    noisy: &LatentGrid,
    t: usize,
    reference: &PortraitImage,
    tokens: &Tensor,
    taps: &[LayerBranchUnit],
) -> Result<(LatentGrid, Vec<(LayerBranchUnit, AttentionMap)>)> {
    let mut tape = Tape::new();
    let pixels = tape.constant(reference.tensor().clone());
    let reference = encode_on(&mut tape, pixels);
    let inputs = DenoiseInputs {
        noisy: tape.constant(noisy.tensor().clone()),
        t,
        reference,
        tokens: tape.constant(tokens.clone()),
    };
    let pred = model.predict(&mut tape, &inputs, taps)?;
    let eps = LatentGrid::new(tape.value(pred.eps).clone())?;
    let maps = pred
        .maps
        .iter()
        .map(|&(u, v)| Ok((u, AttentionMap::new(tape.value(v).clone())?)))
        .collect::<Result<_>>()?;
    Ok((eps, maps))
}
