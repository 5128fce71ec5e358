//! Loading portrait/audio pairs into validated items.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::ImageFormat;
use rubato::{FftFixedIn, Resampler};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::victim::dataset::{make_clip, Rect};
use crate::victim::{AudioClip, PortraitImage, SAMPLE_RATE};

use super::config::{InputSpec, PairSpec};

/// One validated portrait/audio pair.
#[derive(Clone, Debug)]
pub struct Item {
    /// Hex content hash of the pair.
    pub id: String,
    /// Where the item came from, for messages.
    pub source: String,
    pub portrait: PortraitImage,
    pub audio: AudioClip,
    pub mouth_region: Rect,
}

/// An input that could not be loaded; the run continues without it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ItemError {
    pub source: String,
    pub error: String,
}

/// Lower-centre box used when no mouth region is given.
pub fn default_mouth_region(height: usize, width: usize) -> Rect {
    Rect {
        x0: width * 3 / 10,
        x1: width * 7 / 10,
        y0: height * 13 / 25,
        y1: height * 39 / 50,
    }
}

fn short_hash(hasher: Sha256) -> String {
    hex::encode(&hasher.finalize()[..8])
}

/// Id of a pair given the raw bytes of both files.
pub fn content_id(image_bytes: &[u8], audio_bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update((image_bytes.len() as u64).to_le_bytes());
    h.update(image_bytes);
    h.update(audio_bytes);
    short_hash(h)
}

/// Id of an in-memory pair, hashed over the exact sample values.
pub fn value_id(portrait: &PortraitImage, audio: &AudioClip) -> String {
    let mut h = Sha256::new();
    for d in portrait.tensor().shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in portrait.data().iter().chain(audio.samples()) {
        h.update(v.to_le_bytes());
    }
    short_hash(h)
}

pub fn decode_png(bytes: &[u8], path: &Path) -> Result<PortraitImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::codec(path, e))?;
    let rgb = img.to_rgb32f();
    let hwc: Vec<f64> = rgb.as_raw().iter().map(|&v| f64::from(v).clamp(0.0, 1.0)).collect();
    PortraitImage::from_hwc(rgb.height() as usize, rgb.width() as usize, &hwc)
}

pub fn read_png(path: &Path) -> Result<PortraitImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes, path)
}

/// Any PCM or float WAV, averaged to mono and resampled to 16 kHz.
pub fn decode_wav(bytes: &[u8], path: &Path) -> Result<AudioClip> {
    let mut reader = hound::WavReader::new(bytes).map_err(|e| Error::codec(path, e))?;
    let spec = reader.spec();
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>(),
        hound::SampleFormat::Int => {
            let scale = 2f64.powi(i32::from(spec.bits_per_sample) - 1);
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) / scale))
                .collect::<std::result::Result<_, _>>()
        }
    }
    .map_err(|e| Error::codec(path, e))?;
    let channels = usize::from(spec.channels);
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    let samples = resample(&mono, spec.sample_rate, SAMPLE_RATE)?;
    AudioClip::from_clamped(samples).map_err(|e| Error::codec(path, e))
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes, path)
}

/// Band-limited rate conversion; the output has `round(len * to / from)` samples
/// and is aligned with the input (the resampler delay is removed).
pub fn resample(x: &[f64], from: u32, to: u32) -> Result<Vec<f64>> {
    if from == to {
        return Ok(x.to_vec());
    }
    if from == 0 || to == 0 {
        return Err(Error::Input(format!("cannot resample {from} Hz to {to} Hz")));
    }
    let want = (x.len() as f64 * f64::from(to) / f64::from(from)).round() as usize;
    // An even FFT multiple keeps the reported delay (half the output FFT) exact.
    let (mut a, mut b) = (from as usize, to as usize);
    while b != 0 {
        (a, b) = (b, a % b);
    }
    let min_in = from as usize / a;
    let fft_chunks = (512usize.div_ceil(min_in)).next_multiple_of(2);
    let mut r = FftFixedIn::<f64>::new(from as usize, to as usize, 2 * fft_chunks * min_in, 2, 1)
        .map_err(|e| Error::Input(format!("resampler: {e}")))?;
    let delay = r.output_delay();
    let mut out = Vec::with_capacity(want + delay + 2048);
    let mut pos = 0;
    while out.len() < want + delay {
        let need = r.input_frames_next();
        let mut chunk = vec![0.0; need];
        let n = need.min(x.len().saturating_sub(pos));
        chunk[..n].copy_from_slice(&x[pos..pos + n]);
        pos += n;
        let res = r
            .process(&[chunk], None)
            .map_err(|e| Error::Input(format!("resampler: {e}")))?;
        out.extend_from_slice(&res[0]);
    }
    Ok(out[delay..delay + want].to_vec())
}

fn load_pair(pair: &PairSpec) -> Result<Item> {
    let image_bytes = std::fs::read(&pair.image).map_err(|e| Error::io(&pair.image, e))?;
    let audio_bytes = std::fs::read(&pair.audio).map_err(|e| Error::io(&pair.audio, e))?;
    let portrait = decode_png(&image_bytes, &pair.image)?;
    let audio = decode_wav(&audio_bytes, &pair.audio)?;
    let mouth_region = pair
        .mouth_region
        .unwrap_or_else(|| default_mouth_region(portrait.height(), portrait.width()));
    if mouth_region.is_empty() || mouth_region.x1 > portrait.width() || mouth_region.y1 > portrait.height() {
        return Err(Error::Input(format!(
            "mouth region {mouth_region:?} is empty or outside the image"
        )));
    }
    Ok(Item {
        id: content_id(&image_bytes, &audio_bytes),
        source: format!("{} + {}", pair.image.display(), pair.audio.display()),
        portrait,
        audio,
        mouth_region,
    })
}

/// `name.png` + `name.wav` pairs in `dir`, sorted by stem. Unpaired files are reported.
pub fn scan_dir(dir: &Path) -> Result<(Vec<PairSpec>, Vec<ItemError>)> {
    let mut stems: BTreeMap<String, (Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let (Some(stem), Some(ext)) = (path.file_stem(), path.extension()) else {
            continue;
        };
        let slot = stems.entry(stem.to_string_lossy().into_owned()).or_default();
        match ext.to_string_lossy().to_ascii_lowercase().as_str() {
            "png" => slot.0 = Some(path),
            "wav" => slot.1 = Some(path),
            _ => {}
        }
    }
    let mut pairs = Vec::new();
    let mut errors = Vec::new();
    for (stem, slot) in stems {
        match slot {
            (Some(image), Some(audio)) => pairs.push(PairSpec {
                image,
                audio,
                mouth_region: None,
            }),
            (Some(p), None) | (None, Some(p)) => errors.push(ItemError {
                source: p.display().to_string(),
                error: format!("no matching partner file for {stem:?}"),
            }),
            (None, None) => {}
        }
    }
    Ok((pairs, errors))
}

/// Loads every configured input. Bad items are returned as errors, never abort the batch.
pub fn ingest(inputs: &InputSpec) -> (Vec<Item>, Vec<ItemError>) {
    let mut pairs = inputs.pairs.clone();
    let mut errors = Vec::new();
    if let Some(dir) = &inputs.dir {
        match scan_dir(dir) {
            Ok((found, errs)) => {
                if found.is_empty() {
                    log::warn!("{}: no png/wav pairs found", dir.display());
                }
                pairs.extend(found);
                errors.extend(errs);
            }
            Err(e) => errors.push(ItemError {
                source: dir.display().to_string(),
                error: e.to_string(),
            }),
        }
    }
    let mut items = Vec::new();
    for pair in &pairs {
        match load_pair(pair) {
            Ok(item) => items.push(item),
            Err(e) => {
                log::warn!("skipping {}: {e}", pair.image.display());
                errors.push(ItemError {
                    source: format!("{} + {}", pair.image.display(), pair.audio.display()),
                    error: e.to_string(),
                });
            }
        }
    }
    if let Some(syn) = &inputs.synthetic {
        for i in 0..syn.count {
            let source = format!("synthetic seed {} #{i}", syn.seed);
            match make_clip(syn.seed, i, &syn.dataset) {
                Ok(clip) => items.push(Item {
                    id: value_id(&clip.reference, &clip.audio),
                    source,
                    portrait: clip.reference,
                    audio: clip.audio,
                    mouth_region: clip.mouth_region,
                }),
                Err(e) => errors.push(ItemError {
                    source,
                    error: e.to_string(),
                }),
            }
        }
    }
    if items.is_empty() {
        log::warn!("no usable input items");
    }
    (items, errors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resample_length_and_identity() {
        let x: Vec<f64> = (0..4800).map(|i| (i as f64 * 0.01).sin()).collect();
        assert_eq!(resample(&x, 16_000, 16_000).unwrap(), x);
        assert_eq!(resample(&x, 48_000, 16_000).unwrap().len(), 1600);
        assert_eq!(resample(&x, 8_000, 16_000).unwrap().len(), 9600);
    }

    #[test]
    fn default_region_inside_image() {
        let r = default_mouth_region(32, 32);
        assert!(!r.is_empty() && r.x1 <= 32 && r.y1 <= 32);
    }
}
