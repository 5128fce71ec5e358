//! Artifact writers.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::victim::{AudioClip, PortraitImage, SAMPLE_RATE};

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// 16-bit RGB PNG; 8-bit would quantise away most of a 1/255-step perturbation.
pub fn write_png(path: &Path, image: &PortraitImage) -> Result<()> {
    create_parent(path)?;
    let data: Vec<u16> = image.to_hwc().iter().map(|v| (v * 65535.0).round() as u16).collect();
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_raw(image.width() as u32, image.height() as u32, data).expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::codec(path, e))
}

/// Mono 16 kHz 32-bit float WAV.
pub fn write_wav(path: &Path, audio: &AudioClip) -> Result<()> {
    create_parent(path)?;
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::codec(path, e))?;
    for &s in audio.samples() {
        w.write_sample(s as f32).map_err(|e| Error::codec(path, e))?;
    }
    w.finalize().map_err(|e| Error::codec(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Hex sha256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
