//! Parameter-free latent encoder (2x2 average pooling) and its nearest-neighbour decoder.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

use super::media::{LatentGrid, PortraitImage};

/// Latent channels produced by [`encode`]; one per colour channel.
pub const LATENT_CHANNELS: usize = 3;

pub fn encode(image: &PortraitImage) -> LatentGrid {
    let mut tape = Tape::new();
    let x = tape.constant(image.tensor().clone());
    let z = encode_on(&mut tape, x);
    LatentGrid::new(tape.value(z).clone()).expect("pooling finite pixels is finite")
}

/// Records the encoder on a tape so gradients reach the pixels.
pub fn encode_on(tape: &mut Tape, pixels: Var) -> Var {
    tape.avg_pool2(pixels)
}

/// Nearest-neighbour 2x upsampling, clamped into `[0, 1]`.
pub fn decode(latent: &LatentGrid) -> Result<PortraitImage> {
    let s = latent.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = latent.data();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch * oh + y) * ow + x] = d[(ch * h + y / 2) * w + x / 2].clamp(0.0, 1.0);
            }
        }
    }
    PortraitImage::new(Tensor::from_parts(vec![c, oh, ow], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_encodes_to_constant() {
        let p = PortraitImage::constant(8, 6, 0.37).unwrap();
        let z = encode(&p);
        assert_eq!(z.shape(), &[3, 4, 3]);
        assert!(z.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn checker_block_pools_to_half() {
        let mut t = Tensor::zeros(&[3, 2, 2]);
        for c in 0..3 {
            t.data_mut()[c * 4 + 1] = 1.0;
            t.data_mut()[c * 4 + 2] = 1.0;
        }
        let z = encode(&PortraitImage::new(t).unwrap());
        assert_eq!(z.data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn decode_inverts_encode_on_block_constant_images() {
        let z = LatentGrid::new(Tensor::new(vec![3, 1, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap()).unwrap();
        let p = decode(&z).unwrap();
        assert_eq!(encode(&p), z);
    }
}
