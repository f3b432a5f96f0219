//! Exactly invertible latent codec.
//!
//! Encoding maps pixel values through v -> 2v - 1 and rearranges f x f
//! spatial blocks into channels; decoding is the exact inverse. The latent
//! for an H x W RGB image has shape [3*f*f, H/f, W/f] with values in [-1, 1].

use crate::error::{Error, Result};
use crate::image::Image;
use crate::kernels;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Spatial downsampling factor of the codec.
pub const DOWN_FACTOR: usize = 2;

/// Latent channel count for RGB input.
pub const LATENT_CHANNELS: usize = 3 * DOWN_FACTOR * DOWN_FACTOR;

pub fn latent_dims(img_h: usize, img_w: usize) -> (usize, usize, usize) {
    (LATENT_CHANNELS, img_h / DOWN_FACTOR, img_w / DOWN_FACTOR)
}

/// Encode an image into latent space.
pub fn encode<S: Scalar>(img: &Image) -> Result<Tensor<S>> {
    if img.height % DOWN_FACTOR != 0 || img.width % DOWN_FACTOR != 0 {
        return Err(Error::dim(format!(
            "image dims {}x{} not divisible by {}",
            img.height, img.width, DOWN_FACTOR
        )));
    }
    // Value map in f64, then a single cast to S.
    let chw: Tensor<f64> = img.to_chw();
    let mapped = chw.map(|v| 2.0 * v - 1.0);
    let lat = kernels::space_to_depth(&mapped, DOWN_FACTOR);
    Ok(lat.cast())
}

/// Decode a latent back to an image. No clamping: out-of-range values are
/// preserved for loss pipelines and only clipped by PNG export.
pub fn decode<S: Scalar>(lat: &Tensor<S>) -> Result<Image> {
    if lat.shape().len() != 3 || lat.shape()[0] != LATENT_CHANNELS {
        return Err(Error::dim(format!(
            "latent shape {:?} does not have {} channels",
            lat.shape(),
            LATENT_CHANNELS
        )));
    }
    let lat64: Tensor<f64> = lat.cast();
    let spread = kernels::depth_to_space(&lat64, DOWN_FACTOR);
    let mapped = spread.map(|v| (v + 1.0) / 2.0);
    Ok(Image::from_chw(&mapped))
}

/// Differentiable decode on a tape: depth-to-space then v -> 0.5v + 0.5.
/// Produces a [3, H, W] pixel tensor.
pub fn decode_on_tape<S: Scalar>(tape: &mut Tape<S>, lat: NodeId) -> NodeId {
    let spread = tape.depth_to_space(lat, DOWN_FACTOR);
    tape.affine(spread, S::from_f64(0.5), S::from_f64(0.5))
}
