//! Garment encoders.
//!
//! The coarse stream is a small trainable conv encoder emitting a 4x3 token
//! grid followed by a two-layer MLP (the stand-in for a frozen CLIP vision
//! tower, interface-compatible so a real one could be dropped in). The fine
//! stream applies a per-position MLP to the latent encoding of the warped
//! garment.

use super::{BoundParams, ModelConfig};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

/// Coarse garment tokens: [n_clip, d_model] from a garment image tensor
/// [3, garment_h, garment_w].
pub fn encode_garment_clip<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    garment_chw: NodeId,
) -> NodeId {
    assert_eq!(
        tape.value(garment_chw).shape(),
        &[3, cfg.garment_h, cfg.garment_w],
        "garment tensor dims"
    );
    let mut h = garment_chw;
    for conv in ["clip_enc.conv1", "clip_enc.conv2", "clip_enc.conv3"] {
        let w = bound.id(&format!("{conv}.weight"));
        let b = bound.id(&format!("{conv}.bias"));
        h = tape.conv2d(h, w, Some(b), 2, 1);
        h = tape.silu(h);
    }
    let (gh, gw) = cfg.clip_grid();
    let pooled = tape.adaptive_avgpool(h, gh, gw);
    let tokens = tape.chw_to_tokens(pooled);
    let w1 = bound.id("clip_enc.mlp1.weight");
    let b1 = bound.id("clip_enc.mlp1.bias");
    let w2 = bound.id("clip_enc.mlp2.weight");
    let b2 = bound.id("clip_enc.mlp2.bias");
    let t = tape.linear(tokens, w1, Some(b1));
    let t = tape.silu(t);
    tape.linear(t, w2, Some(b2))
}

/// Fine garment tokens: [n_vae, d_model], one token per latent position of
/// the encoded warped garment [lat_c, lat_h, lat_w].
pub fn encode_garment_vae<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    warped_latent: NodeId,
) -> NodeId {
    let (lat_c, lat_h, lat_w) = cfg.latent_dims();
    assert_eq!(
        tape.value(warped_latent).shape(),
        &[lat_c, lat_h, lat_w],
        "warped latent dims"
    );
    let tokens = tape.chw_to_tokens(warped_latent);
    let w1 = bound.id("vae_mlp.fc1.weight");
    let b1 = bound.id("vae_mlp.fc1.bias");
    let w2 = bound.id("vae_mlp.fc2.weight");
    let b2 = bound.id("vae_mlp.fc2.bias");
    let t = tape.linear(tokens, w1, Some(b1));
    let t = tape.silu(t);
    tape.linear(t, w2, Some(b2))
}

/// The learned null tokens used for conditioning dropout and the
/// unconditional guidance branch: one token per stream.
pub fn null_tokens(bound: &BoundParams) -> (NodeId, NodeId) {
    (bound.id("null.clip"), bound.id("null.vae"))
}
