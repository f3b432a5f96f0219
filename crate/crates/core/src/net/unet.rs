//! The denoising UNet over the latent triple.
//!
//! Topology: sinusoidal timestep embedding -> MLP; stem conv; two down
//! levels (base_ch -> mid_ch); mid block; two up levels with skip
//! concatenation; transformer blocks (self-attention + garment adapter) at
//! the lat/2 and lat/4 resolutions.

use super::adapter::{clip_cross_attention, gf_adapter, AdapterIds};
use super::encoders::{encode_garment_clip, encode_garment_vae, null_tokens};
use super::{assemble_input, timestep_embedding, BoundParams, MaskPyramid, ModelConfig, ParamSet};
use crate::codec;
use crate::diffusion::{sample_latent, NoiseSchedule, SamplerConfig};
use crate::error::Result;
use crate::image::Image;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Garment conditioning tokens bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TokenIds {
    pub clip: NodeId,
    pub vae: NodeId,
}

fn adapter_ids(bound: &BoundParams, name: &str) -> AdapterIds {
    AdapterIds {
        wq: bound.id(&format!("{name}.adapter.wq")),
        wk_clip: bound.id(&format!("{name}.adapter.wk_clip")),
        wv_clip: bound.id(&format!("{name}.adapter.wv_clip")),
        wk_vae: bound.id(&format!("{name}.adapter.wk_vae")),
        wv_vae: bound.id(&format!("{name}.adapter.wv_vae")),
    }
}

fn resblock<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    name: &str,
    x: NodeId,
    temb: NodeId,
    groups: usize,
) -> NodeId {
    let cin = tape.value(x).shape()[0];
    let w1 = bound.id(&format!("{name}.conv1.weight"));
    let cout = tape.value(w1).shape()[0];

    let g1 = bound.id(&format!("{name}.norm1.gamma"));
    let b1 = bound.id(&format!("{name}.norm1.beta"));
    let mut h = tape.group_norm(x, groups, g1, b1);
    h = tape.silu(h);
    let b1c = bound.id(&format!("{name}.conv1.bias"));
    h = tape.conv2d(h, w1, Some(b1c), 1, 1);

    let tv = tape.silu(temb);
    let wt = bound.id(&format!("{name}.temb.weight"));
    let bt = bound.id(&format!("{name}.temb.bias"));
    let tv = tape.linear(tv, wt, Some(bt));
    let tv = tape.reshape(tv, &[cout]);
    h = tape.add_chan_bc(h, tv);

    let g2 = bound.id(&format!("{name}.norm2.gamma"));
    let b2 = bound.id(&format!("{name}.norm2.beta"));
    h = tape.group_norm(h, groups, g2, b2);
    h = tape.silu(h);
    let w2 = bound.id(&format!("{name}.conv2.weight"));
    let b2c = bound.id(&format!("{name}.conv2.bias"));
    h = tape.conv2d(h, w2, Some(b2c), 1, 1);

    let skip = if cin != cout {
        let ws = bound.id(&format!("{name}.skip.weight"));
        let bs = bound.id(&format!("{name}.skip.bias"));
        tape.conv2d(x, ws, Some(bs), 1, 0)
    } else {
        x
    };
    tape.add(h, skip)
}

fn self_attention<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    name: &str,
    x: NodeId,
    heads: usize,
) -> NodeId {
    let d_model = tape.value(x).shape()[1];
    let dh = d_model / heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let q_full = {
        let w = bound.id(&format!("{name}.sa.wq"));
        tape.matmul(x, w)
    };
    let k_full = {
        let w = bound.id(&format!("{name}.sa.wk"));
        tape.matmul(x, w)
    };
    let v_full = {
        let w = bound.id(&format!("{name}.sa.wv"));
        tape.matmul(x, w)
    };
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice_cols(q_full, h * dh, dh);
        let k = tape.slice_cols(k_full, h * dh, dh);
        let v = tape.slice_cols(v_full, h * dh, dh);
        let logits = tape.matmul_tb(q, k);
        let logits = tape.scale(logits, scale);
        let attn = tape.softmax(logits);
        parts.push(tape.matmul(attn, v));
    }
    let cat = tape.concat_cols(&parts);
    let wo = bound.id(&format!("{name}.sa.wo"));
    let bo = bound.id(&format!("{name}.sa.wo_bias"));
    tape.linear(cat, wo, Some(bo))
}

/// Transformer block: self-attention sublayer, then the adapter residually
/// in place of the usual cross-attention sublayer.
fn attn_block<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    name: &str,
    x: NodeId,
    tokens: &TokenIds,
    mask: Option<NodeId>,
    heads: usize,
    use_gfa: bool,
) -> NodeId {
    let (h, w) = {
        let s = tape.value(x).shape();
        (s[1], s[2])
    };
    let tok0 = tape.chw_to_tokens(x);
    let g1 = bound.id(&format!("{name}.norm_sa.gamma"));
    let b1 = bound.id(&format!("{name}.norm_sa.beta"));
    let ln1 = tape.layer_norm(tok0, g1, b1);
    let sa = self_attention(tape, bound, name, ln1, heads);
    let tok1 = tape.add(tok0, sa);

    let g2 = bound.id(&format!("{name}.norm_ad.gamma"));
    let b2 = bound.id(&format!("{name}.norm_ad.beta"));
    let f_q = tape.layer_norm(tok1, g2, b2);
    let w_ad = adapter_ids(bound, name);
    let z = if use_gfa {
        gf_adapter(tape, f_q, tokens.clip, tokens.vae, mask, &w_ad, heads)
    } else {
        clip_cross_attention(tape, f_q, tokens.clip, &w_ad, heads)
    };
    let tok2 = tape.add(tok1, z);
    tape.tokens_to_chw(tok2, h, w)
}

/// Full UNet forward on a tape. `gamma` is the [3*lat_c, lat_h, lat_w]
/// channel concatenation (x_w, x_a, x_t); the output has x_t's shape.
#[allow(clippy::too_many_arguments)]
pub fn unet_forward<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    gamma: NodeId,
    t: usize,
    tokens: &TokenIds,
    pyramid: &MaskPyramid<S>,
    use_gfa: bool,
) -> NodeId {
    let (lat_c, lat_h, lat_w) = cfg.latent_dims();
    assert_eq!(
        tape.value(gamma).shape(),
        &[3 * lat_c, lat_h, lat_w],
        "gamma dims"
    );
    let groups = cfg.groups;
    let heads = cfg.heads;

    // Masks for the two attention resolutions, bound as constants.
    let mask16 = if use_gfa {
        Some(tape.constant(pyramid.levels[0].clone()))
    } else {
        None
    };
    let mask8 = if use_gfa {
        Some(tape.constant(pyramid.levels[1].clone()))
    } else {
        None
    };

    // Timestep embedding -> MLP.
    let sin: Tensor<S> = timestep_embedding(t, cfg.sin_dim).cast();
    let sin = tape.constant(sin);
    let w1 = bound.id("time.fc1.weight");
    let b1 = bound.id("time.fc1.bias");
    let h0 = tape.linear(sin, w1, Some(b1));
    let h0 = tape.silu(h0);
    let w2 = bound.id("time.fc2.weight");
    let b2 = bound.id("time.fc2.bias");
    let temb = tape.linear(h0, w2, Some(b2));

    // Stem + down path.
    let stem_w = bound.id("stem.conv.weight");
    let stem_b = bound.id("stem.conv.bias");
    let x0 = tape.conv2d(gamma, stem_w, Some(stem_b), 1, 1);
    let d1 = resblock(tape, bound, "down1.res", x0, temb, groups);
    let d1w = bound.id("down1.down.weight");
    let d1b = bound.id("down1.down.bias");
    let x1 = tape.conv2d(d1, d1w, Some(d1b), 2, 1);
    let d2 = resblock(tape, bound, "down2.res", x1, temb, groups);
    let d2 = attn_block(tape, bound, "down2.attn", d2, tokens, mask16, heads, use_gfa);
    let d2w = bound.id("down2.down.weight");
    let d2b = bound.id("down2.down.bias");
    let x2 = tape.conv2d(d2, d2w, Some(d2b), 2, 1);

    // Mid.
    let m = resblock(tape, bound, "mid.res1", x2, temb, groups);
    let m = attn_block(tape, bound, "mid.attn", m, tokens, mask8, heads, use_gfa);
    let m = resblock(tape, bound, "mid.res2", m, temb, groups);

    // Up path with skips.
    let u2 = tape.nearest_up2(m);
    let u2w = bound.id("up2.upconv.weight");
    let u2b = bound.id("up2.upconv.bias");
    let u2 = tape.conv2d(u2, u2w, Some(u2b), 1, 1);
    let u2 = tape.concat_chan(&[u2, d2]);
    let u2 = resblock(tape, bound, "up2.res", u2, temb, groups);
    let u2 = attn_block(tape, bound, "up2.attn", u2, tokens, mask16, heads, use_gfa);

    let u1 = tape.nearest_up2(u2);
    let u1w = bound.id("up1.upconv.weight");
    let u1b = bound.id("up1.upconv.bias");
    let u1 = tape.conv2d(u1, u1w, Some(u1b), 1, 1);
    let u1 = tape.concat_chan(&[u1, d1]);
    let u1 = resblock(tape, bound, "up1.res", u1, temb, groups);

    let og = bound.id("out.norm.gamma");
    let ob = bound.id("out.norm.beta");
    let o = tape.group_norm(u1, groups, og, ob);
    let o = tape.silu(o);
    let ow = bound.id("out.conv.weight");
    let obias = bound.id("out.conv.bias");
    tape.conv2d(o, ow, Some(obias), 1, 1)
}

/// Build garment tokens for the conditional or null branch.
pub fn make_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    garment_chw: NodeId,
    warped_latent: NodeId,
    conditional: bool,
) -> TokenIds {
    if conditional {
        TokenIds {
            clip: encode_garment_clip(tape, bound, cfg, garment_chw),
            vae: encode_garment_vae(tape, bound, cfg, warped_latent),
        }
    } else {
        let (clip, vae) = null_tokens(bound);
        TokenIds { clip, vae }
    }
}

/// Per-item conditioning inputs for sampling and evaluation.
#[derive(Clone, Debug)]
pub struct CondInputs<S: Scalar> {
    pub garment_chw: Tensor<S>,
    pub x_w: Tensor<S>,
    pub x_a: Tensor<S>,
    pub pyramid: MaskPyramid<S>,
}

/// Forward-only noise prediction for one latent state.
pub fn predict_eps<S: Scalar>(
    params: &ParamSet<S>,
    cfg: &ModelConfig,
    cond: &CondInputs<S>,
    x_t: &Tensor<S>,
    t: usize,
    conditional: bool,
    use_gfa: bool,
) -> Tensor<S> {
    let mut tape = Tape::forward_only();
    let bound = BoundParams::bind(&mut tape, params, false);
    let garment = tape.constant(cond.garment_chw.clone());
    let x_w = tape.constant(cond.x_w.clone());
    let x_a = tape.constant(cond.x_a.clone());
    let x_t_id = tape.constant(x_t.clone());
    let tokens = make_tokens(&mut tape, &bound, cfg, garment, x_w, conditional);
    let gamma = assemble_input(&mut tape, x_w, x_a, x_t_id);
    let out = unet_forward(&mut tape, &bound, cfg, gamma, t, &tokens, &cond.pyramid, use_gfa);
    tape.value(out).clone()
}

/// Full DDIM generation for one conditioned item, decoded to pixel space.
pub fn sample_image<S: Scalar>(
    params: &ParamSet<S>,
    cfg: &ModelConfig,
    cond: &CondInputs<S>,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    use_gfa: bool,
) -> Result<Image> {
    let (lat_c, lat_h, lat_w) = cfg.latent_dims();
    let predict = |x_t: &Tensor<S>, t: usize, conditional: bool| -> Tensor<S> {
        predict_eps(params, cfg, cond, x_t, t, conditional, use_gfa)
    };
    let x0 = sample_latent(&predict, &[lat_c, lat_h, lat_w], sampler, sched)?;
    codec::decode(&x0)
}
