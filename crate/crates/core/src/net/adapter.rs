//! Garment-focused adapter: decoupled cross-attention over CLIP-style and
//! VAE-style garment tokens, with per-query attention masking.
//!
//! Z = [softmax(Q K_clip^T / sqrt(d)) ⊙ M] V_clip
//!   + [softmax(Q K_vae^T  / sqrt(d)) ⊙ M] V_vae
//!
//! The mask multiplies post-softmax rows and is not renormalised; a masked
//! query row therefore contributes an exactly-zero adapter output.

use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

/// Projection matrices of one adapter layer, already bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct AdapterIds {
    pub wq: NodeId,
    pub wk_clip: NodeId,
    pub wv_clip: NodeId,
    pub wk_vae: NodeId,
    pub wv_vae: NodeId,
}

/// One masked single-stream cross-attention, multi-head.
fn stream<S: Scalar>(
    tape: &mut Tape<S>,
    q_full: NodeId,
    tokens: NodeId,
    wk: NodeId,
    wv: NodeId,
    mask: Option<NodeId>,
    heads: usize,
) -> NodeId {
    let d_model = tape.value(q_full).shape()[1];
    let dh = d_model / heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let k_full = tape.matmul(tokens, wk);
    let v_full = tape.matmul(tokens, wv);
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice_cols(q_full, h * dh, dh);
        let k = tape.slice_cols(k_full, h * dh, dh);
        let v = tape.slice_cols(v_full, h * dh, dh);
        let logits = tape.matmul_tb(q, k);
        let logits = tape.scale(logits, scale);
        let attn = tape.softmax(logits);
        let attn = match mask {
            Some(m) => tape.mul_row_scale(attn, m),
            None => attn,
        };
        parts.push(tape.matmul(attn, v));
    }
    tape.concat_cols(&parts)
}

/// Both decoupled streams separately: (Z_clip, Z_vae).
pub fn adapter_streams<S: Scalar>(
    tape: &mut Tape<S>,
    f_q: NodeId,
    clip_tokens: NodeId,
    vae_tokens: NodeId,
    mask: Option<NodeId>,
    w: &AdapterIds,
    heads: usize,
) -> (NodeId, NodeId) {
    let q = tape.matmul(f_q, w.wq);
    let zc = stream(tape, q, clip_tokens, w.wk_clip, w.wv_clip, mask, heads);
    let zv = stream(tape, q, vae_tokens, w.wk_vae, w.wv_vae, mask, heads);
    (zc, zv)
}

/// The garment-focused adapter output. `mask` is one scalar per query
/// position, broadcast across keys; `None` yields the unmasked decoupled
/// attention.
pub fn gf_adapter<S: Scalar>(
    tape: &mut Tape<S>,
    f_q: NodeId,
    clip_tokens: NodeId,
    vae_tokens: NodeId,
    mask: Option<NodeId>,
    w: &AdapterIds,
    heads: usize,
) -> NodeId {
    let (zc, zv) = adapter_streams(tape, f_q, clip_tokens, vae_tokens, mask, w, heads);
    tape.add(zc, zv)
}

/// The base-model conditioning path: unmasked cross-attention over the CLIP
/// stream only (no VAE stream, no garment-focused mask).
pub fn clip_cross_attention<S: Scalar>(
    tape: &mut Tape<S>,
    f_q: NodeId,
    clip_tokens: NodeId,
    w: &AdapterIds,
    heads: usize,
) -> NodeId {
    let q = tape.matmul(f_q, w.wq);
    stream(tape, q, clip_tokens, w.wk_clip, w.wv_clip, None, heads)
}
