//! The denoising network: a small UNet over the concatenated latent triple,
//! conditioned through a garment-focused adapter, plus the two garment
//! encoders and the attention mask pyramid.

pub mod adapter;
pub mod encoders;
pub mod unet;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::image::BinaryMask;
use crate::kernels;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Architecture hyperparameters. `mid_ch` doubles as the attention width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub person_h: usize,
    pub person_w: usize,
    pub garment_h: usize,
    pub garment_w: usize,
    pub base_ch: usize,
    pub mid_ch: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub sin_dim: usize,
    pub groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            person_h: 64,
            person_w: 48,
            garment_h: 48,
            garment_w: 40,
            base_ch: 64,
            mid_ch: 128,
            heads: 4,
            time_dim: 128,
            sin_dim: 64,
            groups: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mid_ch % self.heads != 0 {
            return Err(Error::Config("heads must divide mid_ch".into()));
        }
        if self.base_ch % self.groups != 0 || self.mid_ch % self.groups != 0 {
            return Err(Error::Config("groups must divide channel counts".into()));
        }
        if self.sin_dim % 2 != 0 {
            return Err(Error::Config("sin_dim must be even".into()));
        }
        let (_, lh, lw) = self.latent_dims();
        if lh % 4 != 0 || lw % 4 != 0 {
            return Err(Error::Config(
                "latent dims must be divisible by 4 for the UNet".into(),
            ));
        }
        Ok(())
    }

    pub fn latent_dims(&self) -> (usize, usize, usize) {
        codec::latent_dims(self.person_h, self.person_w)
    }

    pub fn d_model(&self) -> usize {
        self.mid_ch
    }

    /// Attention resolutions, outermost first: (lat/2, lat/4).
    pub fn attn_resolutions(&self) -> [(usize, usize); 2] {
        let (_, lh, lw) = self.latent_dims();
        [(lh / 2, lw / 2), (lh / 4, lw / 4)]
    }

    /// CLIP stand-in token grid (4x3 = 12 tokens).
    pub fn clip_grid(&self) -> (usize, usize) {
        (4, 3)
    }

    pub fn n_clip_tokens(&self) -> usize {
        let (gh, gw) = self.clip_grid();
        gh * gw
    }

    pub fn n_vae_tokens(&self) -> usize {
        let (_, lh, lw) = self.latent_dims();
        lh * lw
    }
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

/// Ordered, named parameter tensors. Insertion order is the canonical order
/// used by checkpoints, the optimiser and gradient accumulation.
#[derive(Clone, Debug)]
pub struct ParamSet<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> usize {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        let idx = self.tensors.len();
        self.by_name.insert(name.clone(), idx);
        self.names.push(name);
        self.tensors.push(t);
        idx
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<S> {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<S> {
        &mut self.tensors[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index_of(name).map(|i| self.tensor(i))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        let i = self.index_of(name)?;
        Some(self.tensor_mut(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            out.add(n.to_string(), t.cast());
        }
        out
    }
}

/// Parameters bound onto a tape as leaves, in parameter-set order.
pub struct BoundParams {
    pub ids: Vec<NodeId>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn bind<S: Scalar>(tape: &mut Tape<S>, params: &ParamSet<S>, trainable: bool) -> Self {
        let ids = (0..params.len())
            .map(|i| tape.leaf(params.tensor(i).clone(), trainable))
            .collect();
        let index = (0..params.len())
            .map(|i| (params.name(i).to_string(), i))
            .collect();
        BoundParams { ids, index }
    }

    pub fn id(&self, name: &str) -> NodeId {
        self.ids[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }
}

// ---------------------------------------------------------------------------
// Initialisation
// ---------------------------------------------------------------------------

fn uniform_init<S: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let k = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, rng, -k, k)
}

fn add_conv<S: Scalar>(
    p: &mut ParamSet<S>,
    rng: &mut Rng,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
) {
    p.add(
        format!("{name}.weight"),
        uniform_init(rng, &[co, ci, k, k], ci * k * k),
    );
    p.add(format!("{name}.bias"), Tensor::zeros(&[co]));
}

fn add_linear<S: Scalar>(p: &mut ParamSet<S>, rng: &mut Rng, name: &str, din: usize, dout: usize) {
    p.add(format!("{name}.weight"), uniform_init(rng, &[din, dout], din));
    p.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
}

fn add_norm<S: Scalar>(p: &mut ParamSet<S>, name: &str, ch: usize) {
    p.add(format!("{name}.gamma"), Tensor::full(&[ch], S::ONE));
    p.add(format!("{name}.beta"), Tensor::zeros(&[ch]));
}

fn add_resblock<S: Scalar>(
    p: &mut ParamSet<S>,
    rng: &mut Rng,
    name: &str,
    cin: usize,
    cout: usize,
    time_dim: usize,
) {
    add_norm(p, &format!("{name}.norm1"), cin);
    add_conv(p, rng, &format!("{name}.conv1"), cout, cin, 3);
    add_linear(p, rng, &format!("{name}.temb"), time_dim, cout);
    add_norm(p, &format!("{name}.norm2"), cout);
    add_conv(p, rng, &format!("{name}.conv2"), cout, cout, 3);
    if cin != cout {
        add_conv(p, rng, &format!("{name}.skip"), cout, cin, 1);
    }
}

fn add_attnblock<S: Scalar>(p: &mut ParamSet<S>, rng: &mut Rng, name: &str, ch: usize) {
    add_norm(p, &format!("{name}.norm_sa"), ch);
    for w in ["wq", "wk", "wv", "wo"] {
        p.add(format!("{name}.sa.{w}"), uniform_init(rng, &[ch, ch], ch));
    }
    p.add(format!("{name}.sa.wo_bias"), Tensor::zeros(&[ch]));
    add_norm(p, &format!("{name}.norm_ad"), ch);
    for w in ["wq", "wk_clip", "wv_clip", "wk_vae", "wv_vae"] {
        p.add(format!("{name}.adapter.{w}"), uniform_init(rng, &[ch, ch], ch));
    }
}

/// Build freshly initialised parameters. Every parameter is drawn in a fixed
/// order regardless of ablation flags, so rows of an ablation share inits.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, seed: u64) -> ParamSet<S> {
    let mut rng = Rng::derive(seed, 0x6d6f64656c);
    let mut p = ParamSet::new();
    let (lat_c, _, _) = cfg.latent_dims();
    let gamma_ch = 3 * lat_c;
    let (base, mid, td) = (cfg.base_ch, cfg.mid_ch, cfg.time_dim);

    add_linear(&mut p, &mut rng, "time.fc1", cfg.sin_dim, td);
    add_linear(&mut p, &mut rng, "time.fc2", td, td);

    add_conv(&mut p, &mut rng, "stem.conv", base, gamma_ch, 3);
    add_resblock(&mut p, &mut rng, "down1.res", base, base, td);
    add_conv(&mut p, &mut rng, "down1.down", mid, base, 3);
    add_resblock(&mut p, &mut rng, "down2.res", mid, mid, td);
    add_attnblock(&mut p, &mut rng, "down2.attn", mid);
    add_conv(&mut p, &mut rng, "down2.down", mid, mid, 3);
    add_resblock(&mut p, &mut rng, "mid.res1", mid, mid, td);
    add_attnblock(&mut p, &mut rng, "mid.attn", mid);
    add_resblock(&mut p, &mut rng, "mid.res2", mid, mid, td);
    add_conv(&mut p, &mut rng, "up2.upconv", mid, mid, 3);
    add_resblock(&mut p, &mut rng, "up2.res", 2 * mid, mid, td);
    add_attnblock(&mut p, &mut rng, "up2.attn", mid);
    add_conv(&mut p, &mut rng, "up1.upconv", base, mid, 3);
    add_resblock(&mut p, &mut rng, "up1.res", 2 * base, base, td);
    add_norm(&mut p, "out.norm", base);
    // Small output init keeps the initial prediction near zero while leaving
    // every gradient path live.
    p.add(
        "out.conv.weight",
        Tensor::randn(&[lat_c, base, 3, 3], &mut rng, 0.02 / (base as f64 * 9.0).sqrt()),
    );
    p.add("out.conv.bias", Tensor::zeros(&[lat_c]));

    // Garment encoders.
    let d = cfg.d_model();
    add_conv(&mut p, &mut rng, "clip_enc.conv1", 32, 3, 3);
    add_conv(&mut p, &mut rng, "clip_enc.conv2", 64, 32, 3);
    add_conv(&mut p, &mut rng, "clip_enc.conv3", d, 64, 3);
    add_linear(&mut p, &mut rng, "clip_enc.mlp1", d, d);
    add_linear(&mut p, &mut rng, "clip_enc.mlp2", d, d);
    add_linear(&mut p, &mut rng, "vae_mlp.fc1", lat_c, d);
    add_linear(&mut p, &mut rng, "vae_mlp.fc2", d, d);

    // Learned null conditioning tokens for classifier-free guidance.
    p.add("null.clip", Tensor::randn(&[1, d], &mut rng, 0.02));
    p.add("null.vae", Tensor::randn(&[1, d], &mut rng, 0.02));
    p
}

// ---------------------------------------------------------------------------
// Mask pyramid
// ---------------------------------------------------------------------------

/// Warp mask max-pooled to each attention resolution and flattened to query
/// positions.
#[derive(Clone, Debug)]
pub struct MaskPyramid<S: Scalar> {
    pub levels: Vec<Tensor<S>>,
    pub resolutions: Vec<(usize, usize)>,
}

pub fn build_mask_pyramid<S: Scalar>(
    mask: &BinaryMask,
    resolutions: &[(usize, usize)],
) -> Result<MaskPyramid<S>> {
    let full = mask.to_chw1::<S>();
    let mut levels = Vec::with_capacity(resolutions.len());
    for &(rh, rw) in resolutions {
        if rh == 0 || rw == 0 || mask.height % rh != 0 || mask.width % rw != 0 {
            return Err(Error::dim(format!(
                "resolution {rh}x{rw} does not divide mask {}x{}",
                mask.height, mask.width
            )));
        }
        let fy = mask.height / rh;
        let fx = mask.width / rw;
        let pooled = kernels::maxpool_factor(&full, fy, fx);
        levels.push(pooled.reshaped(&[rh * rw]));
    }
    Ok(MaskPyramid {
        levels,
        resolutions: resolutions.to_vec(),
    })
}

impl<S: Scalar> MaskPyramid<S> {
    pub fn all_ones(resolutions: &[(usize, usize)]) -> Self {
        MaskPyramid {
            levels: resolutions.iter().map(|&(h, w)| Tensor::full(&[h * w], S::ONE)).collect(),
            resolutions: resolutions.to_vec(),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.levels
            .iter()
            .all(|l| l.data().iter().all(|&v| v == S::ZERO || v == S::ONE))
    }
}

// ---------------------------------------------------------------------------
// Latent triple assembly
// ---------------------------------------------------------------------------

/// gamma = concat(x_w, x_a, x_t) along channels, in exactly that order.
pub fn assemble_input<S: Scalar>(
    tape: &mut Tape<S>,
    x_w: NodeId,
    x_a: NodeId,
    x_t: NodeId,
) -> NodeId {
    tape.concat_chan(&[x_w, x_a, x_t])
}

/// Slice the noisy-latent block back out of gamma.
pub fn slice_x_t<S: Scalar>(tape: &mut Tape<S>, gamma: NodeId, lat_c: usize) -> NodeId {
    tape.slice_chan(gamma, 2 * lat_c, lat_c)
}

/// Sinusoidal timestep features of width `sin_dim`.
pub fn timestep_embedding(t: usize, sin_dim: usize) -> Tensor<f64> {
    let half = sin_dim / 2;
    let mut v = Tensor::zeros(&[1, sin_dim]);
    for i in 0..half {
        let freq = (10000f64).powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        v.data_mut()[i] = arg.sin();
        v.data_mut()[half + i] = arg.cos();
    }
    v
}
