//! Training objectives: noise-prediction MSE, masked spatial perceptual
//! loss over structure/texture statistics, masked Sobel high-frequency
//! loss, and the combined total.
//!
//! The differentiable builders construct the loss on a tape; the plain
//! functions run the same builders on a forward-only tape, so both paths
//! share one arithmetic definition.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Epsilon inside the Sobel magnitude sqrt; keeps the gradient finite on
/// perfectly flat regions and perturbs the magnitude by < 1e-6.
const SOBEL_MAG_EPS: f64 = 1e-12;

/// Stability constants of the structure/texture similarity terms.
pub const DISTS_C1: f64 = 1e-6;
pub const DISTS_C2: f64 = 1e-6;

/// Feature channels per conv stage of the frozen bank.
const BANK_CHANNELS: usize = 8;
/// Conv stages after the raw-pixel stage.
const BANK_STAGES: usize = 3;
/// Total (stage, channel) pairs: 3 raw + 3 stages of 8.
const TOTAL_CHANNELS: usize = 3 + BANK_STAGES * BANK_CHANNELS;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse: f64,
    pub spatial: f64,
    pub high_freq: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn compose(mse: f64, spatial: f64, high_freq: f64, lambda: f64) -> LossReport {
        LossReport {
            mse,
            spatial,
            high_freq,
            total: mse + lambda * (spatial + high_freq),
            lambda,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mse.is_finite()
            && self.spatial.is_finite()
            && self.high_freq.is_finite()
            && self.total.is_finite()
    }
}

// ---------------------------------------------------------------------------
// Frozen feature bank
// ---------------------------------------------------------------------------

/// Frozen, seeded convolution bank standing in for pretrained perceptual
/// features: stage 0 is the raw image; stages 1..3 are 2x average-pool
/// followed by a 3x3 conv (8 channels) and softplus.
pub struct DistsBank {
    pub weights: [Tensor<f64>; 3],
}

static BANK: OnceLock<DistsBank> = OnceLock::new();

impl DistsBank {
    pub fn shared() -> &'static DistsBank {
        BANK.get_or_init(|| {
            let mut rng = Rng::new(0x4449_5354);
            let mut mk = |ci: usize| {
                let std = 1.0 / ((ci * 9) as f64).sqrt();
                Tensor::randn(&[BANK_CHANNELS, ci, 3, 3], &mut rng, std)
            };
            DistsBank {
                weights: [mk(3), mk(BANK_CHANNELS), mk(BANK_CHANNELS)],
            }
        })
    }
}

// ---------------------------------------------------------------------------
// Tape builders
// ---------------------------------------------------------------------------

/// mean((a - b)^2) as a scalar node.
pub fn mse_on_tape<S: Scalar>(tape: &mut Tape<S>, pred: NodeId, target: NodeId) -> NodeId {
    let d = tape.sub(pred, target);
    let sq = tape.mul(d, d);
    tape.mean_all(sq)
}

/// Per-channel Sobel gradient magnitude of a [3, h, w] pixel tensor.
pub fn sobel_on_tape<S: Scalar>(tape: &mut Tape<S>, pixels: NodeId) -> NodeId {
    let gx = tape.depthwise3x3_replicate(pixels, SOBEL_X);
    let gy = tape.depthwise3x3_replicate(pixels, SOBEL_Y);
    let gx2 = tape.mul(gx, gx);
    let gy2 = tape.mul(gy, gy);
    let sum = tape.add(gx2, gy2);
    let sum = tape.affine(sum, S::ONE, S::from_f64(SOBEL_MAG_EPS));
    tape.sqrt(sum)
}

/// Masked mean of squared edge-map differences; zero for an empty mask.
pub fn highfreq_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    pred_pixels: NodeId,
    truth_pixels: NodeId,
    mask3: NodeId,
    mask_count: usize,
) -> NodeId {
    if mask_count == 0 {
        return tape.constant(Tensor::scalar(S::ZERO));
    }
    let ep = sobel_on_tape(tape, pred_pixels);
    let et = sobel_on_tape(tape, truth_pixels);
    let d = tape.sub(ep, et);
    let dm = tape.mul(d, mask3);
    let sq = tape.mul(dm, dm);
    let total = tape.sum_all(sq);
    tape.scale(total, S::from_f64(1.0 / (3.0 * mask_count as f64)))
}

/// Feature pyramid of one [3, h, w] tensor: raw stage plus the conv bank.
fn dists_pyramid<S: Scalar>(tape: &mut Tape<S>, x: NodeId) -> Vec<NodeId> {
    let bank = DistsBank::shared();
    let mut stages = vec![x];
    let mut cur = x;
    for w in &bank.weights {
        let wid = tape.constant(w.cast::<S>());
        let pooled = tape.avgpool2(cur);
        // Replicate padding keeps constant inputs constant through the bank.
        let padded = tape.replicate_pad1(pooled);
        let conv = tape.conv2d(padded, wid, None, 1, 0);
        cur = tape.softplus(conv);
        stages.push(cur);
    }
    stages
}

/// Per-stage similarity sum: for each channel,
/// (2 mx my + c1)/(mx^2 + my^2 + c1) + (2 cov + c2)/(vx + vy + c2).
fn dists_stage_sum<S: Scalar>(tape: &mut Tape<S>, fx: NodeId, fy: NodeId) -> NodeId {
    let c1 = S::from_f64(DISTS_C1);
    let c2 = S::from_f64(DISTS_C2);
    let two = S::from_f64(2.0);
    let mx = tape.mean_per_channel(fx);
    let my = tape.mean_per_channel(fy);
    let xx = tape.mul(fx, fx);
    let yy = tape.mul(fy, fy);
    let xy = tape.mul(fx, fy);
    let exx = tape.mean_per_channel(xx);
    let eyy = tape.mean_per_channel(yy);
    let exy = tape.mean_per_channel(xy);
    let mx2 = tape.mul(mx, mx);
    let my2 = tape.mul(my, my);
    let mxmy = tape.mul(mx, my);
    let vx = tape.sub(exx, mx2);
    let vy = tape.sub(eyy, my2);
    let cov = tape.sub(exy, mxmy);

    let l_num = tape.affine(mxmy, two, c1);
    let l_den_sum = tape.add(mx2, my2);
    let l_den = tape.affine(l_den_sum, S::ONE, c1);
    let l = tape.div(l_num, l_den);

    let s_num = tape.affine(cov, two, c2);
    let s_den_sum = tape.add(vx, vy);
    let s_den = tape.affine(s_den_sum, S::ONE, c2);
    let s = tape.div(s_num, s_den);

    let ls = tape.add(l, s);
    tape.sum_all(ls)
}

/// Masked structure/texture distance between a predicted pixel tensor and
/// the ground truth: 1 - sum(l + s) / (2 * channel count). Inputs are
/// masked before feature extraction.
pub fn spatial_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    pred_pixels: NodeId,
    truth_pixels: NodeId,
    mask3: NodeId,
) -> NodeId {
    let xm = tape.mul(pred_pixels, mask3);
    let ym = tape.mul(truth_pixels, mask3);
    let px = dists_pyramid(tape, xm);
    let py = dists_pyramid(tape, ym);
    let mut acc: Option<NodeId> = None;
    for (fx, fy) in px.into_iter().zip(py) {
        let s = dists_stage_sum(tape, fx, fy);
        acc = Some(match acc {
            Some(a) => tape.add(a, s),
            None => s,
        });
    }
    let total = acc.expect("at least one stage");
    tape.affine(
        total,
        S::from_f64(-1.0 / (2.0 * TOTAL_CHANNELS as f64)),
        S::ONE,
    )
}

/// Scalar nodes of the combined objective for one item.
pub struct LossNodes {
    pub total: NodeId,
    pub mse: NodeId,
    pub spatial: Option<NodeId>,
    pub high_freq: Option<NodeId>,
}

/// Build the full objective on a tape. The appearance terms reconstruct the
/// predicted image from the current step's x0 estimate through the codec.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    eps_true: NodeId,
    eps_pred: NodeId,
    x_t: &Tensor<S>,
    t: usize,
    sched: &NoiseSchedule,
    truth_pixels: NodeId,
    mask3: NodeId,
    mask_count: usize,
    lambda: f64,
    use_appearance: bool,
) -> LossNodes {
    let mse = mse_on_tape(tape, eps_pred, eps_true);
    if !use_appearance {
        return LossNodes {
            total: mse,
            mse,
            spatial: None,
            high_freq: None,
        };
    }
    // x0_hat = x_t / sqrt(ab) - sqrt(1-ab)/sqrt(ab) * eps_pred
    let ab = sched.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    let coef = -((1.0 - ab).sqrt()) * inv;
    let xt_scaled = tape.constant(x_t.map(|v| v * S::from_f64(inv)));
    let scaled_eps = tape.scale(eps_pred, S::from_f64(coef));
    let x0_hat = tape.add(scaled_eps, xt_scaled);
    let pred_pixels = codec::decode_on_tape(tape, x0_hat);

    let spatial = spatial_on_tape(tape, pred_pixels, truth_pixels, mask3);
    let high_freq = highfreq_on_tape(tape, pred_pixels, truth_pixels, mask3, mask_count);
    let appearance = tape.add(spatial, high_freq);
    let weighted = tape.scale(appearance, S::from_f64(lambda));
    let total = tape.add(mse, weighted);
    LossNodes {
        total,
        mse,
        spatial: Some(spatial),
        high_freq: Some(high_freq),
    }
}

// ---------------------------------------------------------------------------
// Plain (forward-only) entry points
// ---------------------------------------------------------------------------

/// Mean of squared elementwise differences.
pub fn mse_loss(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    a.same_shape(b)?;
    let mut tape = Tape::forward_only();
    let ia = tape.constant(a.clone());
    let ib = tape.constant(b.clone());
    let m = mse_on_tape(&mut tape, ia, ib);
    Ok(tape.value(m).item())
}

/// Per-channel Sobel gradient magnitude with replicate padding.
pub fn sobel_edges(img: &Image) -> Image {
    let mut tape: Tape<f64> = Tape::forward_only();
    let x = tape.constant(img.to_chw());
    let m = sobel_on_tape(&mut tape, x);
    Image::from_chw(tape.value(m))
}

/// Mean over masked pixels (and channels) of squared edge-map differences.
pub fn highfreq_loss(pred: &Image, truth: &Image, mask: &BinaryMask) -> Result<f64> {
    pred.same_dims(truth)?;
    if mask.height != pred.height || mask.width != pred.width {
        return Err(Error::dim("mask dims differ from images"));
    }
    let count = mask.count_ones();
    let mut tape: Tape<f64> = Tape::forward_only();
    let p = tape.constant(pred.to_chw());
    let t = tape.constant(truth.to_chw());
    let m = tape.constant(mask.to_chw3());
    let hf = highfreq_on_tape(&mut tape, p, t, m, count);
    Ok(tape.value(hf).item())
}

/// Per-stage feature maps plus global mean/variance per channel.
pub struct FeatureStats {
    pub features: Vec<Tensor<f64>>,
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

pub fn dists_stats(img: &Image) -> FeatureStats {
    let mut tape: Tape<f64> = Tape::forward_only();
    let x = tape.constant(img.to_chw());
    let stages = dists_pyramid(&mut tape, x);
    let mut features = Vec::new();
    let mut mean = Vec::new();
    let mut var = Vec::new();
    for s in stages {
        let f = tape.value(s).clone();
        let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        let hw = (h * w) as f64;
        let mut ms = Vec::with_capacity(c);
        let mut vs = Vec::with_capacity(c);
        for ci in 0..c {
            let plane = &f.data()[ci * h * w..(ci + 1) * h * w];
            let m: f64 = plane.iter().sum::<f64>() / hw;
            let v: f64 = plane.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / hw;
            ms.push(m);
            vs.push(v);
        }
        features.push(f);
        mean.push(ms);
        var.push(vs);
    }
    FeatureStats {
        features,
        mean,
        var,
    }
}

/// Cross-covariance per stage/channel between two feature pyramids.
pub fn cross_covariance(a: &FeatureStats, b: &FeatureStats) -> Vec<Vec<f64>> {
    a.features
        .iter()
        .zip(&b.features)
        .enumerate()
        .map(|(si, (fa, fb))| {
            let (c, h, w) = (fa.shape()[0], fa.shape()[1], fa.shape()[2]);
            let hw = (h * w) as f64;
            (0..c)
                .map(|ci| {
                    let pa = &fa.data()[ci * h * w..(ci + 1) * h * w];
                    let pb = &fb.data()[ci * h * w..(ci + 1) * h * w];
                    let exy: f64 = pa.iter().zip(pb).map(|(x, y)| x * y).sum::<f64>() / hw;
                    exy - a.mean[si][ci] * b.mean[si][ci]
                })
                .collect()
        })
        .collect()
}

/// Masked structure/texture perceptual distance between two images.
pub fn spatial_loss(pred: &Image, truth: &Image, mask: &BinaryMask) -> Result<f64> {
    pred.same_dims(truth)?;
    if mask.height != pred.height || mask.width != pred.width {
        return Err(Error::dim("mask dims differ from images"));
    }
    let mut tape: Tape<f64> = Tape::forward_only();
    let p = tape.constant(pred.to_chw());
    let t = tape.constant(truth.to_chw());
    let m = tape.constant(mask.to_chw3());
    let d = spatial_on_tape(&mut tape, p, t, m);
    Ok(tape.value(d).item())
}

/// Plain evaluation of the combined objective for a single item.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_item(
    eps_true: &Tensor<f64>,
    eps_pred: &Tensor<f64>,
    x_t: &Tensor<f64>,
    t: usize,
    sched: &NoiseSchedule,
    truth: &Image,
    mask: &BinaryMask,
    lambda: f64,
    use_appearance: bool,
) -> Result<LossReport> {
    eps_true.same_shape(eps_pred)?;
    let mut tape: Tape<f64> = Tape::forward_only();
    let et = tape.constant(eps_true.clone());
    let ep = tape.constant(eps_pred.clone());
    let tp = tape.constant(truth.to_chw());
    let m3 = tape.constant(mask.to_chw3());
    let nodes = total_loss_on_tape(
        &mut tape,
        et,
        ep,
        x_t,
        t,
        sched,
        tp,
        m3,
        mask.count_ones(),
        lambda,
        use_appearance,
    );
    let read = |id: Option<NodeId>| id.map(|i| tape.value(i).item()).unwrap_or(0.0);
    Ok(LossReport {
        mse: tape.value(nodes.mse).item(),
        spatial: read(nodes.spatial),
        high_freq: read(nodes.high_freq),
        total: tape.value(nodes.total).item(),
        lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion;
    use crate::kernels;

    fn full_mask(h: usize, w: usize) -> BinaryMask {
        let mut m = BinaryMask::new(h, w);
        for y in 0..h {
            for x in 0..w {
                m.set(y, x, true);
            }
        }
        m
    }

    fn seeded_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = Rng::new(seed);
        Image::from_fn(h, w, |_, _| [rng.uniform(), rng.uniform(), rng.uniform()])
    }

    #[test]
    fn mse_contracts_and_oracle() {
        let z: Tensor<f64> = Tensor::zeros(&[4, 5]);
        assert_eq!(mse_loss(&z, &z).unwrap(), 0.0);
        let c: Tensor<f64> = Tensor::full(&[4, 5], 0.3);
        assert!((mse_loss(&z, &c).unwrap() - 0.09).abs() < 1e-15);
        let mut rng = Rng::new(1);
        let a: Tensor<f64> = Tensor::randn(&[7, 9], &mut rng, 1.0);
        let b: Tensor<f64> = Tensor::randn(&[7, 9], &mut rng, 1.0);
        // Brute-force double-loop accumulation.
        let mut acc = 0.0;
        for i in 0..7 {
            for j in 0..9 {
                let d = a.data()[i * 9 + j] - b.data()[i * 9 + j];
                acc += d * d;
            }
        }
        acc /= 63.0;
        assert!((mse_loss(&a, &b).unwrap() - acc).abs() < 1e-7);
        let bad: Tensor<f64> = Tensor::zeros(&[3]);
        assert!(mse_loss(&a, &bad).is_err());
    }

    #[test]
    fn sobel_constant_step_and_transpose() {
        let flat = Image::from_fn(10, 12, |_, _| [0.4, 0.6, 0.2]);
        let e = sobel_edges(&flat);
        assert!(e.data().iter().all(|&v| v < 2e-6), "flat image has only the eps floor");

        // Vertical step at column k: |Gx| = 4 on the two adjacent columns.
        let k = 6;
        let step = Image::from_fn(10, 12, |_, x| {
            let v = if x >= k { 1.0 } else { 0.0 };
            [v, v, v]
        });
        let e = sobel_edges(&step);
        for y in 1..9 {
            for c in 0..3 {
                assert!((e.get(y, k - 1, c) - 4.0).abs() < 1e-9, "col k-1");
                assert!((e.get(y, k, c) - 4.0).abs() < 1e-9, "col k");
                assert!(e.get(y, k - 3, c).abs() < 2e-6, "far col");
            }
        }
        // Gy vanishes there: check against the raw kernels directly.
        let chw = step.to_chw::<f64>();
        let gy = kernels::depthwise3x3_replicate(&chw, &SOBEL_Y);
        for y in 1..9 {
            assert_eq!(gy.data()[(y * 12) + k], 0.0);
        }

        // Transpose symmetry: edges(I^T) == edges(I)^T.
        let img = seeded_image(5, 9, 7);
        let t = Image::from_fn(7, 9, |y, x| img.px(x, y));
        let e1 = sobel_edges(&img);
        let e2 = sobel_edges(&t);
        for y in 0..9 {
            for x in 0..7 {
                for c in 0..3 {
                    assert!((e1.get(y, x, c) - e2.get(x, y, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn highfreq_contracts_and_oracle() {
        let a = seeded_image(2, 16, 16);
        let m = full_mask(16, 16);
        assert_eq!(highfreq_loss(&a, &a, &m).unwrap(), 0.0);
        let b = seeded_image(3, 16, 16);
        let empty = BinaryMask::new(16, 16);
        assert_eq!(highfreq_loss(&a, &b, &empty).unwrap(), 0.0);

        // Half-plane mask, brute-force masked accumulation oracle.
        let mut half = BinaryMask::new(16, 16);
        for y in 0..16 {
            for x in 0..8 {
                half.set(y, x, true);
            }
        }
        let ea = sobel_edges(&a);
        let eb = sobel_edges(&b);
        let mut acc = 0.0;
        for y in 0..16 {
            for x in 0..8 {
                for c in 0..3 {
                    let d = ea.get(y, x, c) - eb.get(y, x, c);
                    acc += d * d;
                }
            }
        }
        acc /= 3.0 * half.count_ones() as f64;
        let got = highfreq_loss(&a, &b, &half).unwrap();
        assert!((got - acc).abs() < 1e-7, "{got} vs {acc}");
    }

    #[test]
    fn dists_stats_contracts_and_stage1_oracle() {
        let c = Image::from_fn(16, 16, |_, _| [0.3, 0.5, 0.7]);
        let sc = dists_stats(&c);
        for vs in &sc.var {
            for &v in vs {
                assert!(v.abs() < 1e-12, "constant image stage variance {v}");
            }
        }
        let img = seeded_image(7, 16, 16);
        let s = dists_stats(&img);
        // Self cross-covariance equals variance.
        let cov = cross_covariance(&s, &s);
        for (vs, cs) in s.var.iter().zip(&cov) {
            for (&v, &c) in vs.iter().zip(cs) {
                assert!((v - c).abs() < 1e-12);
            }
        }
        // Stage-1 means against a brute-force pool-then-convolve oracle.
        let bank = DistsBank::shared();
        let chw = img.to_chw::<f64>();
        let mut pooled = vec![0.0; 3 * 8 * 8];
        for ci in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let mut sum = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            sum += chw.data()[(ci * 16 + 2 * y + dy) * 16 + 2 * x + dx];
                        }
                    }
                    pooled[(ci * 8 + y) * 8 + x] = sum / 4.0;
                }
            }
        }
        for oc in 0..BANK_CHANNELS {
            let mut mean = 0.0;
            for y in 0..8i64 {
                for x in 0..8i64 {
                    let mut acc = 0.0;
                    for ci in 0..3 {
                        for ky in -1..=1i64 {
                            for kx in -1..=1i64 {
                                let sy = (y + ky).clamp(0, 7) as usize;
                                let sx = (x + kx).clamp(0, 7) as usize;
                                let wv = bank.weights[0].data()
                                    [((oc * 3 + ci) * 3 + (ky + 1) as usize) * 3 + (kx + 1) as usize];
                                acc += wv * pooled[(ci * 8 + sy) * 8 + sx];
                            }
                        }
                    }
                    mean += acc.max(0.0) + (-acc.abs()).exp().ln_1p();
                }
            }
            mean /= 64.0;
            assert!(
                (mean - s.mean[1][oc]).abs() < 1e-6,
                "stage-1 channel {oc}: {mean} vs {}",
                s.mean[1][oc]
            );
        }
    }

    #[test]
    fn spatial_loss_contracts_and_stats_oracle() {
        let a = seeded_image(11, 16, 16);
        let b = seeded_image(12, 16, 16);
        let m = full_mask(16, 16);
        let same = spatial_loss(&a, &a, &m).unwrap();
        assert!(same.abs() < 1e-6, "identical images give {same}");
        let ab = spatial_loss(&a, &b, &m).unwrap();
        let ba = spatial_loss(&b, &a, &m).unwrap();
        assert!((ab - ba).abs() < 1e-9, "symmetry {ab} vs {ba}");
        assert!(ab > 0.0);

        // Independent statistics-by-double-loop oracle for the full score.
        let sa = dists_stats(&a);
        let sb = dists_stats(&b);
        let cov = cross_covariance(&sa, &sb);
        let mut sum = 0.0;
        for si in 0..sa.mean.len() {
            for ci in 0..sa.mean[si].len() {
                let (mx, my) = (sa.mean[si][ci], sb.mean[si][ci]);
                let (vx, vy) = (sa.var[si][ci], sb.var[si][ci]);
                let l = (2.0 * mx * my + DISTS_C1) / (mx * mx + my * my + DISTS_C1);
                let s = (2.0 * cov[si][ci] + DISTS_C2) / (vx + vy + DISTS_C2);
                sum += (l + s) / 2.0;
            }
        }
        let oracle = 1.0 - sum / TOTAL_CHANNELS as f64;
        assert!((ab - oracle).abs() < 1e-5, "{ab} vs oracle {oracle}");
    }

    #[test]
    fn loss_report_arithmetic() {
        let r = LossReport::compose(0.5, 0.2, 0.3, 0.001);
        assert!((r.total - 0.5005).abs() < 1e-12);
        assert!((r.total - (r.mse + r.lambda * (r.spatial + r.high_freq))).abs() < 1e-9);
    }

    #[test]
    fn perfect_prediction_nulls_every_component() {
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let truth = seeded_image(21, 16, 16);
        let mut mask = BinaryMask::new(16, 16);
        for y in 4..12 {
            for x in 2..14 {
                mask.set(y, x, true);
            }
        }
        let x0: Tensor<f64> = codec::encode(&truth).unwrap();
        let mut rng = Rng::new(22);
        let eps: Tensor<f64> = Tensor::randn(x0.shape(), &mut rng, 1.0);
        let t = 412;
        let x_t = diffusion::add_noise(&x0, &eps, t, &sched).unwrap();
        let r = total_loss_item(&eps, &eps, &x_t, t, &sched, &truth, &mask, 0.001, true).unwrap();
        assert!(r.mse == 0.0);
        assert!(r.spatial.abs() < 1e-5, "spatial {}", r.spatial);
        assert!(r.high_freq.abs() < 1e-5, "high_freq {}", r.high_freq);
        assert!(r.total.abs() < 1e-5);
        // lambda = 0 collapses to the mse.
        let r0 = total_loss_item(&eps, &eps, &x_t, t, &sched, &truth, &mask, 0.0, true).unwrap();
        assert_eq!(r0.total, r0.mse);
        // appearance disabled reports zero components.
        let r1 = total_loss_item(&eps, &eps, &x_t, t, &sched, &truth, &mask, 0.001, false).unwrap();
        assert_eq!(r1.spatial, 0.0);
        assert_eq!(r1.high_freq, 0.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        // FD over the prediction entries validates the entire loss-side
        // backward chain: x0 estimate, codec decode, Sobel, feature bank
        // statistics and the similarity ratios.
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let truth = seeded_image(31, 8, 8);
        let mut mask = BinaryMask::new(8, 8);
        for y in 1..7 {
            for x in 1..6 {
                mask.set(y, x, true);
            }
        }
        let x0: Tensor<f64> = codec::encode(&truth).unwrap();
        let mut rng = Rng::new(32);
        let eps: Tensor<f64> = Tensor::randn(x0.shape(), &mut rng, 1.0);
        let t = 640;
        let x_t = diffusion::add_noise(&x0, &eps, t, &sched).unwrap();
        let eps_pred: Tensor<f64> = Tensor::randn(x0.shape(), &mut rng, 1.0);
        let lambda = 0.7;

        let eval = |pred: &Tensor<f64>| -> f64 {
            total_loss_item(&eps, pred, &x_t, t, &sched, &truth, &mask, lambda, true)
                .unwrap()
                .total
        };

        // Analytic gradient via the tape.
        let mut tape: Tape<f64> = Tape::new();
        let et = tape.constant(eps.clone());
        let ep = tape.leaf(eps_pred.clone(), true);
        let tp = tape.constant(truth.to_chw());
        let m3 = tape.constant(mask.to_chw3());
        let nodes = total_loss_on_tape(
            &mut tape,
            et,
            ep,
            &x_t,
            t,
            &sched,
            tp,
            m3,
            mask.count_ones(),
            lambda,
            true,
        );
        let grads = tape.backward(nodes.total);
        let g = grads.get(ep).unwrap();

        let h = 1e-5;
        let mut rng = Rng::new(33);
        for _ in 0..24 {
            let i = rng.below(eps_pred.len() as u64) as usize;
            let mut plus = eps_pred.clone();
            plus.data_mut()[i] += h;
            let mut minus = eps_pred.clone();
            minus.data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = g.data()[i];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < 1e-3,
                "coord {i}: fd {fd} vs analytic {an}"
            );
        }
    }
}
