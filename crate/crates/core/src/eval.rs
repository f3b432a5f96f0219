//! Evaluation: SSIM, feature-space FID/KID over a frozen toy extractor,
//! the masked high-frequency error probe, and the paired/unpaired
//! protocols over a corpus test split.

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::corpus::{warp_garment, CorpusSet, SPLIT_TEST};
use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};
use crate::kernels;
use crate::linalg;
use crate::loss::sobel_edges;
use crate::net::unet::{sample_image, CondInputs};
use crate::net::{build_mask_pyramid, ModelConfig, ParamSet};
use crate::rng::{splitmix64, Rng};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> &'static [f64; SSIM_WINDOW * SSIM_WINDOW] {
    static WIN: OnceLock<[f64; SSIM_WINDOW * SSIM_WINDOW]> = OnceLock::new();
    WIN.get_or_init(|| {
        let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
        let c = (SSIM_WINDOW / 2) as f64;
        let mut sum = 0.0;
        for y in 0..SSIM_WINDOW {
            for x in 0..SSIM_WINDOW {
                let dy = y as f64 - c;
                let dx = x as f64 - c;
                let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
                w[y * SSIM_WINDOW + x] = v;
                sum += v;
            }
        }
        for v in w.iter_mut() {
            *v /= sum;
        }
        w
    })
}

/// Structural similarity with the standard 11x11 Gaussian window
/// (sigma 1.5, K1 = 0.01, K2 = 0.03, unit data range), averaged over all
/// fully-interior windows and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "images {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window",
            a.height, a.width
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_K1) as f64;
    let c2 = (SSIM_K2 * SSIM_K2) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y0 in 0..=a.height - SSIM_WINDOW {
            for x0 in 0..=a.width - SSIM_WINDOW {
                let (mut mx, mut my) = (0.0, 0.0);
                let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
                for wy in 0..SSIM_WINDOW {
                    for wx in 0..SSIM_WINDOW {
                        let w = win[wy * SSIM_WINDOW + wx];
                        let va = a.get(y0 + wy, x0 + wx, c);
                        let vb = b.get(y0 + wy, x0 + wx, c);
                        mx += w * va;
                        my += w * vb;
                        xx += w * va * va;
                        yy += w * vb * vb;
                        xy += w * va * vb;
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cov = xy - mx * my;
                let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// Toy feature extractor
// ---------------------------------------------------------------------------

pub const FEATURE_DIM: usize = 64;

struct ToyNet {
    w1: Tensor<f64>,
    w2: Tensor<f64>,
    w3: Tensor<f64>,
}

static TOYNET: OnceLock<ToyNet> = OnceLock::new();

fn toynet() -> &'static ToyNet {
    TOYNET.get_or_init(|| {
        let mut rng = Rng::new(0x746f_7946);
        let mk = |co: usize, ci: usize, rng: &mut Rng| {
            let std = 1.0 / ((ci * 9) as f64).sqrt();
            Tensor::randn(&[co, ci, 3, 3], rng, std)
        };
        ToyNet {
            w1: mk(16, 3, &mut rng),
            w2: mk(32, 16, &mut rng),
            w3: mk(FEATURE_DIM, 32, &mut rng),
        }
    })
}

/// Frozen seeded conv encoder -> global average pool -> 64-dim vector.
pub fn toy_feature(img: &Image) -> Vec<f64> {
    let net = toynet();
    let mut x = img.to_chw::<f64>();
    for w in [&net.w1, &net.w2, &net.w3] {
        let (y, _) = kernels::conv2d(&x, w, None, 2, 1);
        x = kernels::silu(&y);
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hw = (h * w) as f64;
    (0..c)
        .map(|ci| x.data()[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / hw)
        .collect()
}

pub fn toy_features(images: &[Image]) -> Vec<Vec<f64>> {
    images.par_iter().map(toy_feature).collect()
}

// ---------------------------------------------------------------------------
// FID / KID
// ---------------------------------------------------------------------------

fn mean_cov(feats: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = feats.len();
    let d = feats[0].len();
    let mut mu = vec![0.0; d];
    for f in feats {
        for (m, &v) in mu.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in mu.iter_mut() {
        *m /= n as f64;
    }
    // Unbiased covariance.
    let mut cov = vec![0.0; d * d];
    for f in feats {
        for i in 0..d {
            let di = f[i] - mu[i];
            for j in 0..d {
                cov[i * d + j] += di * (f[j] - mu[j]);
            }
        }
    }
    for v in cov.iter_mut() {
        *v /= (n - 1) as f64;
    }
    (mu, cov)
}

/// Frechet distance between Gaussian fits of two feature sets:
/// |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}).
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::param("fid needs at least 2 samples per set"));
    }
    let d = a[0].len();
    if b[0].len() != d {
        return Err(Error::dim("feature dims differ"));
    }
    let (mu1, s1) = mean_cov(a);
    let (mu2, s2) = mean_cov(b);
    let mean_term: f64 = mu1
        .iter()
        .zip(&mu2)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    // tr sqrt(S1 S2) = tr sqrt(sqrt(S1) S2 sqrt(S1)), which is symmetric PSD.
    let r1 = linalg::sym_sqrt(&s1, d);
    let m = linalg::matmul_sq(&linalg::matmul_sq(&r1, &s2, d), &r1, d);
    // Symmetrise numerical noise before the eigensolve.
    let mut ms = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            ms[i * d + j] = 0.5 * (m[i * d + j] + m[j * d + i]);
        }
    }
    let (eig, _) = linalg::sym_eig(&ms, d);
    let tr_sqrt: f64 = eig.iter().map(|&v| v.max(0.0).sqrt()).sum();
    let tr1: f64 = (0..d).map(|i| s1[i * d + i]).sum();
    let tr2: f64 = (0..d).map(|i| s2[i * d + i]).sum();
    Ok(mean_term + tr1 + tr2 - 2.0 * tr_sqrt)
}

/// Unbiased squared MMD with the polynomial kernel (x.y/d + 1)^3, scaled by
/// 100 as reported.
pub fn kid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::param("kid needs at least 2 samples per set"));
    }
    let d = a[0].len();
    if b[0].len() != d {
        return Err(Error::dim("feature dims differ"));
    }
    let kern = |x: &[f64], y: &[f64]| -> f64 {
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let v = dot / d as f64 + 1.0;
        v * v * v
    };
    let n = a.len() as f64;
    let m = b.len() as f64;
    let mut kxx = 0.0;
    for i in 0..a.len() {
        for j in 0..a.len() {
            if i != j {
                kxx += kern(&a[i], &a[j]);
            }
        }
    }
    kxx /= n * (n - 1.0);
    let mut kyy = 0.0;
    for i in 0..b.len() {
        for j in 0..b.len() {
            if i != j {
                kyy += kern(&b[i], &b[j]);
            }
        }
    }
    kyy /= m * (m - 1.0);
    let mut kxy = 0.0;
    for x in a {
        for y in b {
            kxy += kern(x, y);
        }
    }
    kxy /= n * m;
    Ok((kxx + kyy - 2.0 * kxy) * 100.0)
}

/// Mean absolute Sobel-magnitude difference inside the warp mask: the
/// detail-preservation probe reported next to the distribution metrics.
pub fn masked_highfreq_error(pred: &Image, truth: &Image, mask: &BinaryMask) -> Result<f64> {
    pred.same_dims(truth)?;
    let ep = sobel_edges(pred);
    let et = sobel_edges(truth);
    let count = mask.count_ones();
    if count == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for y in 0..pred.height {
        for x in 0..pred.width {
            if mask.get(y, x) {
                for c in 0..3 {
                    acc += (ep.get(y, x, c) - et.get(y, x, c)).abs();
                }
            }
        }
    }
    Ok(acc / (3.0 * count as f64))
}

// ---------------------------------------------------------------------------
// Evaluation protocol
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Paired,
    Unpaired,
}

/// One prepared evaluation item: the garment column reflects the mode
/// (own garment when paired, deranged garment re-warped onto this pose when
/// unpaired).
pub struct EvalItem {
    pub id: u64,
    pub seed: u64,
    pub truth: Image,
    pub person: Image,
    pub mask: BinaryMask,
    pub garment: Image,
    pub warped: Image,
    pub agnostic: Image,
}

/// Anything that can synthesise a try-on image for an item.
pub trait Generator: Sync {
    fn generate(&self, item: &EvalItem) -> Result<Image>;
}

/// The real generator: DDIM sampling with classifier-free guidance.
pub struct DiffusionGenerator<'a> {
    pub params: &'a ParamSet<f32>,
    pub model_cfg: &'a ModelConfig,
    pub sched: &'a NoiseSchedule,
    pub sampler: SamplerConfig,
    pub use_gfa: bool,
}

impl Generator for DiffusionGenerator<'_> {
    fn generate(&self, item: &EvalItem) -> Result<Image> {
        let cond = CondInputs {
            garment_chw: item.garment.to_chw(),
            x_w: codec::encode(&item.warped)?,
            x_a: codec::encode(&item.agnostic)?,
            pyramid: build_mask_pyramid(&item.mask, &self.model_cfg.attn_resolutions())?,
        };
        let sampler = SamplerConfig {
            seed: item.seed,
            ..self.sampler
        };
        sample_image(self.params, self.model_cfg, &cond, self.sched, &sampler, self.use_gfa)
    }
}

/// Ground-truth playback: the identity-generator harness used to validate
/// the metric plumbing end to end.
pub struct OracleGenerator;

impl Generator for OracleGenerator {
    fn generate(&self, item: &EvalItem) -> Result<Image> {
        Ok(item.truth.clone())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub ssim: Option<f64>,
    pub fid_p: Option<f64>,
    pub kid_p: Option<f64>,
    pub fid_u: Option<f64>,
    pub kid_u: Option<f64>,
    pub high_freq_err: Option<f64>,
    pub samples: usize,
    pub config_digest: String,
    pub corpus_digest: String,
    /// Absolute feature-space values are produced by the toy extractor and
    /// are only comparable within a run, never to published full-scale
    /// numbers.
    pub note: String,
}

impl EvalReport {
    pub fn merge(mut self, other: EvalReport) -> EvalReport {
        self.ssim = self.ssim.or(other.ssim);
        self.fid_p = self.fid_p.or(other.fid_p);
        self.kid_p = self.kid_p.or(other.kid_p);
        self.fid_u = self.fid_u.or(other.fid_u);
        self.kid_u = self.kid_u.or(other.kid_u);
        self.high_freq_err = self.high_freq_err.or(other.high_freq_err);
        self
    }
}

/// Build the evaluation items for a mode over the test split.
pub fn eval_items(
    corpus: &CorpusSet,
    mode: EvalMode,
    limit: Option<usize>,
    seed: u64,
) -> Result<Vec<EvalItem>> {
    let metas = corpus.split(SPLIT_TEST);
    if metas.is_empty() {
        return Err(Error::Missing("test split in corpus".into()));
    }
    let metas: Vec<_> = match limit {
        Some(n) => metas.into_iter().take(n).collect(),
        None => metas,
    };
    metas
        .par_iter()
        .map(|meta| -> Result<EvalItem> {
            let s = corpus.load(meta.id)?;
            let (garment, warped) = match mode {
                EvalMode::Paired => (s.garment.clone(), s.warped.clone()),
                EvalMode::Unpaired => {
                    let donor = corpus.load(meta.unpaired_garment)?;
                    let (warped, _) = warp_garment(
                        &donor.garment,
                        &s.pose,
                        s.person.height,
                        s.person.width,
                    )?;
                    (donor.garment, warped)
                }
            };
            Ok(EvalItem {
                id: meta.id,
                seed: splitmix64(&mut (seed ^ meta.id.wrapping_mul(0x9E3779B97F4A7C15))),
                truth: s.truth,
                person: s.person,
                mask: s.warp_mask,
                garment,
                warped,
                agnostic: s.agnostic,
            })
        })
        .collect()
}

/// Run one evaluation mode; paired mode reports SSIM, FID_p/KID_p and the
/// masked high-frequency error against ground truth, unpaired mode reports
/// FID_u/KID_u against the full real test distribution.
pub fn evaluate(
    gen: &dyn Generator,
    corpus: &CorpusSet,
    mode: EvalMode,
    limit: Option<usize>,
    seed: u64,
) -> Result<(EvalReport, Vec<Image>)> {
    let items = eval_items(corpus, mode, limit, seed)?;
    let outputs: Vec<Image> = items
        .par_iter()
        .map(|item| gen.generate(item))
        .collect::<Result<_>>()?;

    let mut report = EvalReport {
        samples: items.len(),
        note: "feature-space metrics use the frozen toy extractor; values are comparable within this artifact only".to_string(),
        ..EvalReport::default()
    };
    match mode {
        EvalMode::Paired => {
            let ssims: Vec<f64> = items
                .par_iter()
                .zip(outputs.par_iter())
                .map(|(item, out)| ssim(out, &item.truth))
                .collect::<Result<_>>()?;
            let hfs: Vec<f64> = items
                .par_iter()
                .zip(outputs.par_iter())
                .map(|(item, out)| masked_highfreq_error(out, &item.truth, &item.mask))
                .collect::<Result<_>>()?;
            report.ssim = Some(ssims.iter().sum::<f64>() / ssims.len() as f64);
            report.high_freq_err = Some(hfs.iter().sum::<f64>() / hfs.len() as f64);
            let gen_feats = toy_features(&outputs);
            let truth_imgs: Vec<Image> = items.iter().map(|i| i.truth.clone()).collect();
            let truth_feats = toy_features(&truth_imgs);
            report.fid_p = Some(fid(&gen_feats, &truth_feats)?);
            report.kid_p = Some(kid(&gen_feats, &truth_feats)?);
        }
        EvalMode::Unpaired => {
            let gen_feats = toy_features(&outputs);
            // Reference distribution: the full real test split.
            let real: Vec<Image> = corpus
                .split(SPLIT_TEST)
                .par_iter()
                .map(|m| -> Result<Image> {
                    Ok(Image::load_png(&corpus.root.join(&m.paths.truth))?)
                })
                .collect::<Result<_>>()?;
            let real_feats = toy_features(&real);
            report.fid_u = Some(fid(&gen_feats, &real_feats)?);
            report.kid_u = Some(kid(&gen_feats, &real_feats)?);
        }
    }
    Ok((report, outputs))
}

/// Contact sheet: one row per item (person, garment, output, truth).
pub fn contact_sheet(items: &[EvalItem], outputs: &[Image], max_rows: usize) -> Image {
    let rows = items.len().min(max_rows).max(1);
    let (h, w) = (items[0].person.height, items[0].person.width);
    let gap = 2;
    let mut sheet = Image::from_fn(rows * (h + gap), 4 * (w + gap), |_, _| [1.0, 1.0, 1.0]);
    for (r, (item, out)) in items.iter().zip(outputs).take(rows).enumerate() {
        // The garment canvas differs in size; paste top-left.
        let tiles: [&Image; 4] = [&item.person, &item.garment, out, &item.truth];
        for (col, img) in tiles.iter().enumerate() {
            for y in 0..img.height.min(h) {
                for x in 0..img.width.min(w) {
                    sheet.set_px(r * (h + gap) + y, col * (w + gap) + x, img.px(y, x));
                }
            }
        }
    }
    sheet
}
