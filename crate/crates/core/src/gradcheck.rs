//! Finite-difference validation of the analytic gradients, run at f64 over
//! the same graph-building code the f32 trainer uses.
//!
//! Sampled parameter coordinates are stratified across four groups (UNet
//! core, adapter + null tokens, the coarse garment encoder, the fine
//! garment encoder) so every conditioning path is covered; one batch item
//! is conditioning-dropped so the null tokens receive gradient as well.

use serde::Serialize;

use crate::config::GradCheckSettings;
use crate::corpus::{make_sample, CorpusConfig};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::net::{init_params, ModelConfig, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{batch_loss_and_grads, prepare_item, ItemDraw, PreparedItem, TrainConfig};

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckFailure {
    pub name: String,
    pub coord: usize,
    pub analytic: f64,
    pub finite_diff: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Worst relative error among coordinates above the absolute floor.
    pub worst_rel: f64,
    pub worst_param: String,
    /// Largest absolute discrepancy over all coordinates.
    pub worst_abs: f64,
    pub group_counts: Vec<(String, usize)>,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn group_of(name: &str) -> &'static str {
    if name.starts_with("clip_enc") {
        "clip_encoder"
    } else if name.starts_with("vae_mlp") {
        "vae_encoder"
    } else if name.contains(".adapter.") || name.starts_with("null.") {
        "adapter"
    } else {
        "unet"
    }
}

const GROUPS: [&str; 4] = ["unet", "adapter", "clip_encoder", "vae_encoder"];

/// Run the finite-difference gradient check.
///
/// `corrupt_param` is a test hook: it perturbs the analytic gradient of the
/// named parameter's first coordinate and forces that coordinate into the
/// checked set, so a corrupted gradient path is guaranteed to fail.
pub fn gradient_check(
    model_cfg: &ModelConfig,
    sched: &NoiseSchedule,
    train_cfg: &TrainConfig,
    items: &[PreparedItem<f64>],
    settings: &GradCheckSettings,
    corrupt_param: Option<&str>,
) -> Result<GradCheckReport> {
    if items.is_empty() {
        return Err(Error::param("gradient check needs at least one item"));
    }
    let mut params: ParamSet<f64> = init_params(model_cfg, settings.seed);
    let mut rng = Rng::derive(settings.seed, 0x67636b);

    // Fixed draws; the last item trains against the null conditioning so the
    // null tokens are exercised.
    let draws: Vec<ItemDraw<f64>> = items
        .iter()
        .enumerate()
        .map(|(i, item)| ItemDraw {
            t: 1 + rng.below(sched.t_max as u64) as usize,
            eps: Tensor::randn(item.x0.shape(), &mut rng, 1.0),
            dropped: i + 1 == items.len() && items.len() > 1,
        })
        .collect();
    let item_refs: Vec<&PreparedItem<f64>> = items.iter().collect();

    // Analytic gradients of the mean total loss.
    let (_, mut grads) =
        batch_loss_and_grads(&params, model_cfg, sched, train_cfg, &item_refs, &draws, true)?;

    // Deliberate corruption hook (negative control).
    let mut forced: Vec<(usize, usize)> = Vec::new();
    if let Some(name) = corrupt_param {
        let idx = params
            .index_of(name)
            .ok_or_else(|| Error::Missing(format!("parameter `{name}`")))?;
        grads[idx].data_mut()[0] += 1.0;
        forced.push((idx, 0));
    }

    // Stratified coordinate sampling.
    let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); GROUPS.len()];
    for i in 0..params.len() {
        let g = GROUPS
            .iter()
            .position(|&g| g == group_of(params.name(i)))
            .expect("group");
        by_group[g].push(i);
    }
    let mut coords: Vec<(usize, usize)> = forced.clone();
    let mut seen: std::collections::HashSet<(usize, usize)> = coords.iter().copied().collect();
    let mut gi = 0usize;
    while coords.len() < settings.n_params.max(forced.len()) {
        let group = &by_group[gi % GROUPS.len()];
        gi += 1;
        if group.is_empty() {
            continue;
        }
        let pidx = group[rng.below(group.len() as u64) as usize];
        let cidx = rng.below(params.tensor(pidx).len() as u64) as usize;
        if seen.insert((pidx, cidx)) {
            coords.push((pidx, cidx));
        }
    }

    let h = settings.fd_step;
    let mut failures = Vec::new();
    let mut worst_rel = 0.0f64;
    let mut worst_abs = 0.0f64;
    let mut worst_param = "-".to_string();
    let mut group_counts: Vec<(String, usize)> =
        GROUPS.iter().map(|g| (g.to_string(), 0usize)).collect();

    for &(pidx, cidx) in &coords {
        let name = params.name(pidx).to_string();
        let g = GROUPS.iter().position(|&g| g == group_of(&name)).unwrap();
        group_counts[g].1 += 1;

        let orig = params.tensor(pidx).data()[cidx];
        params.tensor_mut(pidx).data_mut()[cidx] = orig + h;
        let (plus, _) =
            batch_loss_and_grads(&params, model_cfg, sched, train_cfg, &item_refs, &draws, false)?;
        params.tensor_mut(pidx).data_mut()[cidx] = orig - h;
        let (minus, _) =
            batch_loss_and_grads(&params, model_cfg, sched, train_cfg, &item_refs, &draws, false)?;
        params.tensor_mut(pidx).data_mut()[cidx] = orig;

        let fd = (plus.total - minus.total) / (2.0 * h);
        let an = grads[pidx].data()[cidx];
        let abs_err = (fd - an).abs();
        let rel = abs_err / fd.abs().max(an.abs()).max(1e-300);
        let pass = rel <= settings.rel_tol || abs_err <= settings.abs_floor;
        worst_abs = worst_abs.max(abs_err);
        if abs_err > settings.abs_floor && rel > worst_rel {
            worst_rel = rel;
            worst_param = format!("{name}[{cidx}]");
        }
        if !pass {
            failures.push(GradCheckFailure {
                name: name.clone(),
                coord: cidx,
                analytic: an,
                finite_diff: fd,
                rel_err: rel,
            });
        }
    }

    Ok(GradCheckReport {
        checked: coords.len(),
        worst_rel,
        worst_param,
        worst_abs,
        group_counts,
        failures,
    })
}

/// Prepare a small deterministic item set for the check. Samples come from
/// the corpus generator at its native scale and are cropped/resampled down
/// when the model runs at reduced dims.
pub fn gradcheck_items(
    model_cfg: &ModelConfig,
    batch: usize,
    seed: u64,
) -> Result<Vec<PreparedItem<f64>>> {
    let cfg = CorpusConfig {
        train_count: batch.max(1),
        test_count: 1,
        base_seed: seed,
        ..CorpusConfig::default()
    };
    let native = cfg.person_h == model_cfg.person_h
        && cfg.person_w == model_cfg.person_w
        && cfg.garment_h == model_cfg.garment_h
        && cfg.garment_w == model_cfg.garment_w;
    (0..batch.max(1) as u64)
        .map(|i| {
            let s = make_sample(&cfg, i)?;
            if native {
                return prepare_item(&s, model_cfg);
            }
            let (ph, pw) = (model_cfg.person_h, model_cfg.person_w);
            if ph > cfg.person_h || pw > cfg.person_w {
                return Err(Error::Config(
                    "gradcheck model dims exceed the generator canvas".into(),
                ));
            }
            // Window over the torso region keeps garment pixels in view.
            let y0 = (cfg.person_h / 3).min(cfg.person_h - ph);
            let x0 = (cfg.person_w / 4).min(cfg.person_w - pw);
            let mut mask = crate::image::BinaryMask::new(ph, pw);
            for y in 0..ph {
                for x in 0..pw {
                    mask.set(y, x, s.warp_mask.get(y0 + y, x0 + x));
                }
            }
            let garment = s.garment.resize_nearest(model_cfg.garment_h, model_cfg.garment_w);
            let truth = s.truth.crop(y0, x0, ph, pw);
            Ok(PreparedItem {
                garment_chw: garment.to_chw(),
                x_w: crate::codec::encode(&s.warped.crop(y0, x0, ph, pw))?,
                x_a: crate::codec::encode(&s.agnostic.crop(y0, x0, ph, pw))?,
                x0: crate::codec::encode(&truth)?,
                truth_chw: truth.to_chw(),
                mask3: mask.to_chw3(),
                mask_count: mask.count_ones(),
                pyramid: crate::net::build_mask_pyramid(&mask, &model_cfg.attn_resolutions())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            person_h: 16,
            person_w: 16,
            garment_h: 16,
            garment_w: 16,
            base_ch: 8,
            mid_ch: 16,
            heads: 2,
            time_dim: 16,
            sin_dim: 8,
            groups: 4,
        }
    }

    fn tiny_items(model: &ModelConfig, n: usize) -> Vec<PreparedItem<f64>> {
        // Full-size samples cropped to the tiny model dims.
        let cfg = CorpusConfig {
            train_count: n,
            test_count: 1,
            base_seed: 3,
            ..CorpusConfig::default()
        };
        (0..n as u64)
            .map(|i| {
                let s = make_sample(&cfg, i).unwrap();
                let crop = |img: &crate::image::Image| {
                    crate::image::Image::from_fn(16, 16, |y, x| img.px(y + 20, x + 12))
                };
                let mut mask = crate::image::BinaryMask::new(16, 16);
                for y in 0..16 {
                    for x in 0..16 {
                        mask.set(y, x, s.warp_mask.get(y + 20, x + 12));
                    }
                }
                let garment =
                    crate::image::Image::from_fn(16, 16, |y, x| s.garment.px(y * 2, x * 2));
                let truth = crop(&s.truth);
                PreparedItem {
                    garment_chw: garment.to_chw(),
                    x_w: crate::codec::encode(&crop(&s.warped)).unwrap(),
                    x_a: crate::codec::encode(&crop(&s.agnostic)).unwrap(),
                    x0: crate::codec::encode(&truth).unwrap(),
                    truth_chw: truth.to_chw(),
                    mask3: mask.to_chw3(),
                    mask_count: mask.count_ones(),
                    pyramid: crate::net::build_mask_pyramid(&mask, &model.attn_resolutions())
                        .unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn fresh_initialisation_passes_and_spans_groups() {
        let model = tiny_model();
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let items = tiny_items(&model, 2);
        let tcfg = TrainConfig {
            lambda: 0.5,
            ..TrainConfig::default()
        };
        let settings = GradCheckSettings {
            n_params: 48,
            ..GradCheckSettings::default()
        };
        let report = gradient_check(&model, &sched, &tcfg, &items, &settings, None).unwrap();
        assert!(
            report.passed(),
            "gradient check failed: {:?} (worst {} at {})",
            report.failures,
            report.worst_rel,
            report.worst_param
        );
        assert!(report.checked >= 48);
        for (g, n) in &report.group_counts {
            assert!(*n > 0, "group {g} never sampled");
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let model = tiny_model();
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let items = tiny_items(&model, 1);
        let tcfg = TrainConfig::default();
        let settings = GradCheckSettings {
            n_params: 8,
            ..GradCheckSettings::default()
        };
        let report = gradient_check(
            &model,
            &sched,
            &tcfg,
            &items,
            &settings,
            Some("stem.conv.weight"),
        )
        .unwrap();
        assert!(!report.passed(), "corruption must be detected");
        assert!(report
            .failures
            .iter()
            .any(|f| f.name == "stem.conv.weight" && f.coord == 0));
    }
}
