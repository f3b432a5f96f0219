//! Training loop: decoupled-weight-decay adaptive-moment updates with
//! linear warmup, per-item conditioning dropout and deterministic batching.
//!
//! Training runs in f32. Per batch item, one tape is built, evaluated and
//! backpropagated in parallel; gradients are then reduced in item order, so
//! trajectories are bit-reproducible regardless of thread scheduling.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codec;
use crate::corpus::{CorpusSet, TryOnSample, SPLIT_TRAIN};
use crate::diffusion::{add_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::loss::{total_loss_on_tape, LossReport};
use crate::net::{
    assemble_input, build_mask_pyramid, init_params, BoundParams, MaskPyramid, ModelConfig,
    ParamSet,
};
use crate::net::unet::{make_tokens, unet_forward};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

const KEY_TRAIN: u64 = 0x747261696e;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_iters: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub cond_drop_prob: f64,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    pub use_gfa: bool,
    pub use_al: bool,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            warmup_iters: 500,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            lambda: 0.001,
            cond_drop_prob: 0.05,
            steps: 10_000,
            batch: 16,
            seed: 1,
            use_gfa: true,
            use_al: true,
            checkpoint_every: 1000,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::Config("cond_drop_prob must lie in [0,1]".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup: lr * min(1, step / warmup), with `step` 1-based.
pub fn effective_lr(cfg: &TrainConfig, step: u64) -> f64 {
    if cfg.warmup_iters == 0 || step >= cfg.warmup_iters {
        cfg.lr
    } else {
        cfg.lr * step as f64 / cfg.warmup_iters as f64
    }
}

/// Optimiser state plus everything needed to resume bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamSet<f32>,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
    pub rng: Rng,
    /// Shuffled sample ids of the current epoch and the position within it.
    pub order: Vec<u64>,
    pub cursor: usize,
    /// Model-config digest recorded at save time (informational).
    pub config_digest: u64,
}

pub fn init_state(model_cfg: &ModelConfig, cfg: &TrainConfig) -> TrainState {
    let params: ParamSet<f32> = init_params(model_cfg, cfg.seed);
    let m = (0..params.len())
        .map(|i| Tensor::zeros(params.tensor(i).shape()))
        .collect();
    let v = (0..params.len())
        .map(|i| Tensor::zeros(params.tensor(i).shape()))
        .collect();
    TrainState {
        params,
        m,
        v,
        step: 0,
        rng: Rng::derive(cfg.seed, KEY_TRAIN),
        order: Vec::new(),
        cursor: 0,
        config_digest: checkpoint::config_digest(model_cfg),
    }
}

/// Per-sample constant tensors prepared once per training run.
#[derive(Clone, Debug)]
pub struct PreparedItem<S: Scalar> {
    pub garment_chw: Tensor<S>,
    pub x_w: Tensor<S>,
    pub x_a: Tensor<S>,
    pub x0: Tensor<S>,
    pub truth_chw: Tensor<S>,
    pub mask3: Tensor<S>,
    pub mask_count: usize,
    pub pyramid: MaskPyramid<S>,
}

pub fn prepare_item<S: Scalar>(sample: &TryOnSample, model_cfg: &ModelConfig) -> Result<PreparedItem<S>> {
    Ok(PreparedItem {
        garment_chw: sample.garment.to_chw(),
        x_w: codec::encode(&sample.warped)?,
        x_a: codec::encode(&sample.agnostic)?,
        x0: codec::encode(&sample.truth)?,
        truth_chw: sample.truth.to_chw(),
        mask3: sample.warp_mask.to_chw3(),
        mask_count: sample.warp_mask.count_ones(),
        pyramid: build_mask_pyramid(&sample.warp_mask, &model_cfg.attn_resolutions())?,
    })
}

/// Per-item random draws, taken from the state RNG in batch order.
#[derive(Clone, Debug)]
pub struct ItemDraw<S: Scalar> {
    pub t: usize,
    pub eps: Tensor<S>,
    pub dropped: bool,
}

pub struct ItemOut<S: Scalar> {
    pub report: LossReport,
    pub grads: Vec<Option<Tensor<S>>>,
}

/// Build the full per-item graph (tokens, UNet, objective); returns the loss
/// report and, when `with_grads`, per-parameter gradients. This is the one
/// code path shared by f32 training and f64 gradient checking.
#[allow(clippy::too_many_arguments)]
pub fn item_forward_backward<S: Scalar>(
    params: &ParamSet<S>,
    model_cfg: &ModelConfig,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    item: &PreparedItem<S>,
    draw: &ItemDraw<S>,
    with_grads: bool,
) -> Result<ItemOut<S>> {
    let mut tape: Tape<S> = if with_grads { Tape::new() } else { Tape::forward_only() };
    let bound = BoundParams::bind(&mut tape, params, with_grads);
    let garment = tape.constant(item.garment_chw.clone());
    let x_w = tape.constant(item.x_w.clone());
    let x_a = tape.constant(item.x_a.clone());
    let x_t = add_noise(&item.x0, &draw.eps, draw.t, sched)?;
    let x_t_id = tape.constant(x_t.clone());
    let tokens = make_tokens(&mut tape, &bound, model_cfg, garment, x_w, !draw.dropped);
    let gamma = assemble_input(&mut tape, x_w, x_a, x_t_id);
    let eps_pred = unet_forward(
        &mut tape,
        &bound,
        model_cfg,
        gamma,
        draw.t,
        &tokens,
        &item.pyramid,
        cfg.use_gfa,
    );
    let eps_id = tape.constant(draw.eps.clone());
    let truth = tape.constant(item.truth_chw.clone());
    let mask3 = tape.constant(item.mask3.clone());
    let nodes = total_loss_on_tape(
        &mut tape,
        eps_id,
        eps_pred,
        &x_t,
        draw.t,
        sched,
        truth,
        mask3,
        item.mask_count,
        cfg.lambda,
        cfg.use_al,
    );
    let report = LossReport {
        mse: tape.value(nodes.mse).item().to_f64(),
        spatial: nodes.spatial.map(|n| tape.value(n).item().to_f64()).unwrap_or(0.0),
        high_freq: nodes.high_freq.map(|n| tape.value(n).item().to_f64()).unwrap_or(0.0),
        total: tape.value(nodes.total).item().to_f64(),
        lambda: cfg.lambda,
    };
    let mut grads_out = Vec::new();
    if with_grads {
        let mut grads = tape.backward(nodes.total);
        grads_out.reserve(bound.ids.len());
        for &id in &bound.ids {
            grads_out.push(grads.take(id));
        }
    }
    Ok(ItemOut {
        report,
        grads: grads_out,
    })
}

/// Mean loss and averaged gradients over explicit draws; used by the f64
/// gradient checker with fixed draws.
pub fn batch_loss_and_grads<S: Scalar>(
    params: &ParamSet<S>,
    model_cfg: &ModelConfig,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    items: &[&PreparedItem<S>],
    draws: &[ItemDraw<S>],
    with_grads: bool,
) -> Result<(LossReport, Vec<Tensor<S>>)> {
    assert_eq!(items.len(), draws.len());
    let outs: Vec<ItemOut<S>> = items
        .par_iter()
        .zip(draws.par_iter())
        .map(|(item, draw)| {
            item_forward_backward(params, model_cfg, sched, cfg, item, draw, with_grads)
        })
        .collect::<Result<_>>()?;
    let n = items.len() as f64;
    let mut mean = LossReport {
        mse: 0.0,
        spatial: 0.0,
        high_freq: 0.0,
        total: 0.0,
        lambda: cfg.lambda,
    };
    let mut grads: Vec<Tensor<S>> = if with_grads {
        (0..params.len())
            .map(|i| Tensor::zeros(params.tensor(i).shape()))
            .collect()
    } else {
        Vec::new()
    };
    for out in &outs {
        mean.mse += out.report.mse;
        mean.spatial += out.report.spatial;
        mean.high_freq += out.report.high_freq;
        mean.total += out.report.total;
        for (gi, g) in out.grads.iter().enumerate() {
            if let Some(g) = g {
                for (a, &b) in grads[gi].data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }
    mean.mse /= n;
    mean.spatial /= n;
    mean.high_freq /= n;
    mean.total /= n;
    let inv = S::from_f64(1.0 / n);
    for g in &mut grads {
        for v in g.data_mut() {
            *v *= inv;
        }
    }
    Ok((mean, grads))
}

/// Averaged batch gradients plus the mean loss report and dropout count.
/// Exposed separately from the update so tests can inspect raw gradients.
pub fn compute_batch_gradients(
    state: &mut TrainState,
    items: &[&PreparedItem<f32>],
    model_cfg: &ModelConfig,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(Vec<Tensor<f32>>, LossReport, usize)> {
    assert!(!items.is_empty());
    // Draws consume the RNG in item order.
    let draws: Vec<ItemDraw<f32>> = items
        .iter()
        .map(|item| {
            let t = 1 + state.rng.below(sched.t_max as u64) as usize;
            let eps = Tensor::randn(item.x0.shape(), &mut state.rng, 1.0);
            let dropped = state.rng.bernoulli(cfg.cond_drop_prob);
            ItemDraw { t, eps, dropped }
        })
        .collect();
    let dropped = draws.iter().filter(|d| d.dropped).count();
    let (mean, grads) =
        batch_loss_and_grads(&state.params, model_cfg, sched, cfg, items, &draws, true)?;
    Ok((grads, mean, dropped))
}

fn adamw_update(state: &mut TrainState, grads: &[Tensor<f32>], lr: f64, cfg: &TrainConfig) {
    let t = state.step as i32 + 1;
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (b1f, b2f) = (b1 as f32, b2 as f32);
    let (ob1, ob2) = ((1.0 - b1) as f32, (1.0 - b2) as f32);
    let lrf = lr as f32;
    let wdf = cfg.weight_decay as f32;
    let inv_bc1 = (1.0 / bc1) as f32;
    let inv_bc2 = (1.0 / bc2) as f32;
    let eps = ADAM_EPS as f32;
    for i in 0..state.params.len() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = state.params.tensor_mut(i).data_mut();
        for j in 0..g.len() {
            m[j] = b1f * m[j] + ob1 * g[j];
            v[j] = b2f * v[j] + ob2 * g[j] * g[j];
            let mhat = m[j] * inv_bc1;
            let vhat = v[j] * inv_bc2;
            p[j] -= lrf * (mhat / (vhat.sqrt() + eps) + wdf * p[j]);
        }
    }
}

/// Outcome of one optimisation step.
pub struct StepInfo {
    pub report: LossReport,
    pub lr: f64,
    pub dropped_items: usize,
}

/// One optimisation step over a prepared batch.
pub fn train_step(
    state: &mut TrainState,
    items: &[&PreparedItem<f32>],
    model_cfg: &ModelConfig,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<StepInfo> {
    let (grads, report, dropped_items) =
        compute_batch_gradients(state, items, model_cfg, sched, cfg)?;
    if !report.is_finite() {
        return Err(Error::NonFinite {
            step: state.step + 1,
        });
    }
    let lr = effective_lr(cfg, state.step + 1);
    adamw_update(state, &grads, lr, cfg);
    state.step += 1;
    Ok(StepInfo {
        report,
        lr,
        dropped_items,
    })
}

/// Draw the next batch of sample ids, reshuffling at epoch boundaries.
pub fn next_batch_ids(state: &mut TrainState, n_samples: usize, batch: usize) -> Vec<u64> {
    let mut ids = Vec::with_capacity(batch);
    while ids.len() < batch {
        if state.cursor >= state.order.len() {
            let mut order: Vec<u64> = (0..n_samples as u64).collect();
            state.rng.shuffle(&mut order);
            state.order = order;
            state.cursor = 0;
        }
        ids.push(state.order[state.cursor]);
        state.cursor += 1;
    }
    ids
}

#[derive(Serialize)]
struct LogLine {
    step: u64,
    mse: f64,
    spatial: f64,
    high_freq: f64,
    total: f64,
    lr: f64,
}

/// Train on the corpus train split; writes periodic checkpoints and a
/// JSON-lines loss log, returning the final checkpoint path.
pub fn fit(
    corpus: &CorpusSet,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    cfg.validate()?;
    model_cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let train_metas = corpus.split(SPLIT_TRAIN);
    if train_metas.is_empty() {
        return Err(Error::Missing("train split in corpus".into()));
    }
    let items: Vec<PreparedItem<f32>> = train_metas
        .par_iter()
        .map(|meta| -> Result<PreparedItem<f32>> {
            let sample = corpus.load(meta.id)?;
            prepare_item(&sample, model_cfg)
        })
        .collect::<Result<_>>()?;

    let mut state = match resume {
        Some(path) => {
            let s = checkpoint::load_checkpoint(path)?;
            checkpoint::validate_shapes(&s, model_cfg)?;
            s
        }
        None => init_state(model_cfg, cfg),
    };

    let log_path = out_dir.join("loss_log.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;

    while state.step < cfg.steps {
        let ids = next_batch_ids(&mut state, items.len(), cfg.batch);
        let batch: Vec<&PreparedItem<f32>> = ids.iter().map(|&id| &items[id as usize]).collect();
        let info = train_step(&mut state, &batch, model_cfg, sched, cfg)?;
        if cfg.log_every > 0 && state.step % cfg.log_every == 0 {
            let line = LogLine {
                step: state.step,
                mse: info.report.mse,
                spatial: info.report.spatial,
                high_freq: info.report.high_freq,
                total: info.report.total,
                lr: info.lr,
            };
            writeln!(log, "{}", serde_json::to_string(&line).expect("log line"))?;
        }
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            let p = out_dir.join(format!("ckpt_{:06}.gdck", state.step));
            checkpoint::save_checkpoint(&p, &state, model_cfg)?;
        }
    }
    let final_path = out_dir.join("checkpoint.gdck");
    checkpoint::save_checkpoint(&final_path, &state, model_cfg)?;
    Ok(final_path)
}
