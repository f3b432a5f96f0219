//! Hot-path benchmarks: UNet forward, one training step, the adapter,
//! losses, TPS warping and metric kernels.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use gardiff_bench::fixture_item;
use gardiff_core::corpus::{gen_garment, gen_person, warp_garment, GarmentKind};
use gardiff_core::diffusion::NoiseSchedule;
use gardiff_core::eval::{fid, kid, ssim, toy_feature};
use gardiff_core::image::Image;
use gardiff_core::loss::{sobel_edges, spatial_loss};
use gardiff_core::net::unet::predict_eps;
use gardiff_core::net::{init_params, ParamSet};
use gardiff_core::rng::Rng;
use gardiff_core::tensor::Tensor;
use gardiff_core::train::{init_state, train_step, TrainConfig};

fn rand_image(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = Rng::new(seed);
    Image::from_fn(h, w, |_, _| [rng.uniform(), rng.uniform(), rng.uniform()])
}

fn bench_unet_forward(c: &mut Criterion) {
    let (model, item) = fixture_item(1);
    let params: ParamSet<f32> = init_params(&model, 1);
    let cond = gardiff_core::net::unet::CondInputs {
        garment_chw: item.garment_chw.clone(),
        x_w: item.x_w.clone(),
        x_a: item.x_a.clone(),
        pyramid: item.pyramid.clone(),
    };
    let mut rng = Rng::new(2);
    let x_t: Tensor<f32> = Tensor::randn(item.x0.shape(), &mut rng, 1.0);
    c.bench_function("unet_forward_f32", |b| {
        b.iter(|| {
            black_box(predict_eps(
                &params,
                &model,
                &cond,
                black_box(&x_t),
                500,
                true,
                true,
            ))
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let (model, item) = fixture_item(3);
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let cfg = TrainConfig {
        batch: 2,
        ..TrainConfig::default()
    };
    let mut state = init_state(&model, &cfg);
    let batch = vec![&item, &item];
    c.bench_function("train_step_batch2", |b| {
        b.iter(|| {
            let info = train_step(&mut state, black_box(&batch), &model, &sched, &cfg).unwrap();
            black_box(info.report.total)
        })
    });
}

fn bench_warp_and_losses(c: &mut Criterion) {
    let garment = gen_garment(5, GarmentKind::Glyph, 48, 40).unwrap();
    let (_, pose) = gen_person(5, 64, 48).unwrap();
    c.bench_function("tps_warp_64x48", |b| {
        b.iter(|| black_box(warp_garment(black_box(&garment), &pose, 64, 48).unwrap()))
    });

    let a = rand_image(7, 64, 48);
    let bimg = rand_image(8, 64, 48);
    c.bench_function("sobel_edges_64x48", |b| {
        b.iter(|| black_box(sobel_edges(black_box(&a))))
    });
    let mut mask = gardiff_core::image::BinaryMask::new(64, 48);
    for y in 16..48 {
        for x in 8..40 {
            mask.set(y, x, true);
        }
    }
    c.bench_function("spatial_loss_64x48", |b| {
        b.iter(|| black_box(spatial_loss(&a, &bimg, &mask).unwrap()))
    });
}

fn bench_metrics(c: &mut Criterion) {
    let a = rand_image(9, 64, 48);
    let bimg = rand_image(10, 64, 48);
    c.bench_function("ssim_64x48", |b| {
        b.iter(|| black_box(ssim(&a, &bimg).unwrap()))
    });
    c.bench_function("toy_feature_64x48", |b| {
        b.iter(|| black_box(toy_feature(&a)))
    });
    let mut rng = Rng::new(11);
    let xs: Vec<Vec<f64>> = (0..64)
        .map(|_| (0..64).map(|_| rng.normal()).collect())
        .collect();
    let ys: Vec<Vec<f64>> = (0..64)
        .map(|_| (0..64).map(|_| rng.normal()).collect())
        .collect();
    c.bench_function("fid_64x64d", |b| {
        b.iter(|| black_box(fid(&xs, &ys).unwrap()))
    });
    c.bench_function("kid_64x64d", |b| {
        b.iter(|| black_box(kid(&xs, &ys).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_unet_forward, bench_train_step, bench_warp_and_losses, bench_metrics
}
criterion_main!(benches);
