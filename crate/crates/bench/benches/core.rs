use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use harmonizer_core::diffcore::kernels::conv2d;
use harmonizer_core::harmonize::{loss_and_grads, Batch, HarmonizeConfig, TrainSample};
use harmonizer_core::metrics::spearman;
use harmonizer_core::pyramid::build_pyramid;
use harmonizer_core::seeding;
use harmonizer_core::stimuli::{flood_fill_order, phase_scramble};
use harmonizer_core::{Architecture, GrayImage, ImportanceMap, Model, Tensor};

fn noise(n: usize, salt: u64) -> Vec<f64> {
    (0..n as u64)
        .map(|i| {
            let x = (i.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            (x >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

fn map(side: usize, salt: u64) -> ImportanceMap {
    ImportanceMap::new("b", side, side, noise(side * side, salt)).unwrap()
}

fn kernels(c: &mut Criterion) {
    let x = Tensor::new(vec![16, 8, 32, 32], noise(16 * 8 * 32 * 32, 1)).unwrap();
    let w = Tensor::new(vec![8, 8, 3, 3], noise(8 * 8 * 9, 2)).unwrap();
    c.bench_function("conv2d 16x8x32x32 k3", |b| b.iter(|| conv2d(black_box(&x), &w, 1)));
}

fn training(c: &mut Criterion) {
    let cfg = HarmonizeConfig::desk(0.3, 0);
    let model = Model::init(Architecture::toy_convnet(1, 32, 4, 10), 0).unwrap();
    let samples: Vec<TrainSample> = (0..16)
        .map(|i| TrainSample {
            id: format!("s{i}"),
            image: Tensor::new(vec![1, 32, 32], noise(1024, 10 + i as u64)).unwrap(),
            label: i % 10,
            human_map: Some(map(32, 100 + i as u64)),
        })
        .collect();
    let refs: Vec<&TrainSample> = samples.iter().collect();
    let batch = Batch::from_samples(&refs, 10, cfg.label_smoothing, cfg.pyramid_levels).unwrap();
    c.bench_function("loss_and_grads batch 16", |b| {
        b.iter(|| loss_and_grads(&model, black_box(&batch), &cfg).unwrap())
    });
    let plain = HarmonizeConfig { lambda1: 0.0, ..cfg };
    c.bench_function("loss_and_grads batch 16 no alignment", |b| {
        b.iter(|| loss_and_grads(&model, black_box(&batch), &plain).unwrap())
    });
}

fn maps(c: &mut Criterion) {
    let (a, m) = (noise(1024, 3), noise(1024, 4));
    c.bench_function("spearman 1024", |b| b.iter(|| spearman(black_box(&a), &m).unwrap()));
    let big = map(224, 5);
    c.bench_function("pyramid 224 x5", |b| {
        b.iter(|| build_pyramid(black_box(&big), 5).unwrap())
    });
    let fill = map(64, 6);
    c.bench_function("flood fill 64x64 k1024", |b| {
        b.iter(|| flood_fill_order(black_box(&fill), 1024, 0.1, &mut seeding::root(0)).unwrap())
    });
    let img = GrayImage::new(64, 64, noise(4096, 7)).unwrap();
    c.bench_function("phase scramble 64x64", |b| {
        b.iter(|| phase_scramble(black_box(&img), &mut seeding::root(0)).unwrap())
    });
}

criterion_group!(benches, kernels, training, maps);
criterion_main!(benches);
