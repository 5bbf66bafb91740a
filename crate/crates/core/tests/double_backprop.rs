//! Full training-loss gradient against central differences, including the
//! input-gradient (saliency) alignment term.

use harmonizer_core::harmonize::{evaluate_loss, loss_and_grads, Batch, HarmonizeConfig, TrainSample};
use harmonizer_core::{Architecture, ImportanceMap, Model, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn samples(n: usize, size: usize, classes: usize, seed: u64) -> Vec<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let image: Vec<f64> = (0..size * size).map(|_| rng.random::<f64>()).collect();
            let map: Vec<f64> = (0..size * size)
                .map(|p| {
                    let (r, c) = ((p / size) as f64, (p % size) as f64);
                    (-((r - 2.0).powi(2) + (c - 3.0).powi(2)) / 4.0).exp() + 0.05 * rng.random::<f64>()
                })
                .collect();
            TrainSample {
                id: format!("s{i}"),
                image: Tensor::new(vec![1, size, size], image).unwrap(),
                label: i % classes,
                human_map: Some(ImportanceMap::new(format!("s{i}"), size, size, map).unwrap()),
            }
        })
        .collect()
}

fn perturbed(model: &Model, name: &str, k: usize, d: f64) -> Model {
    let mut m = model.clone();
    let t = m.params.get_mut(name).unwrap();
    let mut v = t.values().to_vec();
    v[k] += d;
    *t = Tensor::new(t.shape().to_vec(), v).unwrap();
    m
}

#[test]
fn full_loss_gradient_matches_central_differences() {
    let cfg = HarmonizeConfig {
        lambda1: 0.5,
        lambda2: 1e-3,
        pyramid_levels: 3,
        label_smoothing: 0.1,
        ..HarmonizeConfig::default()
    };
    let model = Model::init(Architecture::toy_convnet(1, 8, 3, 4), 11).unwrap();
    let data = samples(3, 8, 4, 5);
    let refs: Vec<&TrainSample> = data.iter().collect();
    let batch = Batch::from_samples(&refs, 4, cfg.label_smoothing, cfg.pyramid_levels).unwrap();
    let (_, grads) = loss_and_grads(&model, &batch, &cfg).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, g) in &grads {
        for k in (0..g.len()).step_by(7) {
            let up = evaluate_loss(&perturbed(&model, name, k, h), &batch, &cfg)
                .unwrap()
                .total;
            let dn = evaluate_loss(&perturbed(&model, name, k, -h), &batch, &cfg)
                .unwrap()
                .total;
            let num = (up - dn) / (2.0 * h);
            let ana = g.values()[k];
            let e = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-12);
            if e > 1e-3 {
                eprintln!("{name}[{k}] analytic {ana} numeric {num}");
            }
            worst = worst.max(e);
        }
    }
    assert!(worst <= 1e-3, "max rel err {worst}");
}
