//! Maximum-likelihood training loop on small phantoms.

use rand::{Rng, SeedableRng};
use volflow::data::{generate_phantom, PhantomSpec};
use volflow::glow::{load_checkpoint, to_flow_space};
use volflow::train::{nll_loss, nll_loss_and_grad, train, Adam};
use volflow::{Error, FlowModel, ModelConfig, TrainConfig, Volume};

fn toy() -> ModelConfig {
    ModelConfig {
        levels: 2,
        depth: 2,
        width: 8,
        input_shape: [8, 8, 8, 1],
        learn_top: true,
        learn_split_prior: true,
    }
}

fn phantoms(n: u64) -> Vec<Volume> {
    let spec = PhantomSpec { shape: [8, 8, 8], ..PhantomSpec::default() };
    (0..n).map(|s| generate_phantom(&spec.with_seed(s)).unwrap()).collect()
}

fn short(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_schedule: vec![(0, 4)],
        learning_rate: 2e-3,
        warmup_epochs: 0.0,
        ..TrainConfig::default()
    }
}

fn initialized(seed: u64, data: &[Volume]) -> FlowModel {
    let mut m = FlowModel::new(toy(), seed).unwrap();
    let batch: Vec<_> = data.iter().map(|v| to_flow_space(v.tensor())).collect();
    m.initialize(&batch).unwrap();
    m
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let data = phantoms(8);
    let mut m = initialized(1, &data);
    let before = m.checksum();
    let cfg = TrainConfig { learning_rate: 0.0, ..short(2) };
    let report = train(&mut m, &data, &cfg).unwrap();
    assert_eq!(report.checksum, before);
    assert_eq!(m.checksum(), before);
}

#[test]
fn training_is_reproducible() {
    let data = phantoms(8);
    let run = || {
        let mut m = FlowModel::new(toy(), 2).unwrap();
        let r = train(&mut m, &data, &short(2)).unwrap();
        (r, m.checksum())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert!(a.same_outcome(&b));
    assert_eq!(ca, cb);
    let mut other = FlowModel::new(toy(), 2).unwrap();
    let c = train(&mut other, &data, &TrainConfig { seed: 9, ..short(2) }).unwrap();
    assert!(!a.same_outcome(&c));
}

#[test]
fn small_step_lowers_the_batch_loss() {
    let data = phantoms(4);
    let mut m = initialized(3, &data);
    let batch: Vec<_> = data.iter().map(|v| to_flow_space(v.tensor())).collect();
    let (before, grads) = nll_loss_and_grad(&m, &batch).unwrap();
    let cfg = TrainConfig::default();
    Adam::default().step(&mut m, &grads, 1e-4, &cfg).unwrap();
    let after = nll_loss(&m, &batch).unwrap();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn duplicated_batch_has_the_same_mean_loss() {
    let data = phantoms(1);
    let m = initialized(4, &data);
    let x = to_flow_space(data[0].tensor());
    let (single, g1) = nll_loss_and_grad(&m, &[x.clone()]).unwrap();
    let (double, g2) = nll_loss_and_grad(&m, &[x.clone(), x]).unwrap();
    assert!((single - double).abs() <= 1e-12 * single.abs());
    for (name, t) in &g1 {
        assert!(t.max_abs_diff(&g2[name]) <= 1e-12 * (1.0 + t.squared_norm().sqrt()));
    }
}

#[test]
fn a_few_epochs_improve_the_likelihood() {
    let data = phantoms(16);
    let mut m = FlowModel::new(toy(), 5).unwrap();
    let report = train(&mut m, &data, &short(4)).unwrap();
    let nll: Vec<f64> = report.epochs.iter().map(|r| r.mean_nll).collect();
    assert!(nll[3] < nll[0], "{nll:?}");
    let tsv = report.to_tsv();
    assert!(tsv.starts_with("epoch\tmean_nll\tbits_per_dim\tseconds\n"));
    assert_eq!(tsv.lines().count(), 5);
}

#[test]
fn final_checkpoint_matches_the_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.flw3");
    let data = phantoms(4);
    let mut m = FlowModel::new(toy(), 6).unwrap();
    let cfg = TrainConfig { checkpoint_path: Some(path.clone()), ..short(1) };
    let report = train(&mut m, &data, &cfg).unwrap();
    let loaded = load_checkpoint(&path, Some(&toy())).unwrap();
    assert_eq!(loaded.checksum(), report.checksum);
}

#[test]
fn batch_schedule_and_validation() {
    let long = TrainConfig::long_schedule();
    assert_eq!(long.epochs, 1040);
    for (epoch, size) in [(0, 16), (999, 16), (1000, 4), (1009, 4), (1010, 1), (1039, 1)] {
        assert_eq!(long.batch_size(epoch), size);
    }
    let bad = [
        TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
        TrainConfig { batch_schedule: vec![], ..TrainConfig::default() },
        TrainConfig { batch_schedule: vec![(1, 4)], ..TrainConfig::default() },
        TrainConfig { batch_schedule: vec![(0, 4), (0, 2)], ..TrainConfig::default() },
        TrainConfig { batch_schedule: vec![(0, 0)], ..TrainConfig::default() },
        TrainConfig { clip_norm: Some(0.0), ..TrainConfig::default() },
    ];
    for cfg in &bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    let mut m = FlowModel::new(toy(), 7).unwrap();
    assert!(matches!(train(&mut m, &[], &short(1)), Err(Error::InvalidParam(_))));
    let wrong = vec![Volume::constant([4, 4, 4, 1], 10.0)];
    assert!(matches!(train(&mut m, &wrong, &short(1)), Err(Error::Shape(_))));
}

#[test]
fn identity_flow_scores_noise_as_a_standard_normal() {
    // Zero-noise perturbation keeps every coupling at the identity and every
    // actnorm at scale 1, bias 0; the 1x1x1 convolutions are rotations.
    let mut m = FlowModel::new(toy(), 8).unwrap();
    m.perturb(0.0, 0);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let dim = toy().dim();
    let batch: Vec<_> = (0..4)
        .map(|_| {
            let data = (0..dim).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            volflow::Tensor::new(&[8, 8, 8, 1], data).unwrap()
        })
        .collect();
    let nll = nll_loss(&m, &batch).unwrap();
    let expected = dim as f64 / 2.0 * ((2.0 * std::f64::consts::PI).ln() + 1.0);
    assert!((nll - expected).abs() <= 0.05 * expected, "{nll} vs {expected}");
}

#[test]
fn tempered_samples_look_like_training_data() {
    let data = phantoms(64);
    let mut m = FlowModel::new(toy(), 9).unwrap();
    train(&mut m, &data, &TrainConfig { epochs: 12, ..short(12) }).unwrap();
    let lps: Vec<f64> = data
        .iter()
        .map(|v| m.log_prob_volume(&to_flow_space(v.tensor())).unwrap().nats)
        .collect();
    let mean = lps.iter().sum::<f64>() / lps.len() as f64;
    let std = (lps.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / lps.len() as f64).sqrt();
    for seed in 0..8 {
        let x = m.sample(0.7, seed).unwrap();
        let lp = m.log_prob_volume(&x).unwrap().nats;
        assert!((lp - mean).abs() <= 3.0 * std, "seed {seed}: {lp} vs {mean} +- {std}");
    }
}
