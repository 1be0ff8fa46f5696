use super::*;
use crate::flow::standard_normal_log_prob;

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

fn random_volume(seed: u64, shape: [usize; 4]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normal_tensor(&mut rng, &shape, 0.3)
}

fn generic_model(cfg: ModelConfig) -> FlowModel {
    let mut m = FlowModel::new(cfg, 11).unwrap();
    m.perturb(0.05, 12);
    m
}

fn identity_model(cfg: ModelConfig) -> FlowModel {
    let mut m = FlowModel::new(cfg, 1).unwrap();
    for level in m.levels_mut() {
        for step in &mut level.steps {
            let c = step.actnorm.channels();
            step.actnorm = ActNorm::with_params(step.actnorm.name(), &vec![1.0; c], &vec![0.0; c]).unwrap();
            let mut eye = vec![0.0; c * c];
            for i in 0..c {
                eye[i * c + i] = 1.0;
            }
            let name = step.invconv.name().to_string();
            step.invconv = InvConv1x1x1::from_matrix(&name, Tensor::new(&[c, c], eye).unwrap()).unwrap();
            step.coupling.set_identity();
        }
    }
    m
}

#[test]
fn encode_decode_round_trip() {
    let m = generic_model(toy());
    let y = random_volume(3, [8, 8, 8, 1]);
    let (z, logdet) = m.encode(&y).unwrap();
    assert_eq!(z.dims(), vec![256, 256]);
    assert!(logdet.abs() > 1e-3);
    let back = m.decode(&z).unwrap();
    assert!(back.max_abs_diff(&y) <= 1e-6);
    let (z2, _) = m.encode(&back).unwrap();
    for (a, b) in z.levels.iter().zip(&z2.levels) {
        assert!(a.max_abs_diff(b) <= 1e-6);
    }
}

#[test]
fn decode_path_log_prob_matches_encoder() {
    let m = generic_model(toy());
    let y = random_volume(4, [8, 8, 8, 1]);
    let (z, _) = m.encode(&y).unwrap();
    let mut g = Graph::new();
    let (_, nodes) = m.build_decode_inputs(&mut g).unwrap();
    let mut b = m.bindings();
    for (j, t) in z.levels.iter().enumerate() {
        b.insert(latent_input(j + 1), t.clone());
    }
    let v = g.forward_eval(&b).unwrap();
    let enc = m.log_prob_volume(&y).unwrap().nats;
    let dec = v.get(nodes.log_prob).item();
    assert!((enc - dec).abs() <= 1e-8 * enc.abs().max(1.0), "{enc} vs {dec}");
}

#[test]
fn identity_model_scores_input_as_standard_normal() {
    let m = identity_model(toy());
    let y = random_volume(5, [8, 8, 8, 1]);
    let lp = m.log_prob_volume(&y).unwrap().nats;
    let want = standard_normal_log_prob(y.data());
    assert!((lp - want).abs() <= 1e-9 * want.abs(), "{lp} vs {want}");
}

#[test]
fn log_prob_is_bit_reproducible() {
    let m = generic_model(toy());
    let y = random_volume(6, [8, 8, 8, 1]);
    let a = m.log_prob_volume(&y).unwrap();
    let b = m.log_prob_volume(&y.clone()).unwrap();
    assert_eq!(a.nats.to_bits(), b.nats.to_bits());
}

#[test]
fn zero_latents_decode_to_a_fixed_volume() {
    let m = generic_model(toy());
    let z = LatentStack::zeros(m.config());
    assert_eq!(m.decode(&z).unwrap(), m.decode(&z).unwrap());
}

#[test]
fn sampling_is_seeded_and_zero_temperature_decodes_prior_means() {
    let m = generic_model(toy());
    assert_eq!(m.sample(0.7, 9).unwrap(), m.sample(0.7, 9).unwrap());
    assert_ne!(m.sample(0.7, 9).unwrap(), m.sample(0.7, 10).unwrap());
    // At T = 0 every level sits at its prior mean whatever the seed.
    let a = m.sample(0.0, 1).unwrap();
    assert_eq!(a, m.sample(0.0, 2).unwrap());
    let (z, _) = m.encode(&a).unwrap();
    assert!(z.top().max_abs_diff(m.top_prior().mean()) <= 1e-6);
    assert!(matches!(m.sample(-0.1, 0), Err(Error::InvalidParam(_))));
}

#[test]
fn initialisation_standardises_first_actnorm_output() {
    let mut m = FlowModel::new(toy(), 2).unwrap();
    assert!(!m.is_initialized());
    let batch: Vec<Tensor> = (0..3)
        .map(|s| random_volume(s, [8, 8, 8, 1]).map(|v| 4.0 * v + 1.0))
        .collect();
    assert!(matches!(m.encode(&batch[0]), Err(Error::Uninitialized(_))));
    m.initialize(&batch).unwrap();
    assert!(m.is_initialized());
    // Every actnorm was initialised on finite statistics.
    for step in m.levels().iter().flat_map(|l| &l.steps) {
        assert!(step.actnorm.scale().iter().all(|s| s.is_finite() && *s > 0.0));
    }
    // The first actnorm sees the squeezed input: 8 channels, mean ~1.
    let first = &m.levels()[0].steps[0].actnorm;
    assert!(first.bias().iter().all(|b| (b + 1.0).abs() < 0.2));
    assert!(first.scale().iter().all(|s| (s - 1.0 / 1.2).abs() < 0.1));
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let dir = std::env::temp_dir().join(format!("volflow-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("m.flw3");
    let m = generic_model(toy());
    save_checkpoint(&m, &path).unwrap();
    let loaded = load_checkpoint(&path, Some(m.config())).unwrap();
    assert_eq!(loaded.checksum(), m.checksum());
    assert!(loaded.is_initialized());
    let y = random_volume(8, [8, 8, 8, 1]);
    assert_eq!(
        loaded.log_prob_volume(&y).unwrap().nats.to_bits(),
        m.log_prob_volume(&y).unwrap().nats.to_bits()
    );

    let mut other = toy();
    other.width = 16;
    assert!(matches!(load_checkpoint(&path, Some(&other)), Err(Error::Format(_))));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4] = 2;
    let bad = dir.join("v2.flw3");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&bad, None), Err(Error::Format(_))));
    std::fs::remove_dir_all(&dir).unwrap();
}
