//! Latent-space reconstruction: loss identities, step mechanics and the
//! stopping rule on a small model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volflow::data::make_drr_pair;
use volflow::glow::from_flow_space;
use volflow::solver::{
    recon_loss, recon_loss_gradient, reconstruct, reconstruct_family, scale_step, scale_target, StepMode,
};
use volflow::{Error, FlowModel, LatentStack, ModelConfig, Plane, Projection, ReconConfig, Tensor, Volume};

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

fn model() -> FlowModel {
    let mut m = FlowModel::new(toy(), 21).unwrap();
    m.perturb(0.05, 22);
    m
}

fn constant_image(value: f64, plane: Plane) -> Projection {
    Projection::new(Tensor::full(&[8, 8], value), plane).unwrap()
}

/// Projections of a volume the solver can reach: shallow latents zero and a
/// random deepest latent.
fn reachable_target(m: &FlowModel, seed: u64) -> (Volume, Projection, Projection) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = LatentStack::zeros(m.config());
    let top = z.levels.last_mut().unwrap();
    *top = Tensor::new(top.shape(), (0..top.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let v = Volume::new(from_flow_space(&m.decode(&z).unwrap())).unwrap();
    let (x_d, x_w) = make_drr_pair(&v);
    (v, x_d, x_w)
}

#[test]
fn loss_vanishes_at_the_source_latents() {
    let m = model();
    let z = LatentStack::zeros(m.config());
    let v = Volume::new(from_flow_space(&m.decode(&z).unwrap())).unwrap();
    let (x_d, x_w) = make_drr_pair(&v);
    let b = recon_loss(&m, &z, &x_d, Some(&x_w), &ReconConfig::biplanar()).unwrap();
    assert_eq!((b.loss, b.c_d, b.c_w), (0.0, 0.0, 0.0));
}

#[test]
fn constant_volume_against_constant_images() {
    // With zero biases, zero latents decode to the flow-space origin, i.e.
    // the constant volume 128.
    let mut m = FlowModel::new(toy(), 3).unwrap();
    m.perturb(0.0, 0);
    let z = LatentStack::zeros(m.config());
    for d in [0.0, 100.0, 255.0] {
        let cfg = ReconConfig { lambda_w: 2.0, ..ReconConfig::biplanar() };
        let b = recon_loss(&m, &z, &constant_image(d, Plane::Coronal), Some(&constant_image(40.0, Plane::Sagittal)), &cfg)
            .unwrap();
        assert!((b.c_d - (128.0 - d).powi(2)).abs() < 1e-9);
        assert!((b.c_w - 88.0f64.powi(2)).abs() < 1e-9);
        assert!((b.loss - (b.c_d + 2.0 * b.c_w)).abs() < 1e-9);
    }
}

#[test]
fn likelihood_term_vanishes_on_target() {
    let m = model();
    let (_, x_d, x_w) = reachable_target(&m, 1);
    let z = LatentStack::zeros(m.config());
    let probe = recon_loss(&m, &z, &x_d, Some(&x_w), &ReconConfig::default()).unwrap();
    let cfg = ReconConfig { log_p0: probe.log_p_top, ..ReconConfig::default() };
    let b = recon_loss(&m, &z, &x_d, Some(&x_w), &cfg).unwrap();
    assert_eq!(b.c_l, 0.0);
    let off = ReconConfig { log_p0: probe.log_p_top - 10.0, ..cfg };
    let b = recon_loss(&m, &z, &x_d, Some(&x_w), &off).unwrap();
    assert!((b.c_l - 100.0).abs() < 1e-9);
    assert!((b.loss - (b.c_d + b.c_w + 0.01 * 100.0)).abs() < 1e-9);
}

#[test]
fn first_step_is_minus_alpha_times_gradient() {
    let m = model();
    let (_, x_d, x_w) = reachable_target(&m, 2);
    let cfg = ReconConfig {
        max_iters: 1,
        mse_threshold: 0.0,
        alpha: 0.01,
        ..ReconConfig::biplanar()
    };
    let g0 = recon_loss_gradient(&m, &LatentStack::zeros(m.config()), &x_d, Some(&x_w), &cfg).unwrap();
    let r = reconstruct(&m, &x_d, Some(&x_w), &cfg).unwrap();
    assert_eq!(r.iterations, 1);
    assert!(!r.converged);
    let want: Vec<f64> = g0.data().iter().map(|g| 0.0 - 0.01 * g).collect();
    assert_eq!(r.latents.top().data(), want.as_slice());
    assert_eq!(r.trajectory.len(), 2);
    assert_eq!(r.trajectory[0].iter, 0);
}

#[test]
fn uniplanar_ignores_the_sagittal_image() {
    let m = model();
    let (_, x_d, x_w) = reachable_target(&m, 3);
    let cfg = ReconConfig { max_iters: 25, mse_threshold: 0.0, alpha: 0.01, ..ReconConfig::uniplanar() };
    let a = reconstruct(&m, &x_d, None, &cfg).unwrap();
    let noise = Projection::new(Tensor::full(&[8, 8], 3.0), Plane::Sagittal).unwrap();
    for other in [Some(&x_w), Some(&noise)] {
        let b = reconstruct(&m, &x_d, other, &cfg).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(b.mse_w, None);
    }
}

#[test]
fn biplanar_reconstruction_meets_the_stopping_rule() {
    let m = model();
    let (truth, x_d, x_w) = reachable_target(&m, 4);
    let cfg = ReconConfig { alpha: scale_step(0.2, 512), ..ReconConfig::biplanar() };
    let r = reconstruct(&m, &x_d, Some(&x_w), &cfg).unwrap();
    assert!(r.converged, "stopped after {} iterations", r.iterations);
    assert!(r.mse_d <= 9.0 && r.mse_w.unwrap() <= 9.0);
    // Only the deepest latent moves.
    for t in &r.latents.levels[..r.latents.levels.len() - 1] {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
    assert_eq!(r.trajectory.len(), r.iterations + 1);
    let last = r.trajectory.last().unwrap();
    assert_eq!((last.c_d, last.c_w), (r.mse_d, r.mse_w.unwrap()));
    assert!(truth.tensor().max_abs_diff(r.volume.tensor()).is_finite());
}

#[test]
fn adaptive_steps_never_increase_the_loss() {
    let m = model();
    let (_, x_d, x_w) = reachable_target(&m, 5);
    let cfg = ReconConfig {
        alpha: 1.0,
        max_iters: 60,
        mse_threshold: 0.0,
        lambda_l: 0.01,
        log_p0: -400.0,
        step_mode: StepMode::Adaptive,
        ..ReconConfig::default()
    };
    let r = reconstruct(&m, &x_d, Some(&x_w), &cfg).unwrap();
    assert!(r.trajectory.len() > 2);
    for w in r.trajectory.windows(2) {
        assert!(w[1].loss <= w[0].loss, "{} -> {}", w[0].loss, w[1].loss);
    }
    assert!(r.alpha <= 1.0);
}

#[test]
fn runaway_step_is_reported_as_divergence() {
    let m = model();
    let (_, x_d, x_w) = reachable_target(&m, 6);
    let cfg = ReconConfig { alpha: 1e300, ..ReconConfig::biplanar() };
    match reconstruct(&m, &x_d, Some(&x_w), &cfg) {
        Err(e @ Error::Diverged { .. }) => assert_eq!(e.category(), "solver"),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    let m = model();
    let (_, x_d, x_w) = reachable_target(&m, 7);
    let bad = [
        ReconConfig { lambda_d: -1.0, ..ReconConfig::default() },
        ReconConfig { alpha: 0.0, ..ReconConfig::default() },
        ReconConfig { max_iters: 0, ..ReconConfig::default() },
        ReconConfig { log_p0: f64::NAN, ..ReconConfig::default() },
    ];
    for cfg in &bad {
        assert!(matches!(reconstruct(&m, &x_d, Some(&x_w), cfg), Err(Error::InvalidParam(_))));
    }
    // Biplanar weights without a sagittal image.
    assert!(matches!(reconstruct(&m, &x_d, None, &ReconConfig::biplanar()), Err(Error::InvalidParam(_))));
    // Image of the wrong size.
    let small = Projection::new(Tensor::zeros(&[4, 4]), Plane::Coronal).unwrap();
    assert!(matches!(reconstruct(&m, &small, None, &ReconConfig::uniplanar()), Err(Error::Shape(_))));
}

#[test]
fn family_runs_each_target_independently() {
    let m = model();
    let (_, x_d, x_w) = reachable_target(&m, 8);
    let base = ReconConfig { max_iters: 30, alpha: 0.001, ..ReconConfig::default() };
    let targets = [-300.0, -500.0, -700.0];
    let family = reconstruct_family(&m, &x_d, Some(&x_w), &base, &targets).unwrap();
    assert_eq!(family.len(), 3);
    for (r, &t) in family.iter().zip(&targets) {
        let single = reconstruct(&m, &x_d, Some(&x_w), &ReconConfig { log_p0: t, ..base.clone() }).unwrap();
        assert_eq!(r.as_ref().unwrap().volume, single.volume);
    }
    assert!(reconstruct_family(&m, &x_d, Some(&x_w), &base, &[]).is_err());
    let flat = ReconConfig { lambda_l: 0.0, ..base };
    assert!(reconstruct_family(&m, &x_d, Some(&x_w), &flat, &targets).is_err());
}

#[test]
fn reference_scaling() {
    assert_eq!(scale_target(-5000.0, 2048), -5000.0);
    assert_eq!(scale_target(-5000.0, 1024), -2500.0);
    assert_eq!(scale_target(-7000.0, 1024), -3500.0);
    assert_eq!(scale_step(0.2, 32 * 32 * 32), 0.2);
    assert_eq!(scale_step(0.2, 16 * 16 * 16), 0.025);
    let full = ReconConfig::default().scaled_to(&ModelConfig::full());
    assert_eq!(full, ReconConfig::default());
    let desk = ReconConfig::default().scaled_to(&ModelConfig::desk());
    assert_eq!((desk.alpha, desk.log_p0), (0.025, -3500.0));
}
