use super::*;
use crate::data::{gen_toy_data, Dataset, ToyProblemConfig};
use crate::diffusion::{sample_batch, training_loss_with, DiffusionConfig, NoiseDraws};
use crate::models::TimeEmbedding;
use crate::numerics::finite_diff_check;

/// Backbone `[1 + 1 + 2, 4, 1]` with a 2-d latent and one hidden hyper layer.
fn tiny() -> (DiffusionConfig, HyperNetConfig) {
    let cfg = DiffusionConfig::new(10, 1, 1, TimeEmbedding { num_frequencies: 1 }, &[4]).unwrap();
    let hyper = HyperNetConfig::with_widths(&cfg.backbone, 2, &[6]);
    (cfg, hyper)
}

fn small() -> (DiffusionConfig, HyperNetConfig) {
    let cfg = DiffusionConfig::new(20, 1, 1, TimeEmbedding { num_frequencies: 4 }, &[16, 16]).unwrap();
    let hyper = HyperNetConfig::with_widths(&cfg.backbone, 4, &[16]);
    (cfg, hyper)
}

fn phi_for(hyper: &HyperNetConfig, primary: &MlpSpec, seed: u64) -> WeightVector {
    init_hyper_weights(hyper, primary, &mut rng::stream(seed, &[])).unwrap()
}

#[test]
fn latent_has_requested_spread() {
    let (_, mut hyper) = tiny();
    hyper.latent_dim = 16;
    hyper.sigma_z = 0.7;
    let mut r = rng::stream(1, &[]);
    let draws: Vec<f64> = (0..8_000).flat_map(|_| sample_latent(&hyper, &mut r).to_vec()).collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let std = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std - 0.7).abs() < 0.02 * 0.7, "{std}");
    assert_eq!(sample_latent(&hyper, &mut rng::stream(2, &[])), sample_latent(&hyper, &mut rng::stream(2, &[])));
}

#[test]
fn config_validation() {
    let (cfg, hyper) = tiny();
    assert!(hyper.validate(&cfg.backbone).is_ok());
    for sigma in [0.0, -1.0, f64::NAN] {
        let bad = HyperNetConfig { sigma_z: sigma, ..hyper.clone() };
        assert!(matches!(bad.validate(&cfg.backbone), Err(Error::InvalidConfig(_))));
    }
    let bad = HyperNetConfig { output_scale: 0.0, ..hyper.clone() };
    assert!(bad.validate(&cfg.backbone).is_err());
    let other = DiffusionConfig::toy();
    assert!(hyper.validate(&other.backbone).is_err());
    let bad = HyperNetConfig { latent_dim: 3, ..hyper };
    assert!(bad.validate(&cfg.backbone).is_err());
}

#[test]
fn zero_phi_generates_zero_theta() {
    let (cfg, hyper) = tiny();
    let phi = WeightVector::zeros(&hyper.hyper_spec);
    let z = sample_latent(&hyper, &mut rng::stream(3, &[]));
    let theta = generate_weights(&hyper, &phi, &z, &cfg.backbone).unwrap();
    assert!(theta.values().as_slice().iter().all(|&v| v == 0.0));
    assert_eq!(theta.len(), cfg.backbone.parameter_count());
}

#[test]
fn distinct_latents_give_distinct_weights() {
    let (cfg, hyper) = tiny();
    let phi = phi_for(&hyper, &cfg.backbone, 4);
    let a = generate_weights(&hyper, &phi, &member_latent(&hyper, 0, 0), &cfg.backbone).unwrap();
    let b = generate_weights(&hyper, &phi, &member_latent(&hyper, 0, 1), &cfg.backbone).unwrap();
    assert_ne!(a, b);
    let frozen = HyperNetConfig { latent_mode: LatentMode::Frozen, ..hyper };
    assert_eq!(member_latent(&frozen, 5, 0), member_latent(&frozen, 5, 7));
    // training and sampling seeds differ; the frozen latent must not
    assert_eq!(member_latent(&frozen, 5, 0), member_latent(&frozen, 9, 0));
}

#[test]
fn fast_path_matches_tape() {
    let (cfg, hyper) = small();
    let phi = phi_for(&hyper, &cfg.backbone, 5);
    let z = sample_latent(&hyper, &mut rng::stream(6, &[]));
    let fast = generate_weights(&hyper, &phi, &z, &cfg.backbone).unwrap();
    let mut tape = Tape::new();
    let p = tape.constant(phi.values().clone());
    let theta = generate_weights_on_tape(&mut tape, &hyper, p, &z).unwrap();
    for (a, b) in fast.values().as_slice().iter().zip(tape.value(theta).as_slice()) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn init_generates_base_network_plus_perturbation() {
    let (cfg, hyper) = small();
    let phi = phi_for(&hyper, &cfg.backbone, 7);
    let zero = Tensor::zeros(&[hyper.latent_dim]);
    let base = generate_weights(&hyper, &phi, &zero, &cfg.backbone).unwrap();
    let z = sample_latent(&hyper, &mut rng::stream(8, &[]));
    let drawn = generate_weights(&hyper, &phi, &z, &cfg.backbone).unwrap();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = drawn.values().as_slice().iter().zip(base.values().as_slice()).map(|(a, b)| a - b).collect();
    assert!(norm(&diff) > 0.0);
    assert!(norm(&diff) < norm(base.values().as_slice()));
}

#[test]
fn output_bias_shifts_theta_by_output_scale() {
    let (cfg, hyper) = small();
    let phi = phi_for(&hyper, &cfg.backbone, 7);
    let z = sample_latent(&hyper, &mut rng::stream(8, &[]));
    let before = generate_weights(&hyper, &phi, &z, &cfg.backbone).unwrap();
    let bias = hyper.hyper_spec.layout().segments.pop().unwrap().bias;
    let mut shifted = phi.clone();
    shifted.values_mut().make_mut()[bias.start + 3] += 0.25;
    let after = generate_weights(&hyper, &shifted, &z, &cfg.backbone).unwrap();
    for (k, (a, b)) in after.values().as_slice().iter().zip(before.values().as_slice()).enumerate() {
        let want = if k == 3 { 0.25 * hyper.output_scale } else { 0.0 };
        assert!((a - b - want).abs() < 1e-12, "coordinate {k}: {}", a - b);
    }
}

#[test]
fn theta_gradient_matches_finite_differences() {
    let (_, hyper) = tiny();
    let (cfg, _) = tiny();
    let phi = phi_for(&hyper, &cfg.backbone, 9);
    let z = sample_latent(&hyper, &mut rng::stream(10, &[]));
    let probe = Tensor::new(vec![1, cfg.backbone.parameter_count()], rng::normal_vec(&mut rng::stream(11, &[]), cfg.backbone.parameter_count())).unwrap();
    let report = finite_diff_check(
        |tape, p| {
            let theta = generate_weights_on_tape(tape, &hyper, p, &z)?;
            let c = tape.constant(probe.clone());
            let prod = tape.mul(theta, c)?;
            tape.sum(prod)
        },
        phi.values(),
        1e-4,
        None,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn hyper_loss_gradient_matches_finite_differences() {
    let (cfg, hyper) = tiny();
    let phi = phi_for(&hyper, &cfg.backbone, 12);
    let ds = gen_toy_data(&ToyProblemConfig::new(0.04, 6, 13)).unwrap();
    let batch = ds.batch(&[0, 1, 2, 3, 4, 5]);
    let draws = NoiseDraws::sample(&cfg, 6, &mut rng::stream(14, &[]));
    let z = sample_latent(&hyper, &mut rng::stream(15, &[]));
    let report = finite_diff_check(
        |tape, p| {
            let theta = generate_weights_on_tape(tape, &hyper, p, &z)?;
            training_loss_with(tape, &cfg, theta, &batch, &draws, Dropout::Off)
        },
        phi.values(),
        1e-4,
        None,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.checked > phi.len() / 2);
}

fn small_run(epochs: usize) -> TrainRunConfig {
    TrainRunConfig { epochs, steps: 20, batch_size: 16, ..Default::default() }
}

#[test]
fn hyper_training_progresses_and_does_not_collapse() {
    let (cfg, hyper) = small();
    let ds = gen_toy_data(&ToyProblemConfig::new(0.04, 64, 16)).unwrap();
    let (phi, log) = train_hyper_diffusion(&ds, &cfg, &hyper, &small_run(150)).unwrap();
    assert_eq!(log.epoch_loss.len(), 150);
    let head: f64 = log.epoch_loss[..5].iter().sum();
    let tail: f64 = log.epoch_loss[145..].iter().sum();
    assert!(tail < 0.5 * head, "{log:?}");
    let thetas: Vec<WeightVector> = (0..4)
        .map(|i| generate_weights(&hyper, &phi, &member_latent(&hyper, 0, i), &cfg.backbone).unwrap())
        .collect();
    for i in 1..4 {
        assert_ne!(thetas[0].values(), thetas[i].values());
    }
}

#[test]
fn training_is_reproducible() {
    let (cfg, hyper) = small();
    let ds = gen_toy_data(&ToyProblemConfig::new(0.04, 32, 17)).unwrap();
    let a = train_hyper_diffusion(&ds, &cfg, &hyper, &small_run(2)).unwrap();
    let b = train_hyper_diffusion(&ds, &cfg, &hyper, &small_run(2)).unwrap();
    assert_eq!(a, b);
    let other = TrainRunConfig { master_seed: 1, ..small_run(2) };
    assert_ne!(train_hyper_diffusion(&ds, &cfg, &hyper, &other).unwrap().0, a.0);
}

#[test]
fn run_must_match_schedule() {
    let (cfg, hyper) = small();
    let ds = gen_toy_data(&ToyProblemConfig::new(0.04, 32, 17)).unwrap();
    let run = TrainRunConfig { steps: 100, ..small_run(1) };
    assert!(matches!(train_hyper_diffusion(&ds, &cfg, &hyper, &run), Err(Error::InvalidConfig(_))));
    assert!(train_diffusion(&ds, &cfg, &run, 0).is_err());
}

#[test]
fn overflowing_data_reports_divergence() {
    let (cfg, _) = small();
    let ds = Dataset::from_pairs(&vec![(0.0, 1e200); 16]).unwrap();
    let err = train_diffusion(&ds, &cfg, &small_run(1), 0).unwrap_err();
    assert!(matches!(err, Error::TrainingDiverged { epoch: 0, batch: 0 }), "{err}");
}

#[test]
fn deep_ensemble_members_differ() {
    let (cfg, _) = small();
    let ds = gen_toy_data(&ToyProblemConfig::new(0.04, 32, 18)).unwrap();
    let run = TrainRunConfig { ensemble_size: 3, ..small_run(3) };
    let members = train_deep_ensemble(&ds, &cfg, &run).unwrap();
    assert_eq!(members.len(), 3);
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    for i in 0..3 {
        for j in i + 1..3 {
            let c = cos(members[i].0.values().as_slice(), members[j].0.values().as_slice());
            assert!(c < 0.99, "members {i},{j}: cos {c}");
        }
    }
    let again = train_deep_ensemble(&ds, &cfg, &run).unwrap();
    assert_eq!(members, again);
    let single = TrainRunConfig { ensemble_size: 1, ..run };
    assert!(train_deep_ensemble(&ds, &cfg, &single).is_err());
}

#[test]
fn mc_dropout_members() {
    let (cfg, _) = small();
    let w = models::init_weights(&cfg.backbone, &mut rng::stream(19, &[]));
    for rate in [0.0, 1.0, -0.1] {
        assert!(matches!(mc_dropout_weights(&w, 3, rate, 0), Err(Error::InvalidConfig(_))));
    }
    let members = mc_dropout_weights(&w, 3, 0.3, 0).unwrap();
    assert_ne!(members[0].mask_seed, members[1].mask_seed);
    assert_eq!(members[0].masks(), members[0].masks());
    assert_ne!(members[0].masks(), members[1].masks());
    let run = |m: &DropoutMember| {
        let mut s = [rng::stream(20, &[])];
        sample_batch(&cfg, &m.weights, &[0.5], &mut s, Some(&m.masks())).unwrap()
    };
    assert_ne!(run(&members[0]), run(&members[1]));
    assert_eq!(run(&members[2]), run(&members[2]));
}

#[test]
fn mc_dropout_training_uses_dropout() {
    let (cfg, _) = small();
    let ds = gen_toy_data(&ToyProblemConfig::new(0.04, 32, 21)).unwrap();
    let plain = train_diffusion(&ds, &cfg, &small_run(2), 0).unwrap();
    let dropout = TrainRunConfig { strategy: Strategy::McDropout, dropout_rate: 0.2, ..small_run(2) };
    let dropped = train_diffusion(&ds, &cfg, &dropout, 0).unwrap();
    assert_ne!(plain.0, dropped.0);
}
