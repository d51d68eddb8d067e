//! Finite-difference checks of the three gradient paths training relies on:
//! a plain deep MLP, the diffusion loss with respect to backbone weights, and
//! the hyper-diffusion loss with respect to the hyper-network parameters.

use crate::data::{gen_toy_data, ToyProblemConfig};
use crate::diffusion::{training_loss_with, DiffusionConfig, NoiseDraws};
use crate::error::Result;
use crate::hyper::{generate_weights_on_tape, init_hyper_weights, sample_latent, HyperNetConfig};
use crate::models::{init_weights, mlp_forward, Dropout, MlpSpec, TimeEmbedding};
use crate::numerics::{finite_diff_check, GradCheckReport};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Mean squared error of a five-layer MLP on random inputs.
pub fn check_mlp(seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let spec = MlpSpec::new(vec![3, 8, 8, 8, 8, 2])?;
    let weights = init_weights(&spec, &mut rng::stream(seed, &[1]));
    let mut r = rng::stream(seed, &[2]);
    let x = Tensor::new(vec![6, 3], rng::normal_vec(&mut r, 18))?;
    let target = Tensor::new(vec![6, 2], rng::normal_vec(&mut r, 12))?;
    finite_diff_check(
        |tape, w| {
            let xi = tape.constant(x.clone());
            let out = mlp_forward(tape, &spec, w, xi, Dropout::Off)?;
            let t = tape.constant(target.clone());
            let diff = tape.sub(out, t)?;
            let sq = tape.square(diff)?;
            tape.mean(sq)
        },
        weights.values(),
        tolerance,
        None,
    )
}

/// Noise-prediction loss of the toy backbone on a frozen batch.
pub fn check_diffusion_loss(seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let cfg = DiffusionConfig::toy();
    let weights = init_weights(&cfg.backbone, &mut rng::stream(seed, &[3]));
    let ds = gen_toy_data(&ToyProblemConfig::new(0.04, 8, seed))?;
    let batch = ds.batch(&(0..8).collect::<Vec<_>>());
    let draws = NoiseDraws::sample(&cfg, 8, &mut rng::stream(seed, &[4]));
    finite_diff_check(
        |tape, w| training_loss_with(tape, &cfg, w, &batch, &draws, Dropout::Off),
        weights.values(),
        tolerance,
        None,
    )
}

/// Hyper-diffusion loss with respect to `phi` on a tiny configuration: a
/// 2-d latent, one hidden hyper layer of width 6 and a `[4, 4, 1]` backbone.
pub fn check_hyper_loss(seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let cfg = DiffusionConfig::new(10, 1, 1, TimeEmbedding { num_frequencies: 1 }, &[4])?;
    let hyper = HyperNetConfig::with_widths(&cfg.backbone, 2, &[6]);
    let phi = init_hyper_weights(&hyper, &cfg.backbone, &mut rng::stream(seed, &[5]))?;
    let ds = gen_toy_data(&ToyProblemConfig::new(0.04, 6, seed))?;
    let batch = ds.batch(&(0..6).collect::<Vec<_>>());
    let draws = NoiseDraws::sample(&cfg, 6, &mut rng::stream(seed, &[6]));
    let z = sample_latent(&hyper, &mut rng::stream(seed, &[7]));
    finite_diff_check(
        |tape, p| {
            let theta = generate_weights_on_tape(tape, &hyper, p, &z)?;
            training_loss_with(tape, &cfg, theta, &batch, &draws, Dropout::Off)
        },
        phi.values(),
        tolerance,
        None,
    )
}

/// All three checks, labelled.
pub fn run_all(seed: u64, tolerance: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    Ok(vec![
        ("five-layer MLP", check_mlp(seed, tolerance)?),
        ("diffusion loss wrt backbone", check_diffusion_loss(seed, tolerance)?),
        ("hyper-diffusion loss wrt phi", check_hyper_loss(seed, tolerance)?),
    ])
}
