//! Hyper-network `h_phi: z -> theta` producing diffusion-backbone weights,
//! and the training loops for hyper-diffusion and its baselines.

mod train;

pub use train::{
    mc_dropout_weights, train_deep_ensemble, train_diffusion, train_hyper_diffusion, DropoutMember,
    TrainingLog,
};

use serde::{Deserialize, Serialize};

use crate::diffusion::DEFAULT_STEPS;
use crate::error::{Error, Result};
use crate::models::{self, Dropout, MlpSpec, MlpWorkspace, WeightVector};
use crate::numerics::{Tape, Var, DEFAULT_LEARNING_RATE};
use crate::rng::{self, purpose, StreamRng};
use crate::tensor::Tensor;

/// How latent inputs are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentMode {
    /// Fresh `z ~ N(0, sigma_z^2 I)` for every batch and every weight draw.
    #[default]
    Random,
    /// One fixed `z` for training and inference; collapses the hyper-network
    /// to a single diffusion model.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperNetConfig {
    pub latent_dim: usize,
    pub sigma_z: f64,
    pub hyper_spec: MlpSpec,
    pub output_scale: f64,
    #[serde(default)]
    pub latent_mode: LatentMode,
}

impl HyperNetConfig {
    /// Five linear layers of width 128 mapping a 16-d latent to every
    /// parameter of `primary`.
    pub fn for_primary(primary: &MlpSpec) -> Self {
        Self::with_widths(primary, 16, &[128, 128, 128, 128])
    }

    pub fn with_widths(primary: &MlpSpec, latent_dim: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![latent_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(primary.parameter_count());
        Self {
            latent_dim,
            sigma_z: 1.0,
            hyper_spec: MlpSpec::new(sizes).expect("positive widths"),
            output_scale: 0.1,
            latent_mode: LatentMode::Random,
        }
    }

    pub fn validate(&self, primary: &MlpSpec) -> Result<()> {
        if !(self.sigma_z > 0.0 && self.sigma_z.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma_z must be positive, got {}", self.sigma_z)));
        }
        if !(self.output_scale.is_finite() && self.output_scale != 0.0) {
            return Err(Error::InvalidConfig("output_scale must be finite and non-zero".into()));
        }
        if self.hyper_spec.input_dim() != self.latent_dim {
            return Err(Error::InvalidConfig(format!(
                "hyper-network input {} != latent dim {}",
                self.hyper_spec.input_dim(),
                self.latent_dim
            )));
        }
        if self.hyper_spec.output_dim() != primary.parameter_count() {
            return Err(Error::InvalidConfig(format!(
                "hyper-network emits {} values, primary network has {} parameters",
                self.hyper_spec.output_dim(),
                primary.parameter_count()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    HyperDiffusion,
    DeepEnsemble,
    McDropout,
}

impl Strategy {
    pub fn tag(&self) -> &'static str {
        match self {
            Strategy::HyperDiffusion => "hyper-diffusion",
            Strategy::DeepEnsemble => "deep-ensemble",
            Strategy::McDropout => "mc-dropout",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub master_seed: u64,
    pub strategy: Strategy,
    pub ensemble_size: usize,
    pub dropout_rate: f64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 32,
            learning_rate: DEFAULT_LEARNING_RATE,
            steps: DEFAULT_STEPS,
            master_seed: 0,
            strategy: Strategy::HyperDiffusion,
            ensemble_size: 5,
            dropout_rate: 0.1,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("bad learning rate {}", self.learning_rate)));
        }
        match self.strategy {
            Strategy::DeepEnsemble if self.ensemble_size < 2 => Err(Error::InvalidConfig(format!(
                "a deep ensemble needs at least 2 members, got {}",
                self.ensemble_size
            ))),
            Strategy::McDropout if !(self.dropout_rate > 0.0 && self.dropout_rate < 1.0) => {
                Err(Error::InvalidConfig(format!(
                    "mc-dropout needs a dropout rate in (0, 1), got {}",
                    self.dropout_rate
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Initial `phi`: He-normal everywhere, except that the output-layer bias
/// holds a He-initialized primary network divided by `output_scale`. At
/// initialization every latent therefore generates that base network plus a
/// small latent-dependent perturbation.
pub fn init_hyper_weights(config: &HyperNetConfig, primary: &MlpSpec, rng: &mut StreamRng) -> Result<WeightVector> {
    config.validate(primary)?;
    let mut phi = models::init_weights(&config.hyper_spec, rng);
    let base = models::init_weights(primary, rng);
    let last = config.hyper_spec.layout().segments.pop().expect("at least one layer");
    let values = phi.values_mut().make_mut();
    for (b, t) in values[last.bias].iter_mut().zip(base.values().as_slice()) {
        *b = t / config.output_scale;
    }
    Ok(phi)
}

/// `z ~ N(0, sigma_z^2 I)` of length `latent_dim`.
pub fn sample_latent(config: &HyperNetConfig, rng: &mut StreamRng) -> Tensor {
    let z = rng::normal_vec(rng, config.latent_dim)
        .into_iter()
        .map(|v| v * config.sigma_z)
        .collect();
    Tensor::from_parts(vec![config.latent_dim], z)
}

/// The single latent used in [`LatentMode::Frozen`]. It does not depend on
/// any seed, so sampling always sees the latent the model was trained on.
pub fn frozen_latent(config: &HyperNetConfig) -> Tensor {
    sample_latent(config, &mut rng::stream(0, &[purpose::LATENT, u64::MAX]))
}

/// Latent for inference weight draw `index` under `master_seed`.
pub fn member_latent(config: &HyperNetConfig, master_seed: u64, index: usize) -> Tensor {
    match config.latent_mode {
        LatentMode::Random => sample_latent(
            config,
            &mut rng::stream(master_seed, &[purpose::LATENT, purpose::MEMBER, index as u64]),
        ),
        LatentMode::Frozen => frozen_latent(config),
    }
}

fn check_latent(config: &HyperNetConfig, z: &Tensor) -> Result<()> {
    if z.len() != config.latent_dim {
        return Err(Error::shape(
            "generate_weights",
            format!("latent has {} entries, expected {}", z.len(), config.latent_dim),
        ));
    }
    Ok(())
}

/// `theta = output_scale * h_phi(z)`, evaluated without a tape.
pub fn generate_weights(
    config: &HyperNetConfig,
    phi: &WeightVector,
    z: &Tensor,
    primary: &MlpSpec,
) -> Result<WeightVector> {
    check_latent(config, z)?;
    config.validate(primary)?;
    if phi.spec() != &config.hyper_spec {
        return Err(Error::LayoutMismatch("phi does not match the hyper-network spec".into()));
    }
    let mut out = Vec::new();
    models::mlp_eval_shared_tail(
        phi,
        z.as_slice(),
        config.latent_dim,
        &[],
        None,
        &mut MlpWorkspace::default(),
        &mut out,
    )?;
    out.iter_mut().for_each(|v| *v *= config.output_scale);
    WeightVector::from_values(primary, Tensor::new(vec![out.len()], out)?)
}

/// Records `theta = output_scale * h_phi(z)` on the tape; the result is a
/// `[1, parameter_count]` node differentiable with respect to `phi`.
pub fn generate_weights_on_tape(
    tape: &mut Tape,
    config: &HyperNetConfig,
    phi: Var,
    z: &Tensor,
) -> Result<Var> {
    check_latent(config, z)?;
    let zv = tape.constant(z.reshape(vec![1, config.latent_dim])?);
    let raw = models::mlp_forward(tape, &config.hyper_spec, phi, zv, Dropout::Off)?;
    tape.scale(raw, config.output_scale)
}

#[cfg(test)]
mod tests;
