use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{frozen_latent, generate_weights_on_tape, init_hyper_weights, sample_latent, HyperNetConfig, LatentMode, Strategy, TrainRunConfig};
use crate::data::Dataset;
use crate::diffusion::{training_loss_with, DiffusionConfig, NoiseDraws};
use crate::error::{Error, Result};
use crate::models::{init_weights, unit_masks, Dropout, WeightVector};
use crate::numerics::{AdamState, Tape};
use crate::rng::{self, purpose};
use crate::tensor::Tensor;

/// Stream label separating the hyper-network's own draws from ensemble
/// members, which are labelled by their index.
const HYPER_MEMBER: u64 = u64::MAX;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean batch loss of every epoch.
    pub epoch_loss: Vec<f64>,
}

impl TrainingLog {
    pub fn first(&self) -> Option<f64> {
        self.epoch_loss.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.epoch_loss.last().copied()
    }
}

fn check_compat(dataset: &Dataset, config: &DiffusionConfig, run: &TrainRunConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    if dataset.data_dim() != config.data_dim || dataset.cond_dim() != config.cond_dim {
        return Err(Error::shape(
            "training_loss",
            format!(
                "dataset has data/cond dims {}/{}, model expects {}/{}",
                dataset.data_dim(),
                dataset.cond_dim(),
                config.data_dim,
                config.cond_dim
            ),
        ));
    }
    if config.schedule.steps() != run.steps {
        return Err(Error::InvalidConfig(format!(
            "run asks for {} diffusion steps, model schedule has {}",
            run.steps,
            config.schedule.steps()
        )));
    }
    Ok(())
}

fn epoch_order(n: usize, seed: u64, member: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[purpose::SHUFFLE, member, epoch as u64]));
    order
}

fn diverged(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFinite { .. } => Error::TrainingDiverged { epoch, batch },
        other => other,
    }
}

/// Trains one diffusion backbone from a seed-derived He initialization.
/// `member` labels every random stream, so distinct members see distinct
/// initializations, shuffles and noise. Dropout is active during training
/// when the run's strategy is MC-dropout.
pub fn train_diffusion(
    dataset: &Dataset,
    config: &DiffusionConfig,
    run: &TrainRunConfig,
    member: u64,
) -> Result<(WeightVector, TrainingLog)> {
    run.validate()?;
    check_compat(dataset, config, run)?;
    let seed = run.master_seed;
    let mut weights = init_weights(&config.backbone, &mut rng::stream(seed, &[purpose::INIT, member]));
    let dropout_rate = match run.strategy {
        Strategy::McDropout => run.dropout_rate,
        _ => 0.0,
    };
    let mut adam = AdamState::new(weights.len(), run.learning_rate);
    let mut log = TrainingLog::default();

    for epoch in 0..run.epochs {
        let order = epoch_order(dataset.len(), seed, member, epoch);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, rows) in order.chunks(run.batch_size).enumerate() {
            let batch = dataset.batch(rows);
            let mut noise = rng::stream(seed, &[purpose::TRAIN_NOISE, member, epoch as u64, b as u64]);
            let draws = NoiseDraws::sample(config, rows.len(), &mut noise);
            let mut drop_rng = rng::stream(seed, &[purpose::DROPOUT, member, epoch as u64, b as u64]);
            let dropout = if dropout_rate > 0.0 {
                Dropout::Draw {
                    rate: dropout_rate,
                    rng: &mut drop_rng,
                }
            } else {
                Dropout::Off
            };

            let mut tape = Tape::new();
            let w = tape.param(weights.values().clone());
            let loss = training_loss_with(&mut tape, config, w, &batch, &draws, dropout)
                .map_err(|e| diverged(e, epoch, b))?;
            let value = tape.value(loss).as_slice()[0];
            let grads = tape.backward(loss)?;
            let g = grads.get(w).expect("weights are a trainable leaf").clone();
            drop(tape);
            adam.update(weights.values_mut(), &g)?;
            total += value;
            batches += 1;
        }
        log.epoch_loss.push(total / batches as f64);
    }
    Ok((weights, log))
}

/// Trains `ensemble_size` independent backbones.
pub fn train_deep_ensemble(
    dataset: &Dataset,
    config: &DiffusionConfig,
    run: &TrainRunConfig,
) -> Result<Vec<(WeightVector, TrainingLog)>> {
    let run = TrainRunConfig {
        strategy: Strategy::DeepEnsemble,
        ..run.clone()
    };
    run.validate()?;
    (0..run.ensemble_size as u64)
        .map(|m| train_diffusion(dataset, config, &run, m))
        .collect()
}

/// Trains the hyper-network parameters `phi` through the diffusion loss.
/// Each batch draws one latent, generates `theta = h_phi(z)` on the tape and
/// backpropagates through `theta` into `phi`, the only trainable leaf.
pub fn train_hyper_diffusion(
    dataset: &Dataset,
    config: &DiffusionConfig,
    hyper: &HyperNetConfig,
    run: &TrainRunConfig,
) -> Result<(WeightVector, TrainingLog)> {
    run.validate()?;
    check_compat(dataset, config, run)?;
    hyper.validate(&config.backbone)?;
    let seed = run.master_seed;
    let mut phi = init_hyper_weights(hyper, &config.backbone, &mut rng::stream(seed, &[purpose::INIT, HYPER_MEMBER]))?;
    let mut adam = AdamState::new(phi.len(), run.learning_rate);
    let mut log = TrainingLog::default();
    let frozen = frozen_latent(hyper);

    for epoch in 0..run.epochs {
        let order = epoch_order(dataset.len(), seed, HYPER_MEMBER, epoch);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, rows) in order.chunks(run.batch_size).enumerate() {
            let batch = dataset.batch(rows);
            let path = [epoch as u64, b as u64];
            let z = match hyper.latent_mode {
                LatentMode::Random => {
                    sample_latent(hyper, &mut rng::stream(seed, &[purpose::LATENT, path[0], path[1]]))
                }
                LatentMode::Frozen => frozen.clone(),
            };
            let mut noise = rng::stream(seed, &[purpose::TRAIN_NOISE, HYPER_MEMBER, path[0], path[1]]);
            let draws = NoiseDraws::sample(config, rows.len(), &mut noise);

            let mut tape = Tape::new();
            let phi_var = tape.param(phi.values().clone());
            let loss = generate_weights_on_tape(&mut tape, hyper, phi_var, &z)
                .and_then(|theta| training_loss_with(&mut tape, config, theta, &batch, &draws, Dropout::Off))
                .map_err(|e| diverged(e, epoch, b))?;
            let value = tape.value(loss).as_slice()[0];
            let grads = tape.backward(loss)?;
            let g = grads.get(phi_var).expect("phi is a trainable leaf").clone();
            drop(tape);
            adam.update(phi.values_mut(), &g)?;
            total += value;
            batches += 1;
        }
        log.epoch_loss.push(total / batches as f64);
    }
    Ok((phi, log))
}

/// A pseudo-member of an MC-dropout ensemble: shared weights plus the seed of
/// the dropout masks frozen for every reverse step.
#[derive(Clone, Debug)]
pub struct DropoutMember {
    pub weights: WeightVector,
    pub mask_seed: u64,
    pub rate: f64,
}

impl DropoutMember {
    /// Pseudo-member `index` under `master_seed`.
    pub fn draw(weights: &WeightVector, rate: f64, master_seed: u64, index: usize) -> Result<Self> {
        if !(rate > 0.0 && rate < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mc-dropout needs a dropout rate in (0, 1), got {rate}"
            )));
        }
        Ok(Self {
            weights: weights.clone(),
            mask_seed: rng::derive_seed(master_seed, &[purpose::DROPOUT, purpose::MEMBER, index as u64]),
            rate,
        })
    }

    /// One `[width]` mask per hidden layer.
    pub fn masks(&self) -> Vec<Tensor> {
        unit_masks(
            self.weights.spec(),
            self.rate,
            &mut rng::stream(self.mask_seed, &[purpose::DROPOUT]),
        )
    }
}

/// Pseudo-members `0..count` under `master_seed`, each with its own mask seed.
pub fn mc_dropout_weights(weights: &WeightVector, count: usize, rate: f64, master_seed: u64) -> Result<Vec<DropoutMember>> {
    (0..count)
        .map(|i| DropoutMember::draw(weights, rate, master_seed, i))
        .collect()
}
