//! Conditional denoising diffusion over low-dimensional targets.
//!
//! The backbone predicts the noise `eps` that was mixed into `x_t`; the score
//! of the noised marginal is recovered as `-eps / sqrt(1 - alpha_bar_t)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{self, mlp_eval_shared_tail, Dropout, MlpSpec, MlpWorkspace, TimeEmbedding, WeightVector};
use crate::numerics::{Tape, Var};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 100;

/// Linear variance schedule and its cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `1e-4 * 1000 / T` to `0.02 * 1000 / T`, clipped to
    /// `(0, 0.999]`. The rescaling keeps the total injected noise of the
    /// usual 1000-step schedule.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidConfig(format!("diffusion needs at least 2 steps, got {steps}")));
        }
        let scale = 1000.0 / steps as f64;
        let (start, end) = (1e-4 * scale, 0.02 * scale);
        let beta: Vec<f64> = (0..steps)
            .map(|t| {
                let b = start + (end - start) * t as f64 / (steps - 1) as f64;
                b.clamp(f64::MIN_POSITIVE, 0.999)
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }
}

/// Score `grad log p(x_t)` implied by a noise prediction.
pub fn score_from_eps(eps: f64, alpha_bar: f64) -> f64 {
    -eps / (1.0 - alpha_bar).sqrt()
}

pub fn eps_from_score(score: f64, alpha_bar: f64) -> f64 {
    -score * (1.0 - alpha_bar).sqrt()
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise(x0: &Tensor, t: usize, schedule: &NoiseSchedule, eps: &Tensor) -> Result<Tensor> {
    schedule.check_step(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::shape(
            "forward_noise",
            format!("{:?} vs {:?}", x0.shape(), eps.shape()),
        ));
    }
    let ab = schedule.alpha_bar[t];
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.as_slice().iter().zip(eps.as_slice()).map(|(x, e)| a * x + s * e).collect();
    Ok(Tensor::from_parts(x0.shape().to_vec(), data))
}

/// One step of the Markov chain `x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) z`.
pub fn forward_step(x_prev: f64, t: usize, schedule: &NoiseSchedule, z: f64) -> f64 {
    let b = schedule.beta[t];
    (1.0 - b).sqrt() * x_prev + b.sqrt() * z
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionConfig {
    pub schedule: NoiseSchedule,
    pub backbone: MlpSpec,
    pub data_dim: usize,
    pub cond_dim: usize,
    pub time_embedding: TimeEmbedding,
}

/// Serializable description of a [`DiffusionConfig`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffusionParams {
    pub steps: usize,
    pub data_dim: usize,
    pub cond_dim: usize,
    pub time_frequencies: usize,
    pub layer_sizes: Vec<usize>,
}

impl DiffusionConfig {
    pub fn new(
        steps: usize,
        data_dim: usize,
        cond_dim: usize,
        time_embedding: TimeEmbedding,
        hidden: &[usize],
    ) -> Result<Self> {
        let mut sizes = vec![data_dim + cond_dim + time_embedding.dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(data_dim);
        let cfg = Self {
            schedule: NoiseSchedule::linear(steps)?,
            backbone: MlpSpec::new(sizes)?,
            data_dim,
            cond_dim,
            time_embedding,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 1-D target, 1-D condition, 4 time frequencies and four hidden layers of
    /// width 64 (five linear layers).
    pub fn toy() -> Self {
        Self::new(DEFAULT_STEPS, 1, 1, TimeEmbedding { num_frequencies: 4 }, &[64, 64, 64, 64])
            .expect("valid toy configuration")
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.cond_dim == 0 {
            return Err(Error::InvalidConfig("data and condition dims must be positive".into()));
        }
        let want = self.data_dim + self.cond_dim + self.time_embedding.dim();
        if self.backbone.input_dim() != want {
            return Err(Error::InvalidConfig(format!(
                "backbone input {} != data {} + cond {} + time embedding {}",
                self.backbone.input_dim(),
                self.data_dim,
                self.cond_dim,
                self.time_embedding.dim()
            )));
        }
        if self.backbone.output_dim() != self.data_dim {
            return Err(Error::InvalidConfig(format!(
                "backbone output {} != data dim {}",
                self.backbone.output_dim(),
                self.data_dim
            )));
        }
        Ok(())
    }

    pub fn params(&self) -> DiffusionParams {
        DiffusionParams {
            steps: self.schedule.steps(),
            data_dim: self.data_dim,
            cond_dim: self.cond_dim,
            time_frequencies: self.time_embedding.num_frequencies,
            layer_sizes: self.backbone.layer_sizes.clone(),
        }
    }

    pub fn from_params(p: &DiffusionParams) -> Result<Self> {
        let cfg = Self {
            schedule: NoiseSchedule::linear(p.steps)?,
            backbone: MlpSpec::new(p.layer_sizes.clone())?,
            data_dim: p.data_dim,
            cond_dim: p.cond_dim,
            time_embedding: TimeEmbedding {
                num_frequencies: p.time_frequencies,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Training pairs: targets `x0` `[B, data_dim]` and conditions `[B, cond_dim]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x0: Tensor,
    pub cond: Tensor,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.x0.shape()[0]
    }
}

/// The random quantities of one loss evaluation, drawn up front so the loss
/// can be re-evaluated deterministically.
#[derive(Clone, Debug)]
pub struct NoiseDraws {
    pub steps: Vec<usize>,
    pub eps: Tensor,
}

impl NoiseDraws {
    pub fn sample(config: &DiffusionConfig, rows: usize, rng: &mut StreamRng) -> Self {
        let t_max = config.schedule.steps();
        let steps = (0..rows).map(|_| rng.gen_range(0..t_max)).collect();
        let eps = rng::normal_vec(rng, rows * config.data_dim);
        Self {
            steps,
            eps: Tensor::from_parts(vec![rows, config.data_dim], eps),
        }
    }
}

fn check_batch(config: &DiffusionConfig, batch: &Batch) -> Result<usize> {
    let rows = match batch.x0.shape() {
        &[r, d] if d == config.data_dim && r > 0 => r,
        s => return Err(Error::shape("training_loss", format!("x0 {s:?}, data dim {}", config.data_dim))),
    };
    if batch.cond.shape() != [rows, config.cond_dim] {
        return Err(Error::shape(
            "training_loss",
            format!("condition {:?} for {rows} targets", batch.cond.shape()),
        ));
    }
    Ok(rows)
}

/// Backbone input rows `[x_t | y | time_embed(t)]`.
pub fn denoiser_input(config: &DiffusionConfig, batch: &Batch, draws: &NoiseDraws) -> Result<Tensor> {
    let rows = check_batch(config, batch)?;
    if draws.steps.len() != rows || draws.eps.shape() != batch.x0.shape() {
        return Err(Error::shape("training_loss", "noise draws do not match the batch"));
    }
    let (d, c) = (config.data_dim, config.cond_dim);
    let width = config.backbone.input_dim();
    let mut input = Vec::with_capacity(rows * width);
    let x0 = batch.x0.as_slice();
    let eps = draws.eps.as_slice();
    for r in 0..rows {
        let t = draws.steps[r];
        config.schedule.check_step(t)?;
        let ab = config.schedule.alpha_bar[t];
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        input.extend((0..d).map(|k| a * x0[r * d + k] + s * eps[r * d + k]));
        input.extend_from_slice(&batch.cond.as_slice()[r * c..(r + 1) * c]);
        input.extend(models::time_embed(t, config.schedule.steps(), config.time_embedding)?);
    }
    Ok(Tensor::from_parts(vec![rows, width], input))
}

/// Squared error between predicted and drawn noise, summed over target
/// dimensions and averaged over rows.
pub fn epsilon_loss(tape: &mut Tape, predicted: Var, draws: &NoiseDraws) -> Result<Var> {
    let target = tape.constant(draws.eps.clone());
    let diff = tape.sub(predicted, target)?;
    let sq = tape.square(diff)?;
    let per_entry = tape.mean(sq)?;
    let dims = draws.eps.shape().get(1).copied().unwrap_or(1);
    tape.scale(per_entry, dims as f64)
}

/// Noise-prediction loss with pre-drawn randomness. `weights` is the node
/// holding the backbone's flat parameter vector.
pub fn training_loss_with(
    tape: &mut Tape,
    config: &DiffusionConfig,
    weights: Var,
    batch: &Batch,
    draws: &NoiseDraws,
    dropout: Dropout<'_>,
) -> Result<Var> {
    let input = denoiser_input(config, batch, draws)?;
    let input = tape.constant(input);
    let pred = models::mlp_forward(tape, &config.backbone, weights, input, dropout)?;
    epsilon_loss(tape, pred, draws)
}

/// Draws `t ~ U{0..T-1}` and `eps ~ N(0, I)` per example and records the
/// noise-prediction loss.
pub fn training_loss(
    tape: &mut Tape,
    config: &DiffusionConfig,
    weights: Var,
    batch: &Batch,
    rng: &mut StreamRng,
) -> Result<Var> {
    let draws = NoiseDraws::sample(config, check_batch(config, batch)?, rng);
    training_loss_with(tape, config, weights, batch, &draws, Dropout::Off)
}

/// Runs the reverse chain for a batch of samples sharing one condition.
///
/// Row `r` of the batch consumes only `streams[r]`: first its `x_T`, then one
/// noise vector for every reverse step except the last. The result is
/// `[streams.len(), data_dim]`, row-major.
pub fn sample_batch(
    config: &DiffusionConfig,
    weights: &WeightVector,
    cond: &[f64],
    streams: &mut [StreamRng],
    unit_masks: Option<&[Tensor]>,
) -> Result<Vec<f64>> {
    if cond.len() != config.cond_dim {
        return Err(Error::shape(
            "sample",
            format!("condition has {} entries, expected {}", cond.len(), config.cond_dim),
        ));
    }
    if weights.spec() != &config.backbone {
        return Err(Error::LayoutMismatch("weights do not match the diffusion backbone".into()));
    }
    let d = config.data_dim;
    let steps = config.schedule.steps();
    let mut x: Vec<f64> = Vec::with_capacity(streams.len() * d);
    for s in streams.iter_mut() {
        x.extend(rng::normal_vec(s, d));
    }
    let mut tail = cond.to_vec();
    let mut ws = MlpWorkspace::default();
    let mut eps_hat = Vec::new();
    for t in (0..steps).rev() {
        tail.truncate(config.cond_dim);
        tail.extend(models::time_embed(t, steps, config.time_embedding)?);
        mlp_eval_shared_tail(weights, &x, d, &tail, unit_masks, &mut ws, &mut eps_hat)?;
        let beta = config.schedule.beta[t];
        let ab = config.schedule.alpha_bar[t];
        let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
        let sigma = beta.sqrt();
        for (r, s) in streams.iter_mut().enumerate() {
            for k in 0..d {
                let xi = &mut x[r * d + k];
                let score = score_from_eps(eps_hat[r * d + k], ab);
                let mut next = inv_sqrt_alpha * (*xi + beta * score);
                if t > 0 {
                    next += sigma * rng::normal(s);
                }
                *xi = next;
            }
        }
        if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::SamplerDiverged {
                step: t,
                member: None,
                sample: Some(bad / d),
            });
        }
    }
    Ok(x)
}

/// Single posterior draw `x0 ~ p(x | y, theta)`.
pub fn sample(
    config: &DiffusionConfig,
    weights: &WeightVector,
    cond: &Tensor,
    rng: &mut StreamRng,
) -> Result<Tensor> {
    let mut streams = [rng.clone()];
    let out = sample_batch(config, weights, cond.as_slice(), &mut streams, None)?;
    *rng = streams[0].clone();
    Ok(Tensor::from_parts(vec![config.data_dim], out))
}
