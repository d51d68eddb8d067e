//! Weight checkpoints: a magic tag, the JSON header length as a little-endian
//! `u64`, the JSON header, then every weight as a little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionConfig, DiffusionParams};
use crate::error::{Error, Result};
use crate::hyper::{HyperNetConfig, Strategy, TrainRunConfig, TrainingLog};
use crate::models::{MlpSpec, WeightVector};
use crate::tensor::Tensor;
use crate::uq::Ensemble;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HDIFFCKP";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub strategy: Strategy,
    pub diffusion: DiffusionParams,
    pub run: TrainRunConfig,
    /// Present for hyper-diffusion checkpoints only.
    pub hyper: Option<HyperNetConfig>,
    /// Layer sizes of each stored weight vector.
    pub weight_spec: Vec<usize>,
    /// Number of stored weight vectors (ensemble members).
    pub members: usize,
    pub parameter_count: usize,
    #[serde(default)]
    pub training_logs: Vec<TrainingLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub weights: Vec<WeightVector>,
}

impl Checkpoint {
    pub fn new(
        config: &DiffusionConfig,
        run: &TrainRunConfig,
        ensemble: &Ensemble,
        training_logs: Vec<TrainingLog>,
    ) -> Result<Self> {
        let (hyper, weights) = match ensemble {
            Ensemble::Hyper { config: h, phi } => (Some(h.clone()), vec![phi.clone()]),
            Ensemble::Deep { members } => (None, members.clone()),
            Ensemble::McDropout { weights, .. } => (None, vec![weights.clone()]),
        };
        let spec = weights
            .first()
            .ok_or_else(|| Error::Checkpoint("no weights to store".into()))?
            .spec()
            .clone();
        let mut run = run.clone();
        run.strategy = ensemble.strategy();
        if let Ensemble::McDropout { rate, .. } = ensemble {
            run.dropout_rate = *rate;
        }
        if let Ensemble::Deep { members } = ensemble {
            run.ensemble_size = members.len();
        }
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            strategy: ensemble.strategy(),
            diffusion: config.params(),
            run,
            hyper,
            parameter_count: spec.parameter_count(),
            weight_spec: spec.layer_sizes,
            members: weights.len(),
            training_logs,
        };
        let ckpt = Self { header, weights };
        ckpt.validate()?;
        Ok(ckpt)
    }

    fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                h.format_version
            )));
        }
        let config = DiffusionConfig::from_params(&h.diffusion)?;
        let expected = match (&h.strategy, &h.hyper) {
            (Strategy::HyperDiffusion, Some(hyper)) => {
                hyper.validate(&config.backbone)?;
                &hyper.hyper_spec
            }
            (Strategy::HyperDiffusion, None) => {
                return Err(Error::Checkpoint("hyper-diffusion checkpoint without hyper-network config".into()))
            }
            (_, Some(_)) => return Err(Error::Checkpoint("hyper-network config on a non-hyper checkpoint".into())),
            (_, None) => &config.backbone,
        };
        if expected.layer_sizes != h.weight_spec || expected.parameter_count() != h.parameter_count {
            return Err(Error::Checkpoint(format!(
                "stored layout {:?} does not match the configured network {:?}",
                h.weight_spec, expected.layer_sizes
            )));
        }
        let members_ok = match h.strategy {
            Strategy::DeepEnsemble => h.members >= 1,
            _ => h.members == 1,
        };
        if !members_ok || self.weights.len() != h.members {
            return Err(Error::Checkpoint(format!(
                "{} weight vectors for a {} checkpoint declaring {}",
                self.weights.len(),
                h.strategy.tag(),
                h.members
            )));
        }
        Ok(())
    }

    pub fn diffusion_config(&self) -> Result<DiffusionConfig> {
        DiffusionConfig::from_params(&self.header.diffusion)
    }

    /// The trained ensembling strategy stored in this checkpoint.
    pub fn ensemble(&self) -> Ensemble {
        match self.header.strategy {
            Strategy::HyperDiffusion => Ensemble::Hyper {
                config: self.header.hyper.clone().expect("validated"),
                phi: self.weights[0].clone(),
            },
            Strategy::DeepEnsemble => Ensemble::Deep {
                members: self.weights.clone(),
            },
            Strategy::McDropout => Ensemble::McDropout {
                weights: self.weights[0].clone(),
                rate: self.header.run.dropout_rate,
            },
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let payload = self.header.parameter_count * self.header.members * 8;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for w in &self.weights {
            for v in w.values().as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
        let header_len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| corrupt("header length overflows"))?;
        let start = MAGIC.len() + 8;
        let body = bytes
            .get(start..start.checked_add(header_len).ok_or_else(|| corrupt("header length overflows"))?)
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let payload = &bytes[start + header_len..];
        let expected = header
            .parameter_count
            .checked_mul(header.members)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| corrupt("declared payload overflows"))?;
        if payload.len() != expected {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, header declares {} weights x {} members ({expected} bytes)",
                payload.len(),
                header.parameter_count,
                header.members
            )));
        }
        let spec = MlpSpec::new(header.weight_spec.clone())?;
        let weights = payload
            .chunks_exact(header.parameter_count.max(1) * 8)
            .map(|chunk| {
                let values = chunk
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect();
                WeightVector::from_values(&spec, Tensor::new(vec![header.parameter_count], values)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let ckpt = Self { header, weights };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
