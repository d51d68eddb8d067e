//! Training datasets and the `x = sin(y) + noise` toy inverse problem.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Batch;
use crate::error::{Error, Result};
use crate::rng::{self, purpose};
use crate::tensor::Tensor;

/// Paired targets `x` (`[n, data_dim]`) and conditions `y` (`[n, cond_dim]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
}

impl Dataset {
    pub fn new(x: Tensor, y: Tensor) -> Result<Self> {
        match (x.shape(), y.shape()) {
            (&[n, _], &[m, _]) if n == m && n > 0 => Ok(Self { x, y }),
            (a, b) => Err(Error::shape("dataset", format!("targets {a:?} vs conditions {b:?}"))),
        }
    }

    /// Scalar `(y, x)` pairs.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        let n = pairs.len();
        if n == 0 {
            return Err(Error::InvalidConfig("empty dataset".into()));
        }
        let y = Tensor::new(vec![n, 1], pairs.iter().map(|p| p.0).collect())?;
        let x = Tensor::new(vec![n, 1], pairs.iter().map(|p| p.1).collect())?;
        Self::new(x, y)
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data_dim(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn cond_dim(&self) -> usize {
        self.y.shape()[1]
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        let pick = |t: &Tensor| {
            let c = t.shape()[1];
            let src = t.as_slice();
            let data = rows.iter().flat_map(|&r| src[r * c..(r + 1) * c].iter().copied()).collect();
            Tensor::from_parts(vec![rows.len(), c], data)
        };
        Batch {
            x0: pick(&self.x),
            cond: pick(&self.y),
        }
    }

    /// `y,x` CSV text (scalar datasets only) with 17 significant digits.
    pub fn to_csv(&self) -> Result<String> {
        if self.data_dim() != 1 || self.cond_dim() != 1 {
            return Err(Error::Format("CSV export supports scalar y and x only".into()));
        }
        let mut out = String::from("y,x\n");
        for (y, x) in self.y.as_slice().iter().zip(self.x.as_slice()) {
            out.push_str(&format!("{},{}\n", fmt_f64(*y), fmt_f64(*x)));
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next().map(str::trim) {
            Some("y,x") => {}
            other => return Err(Error::Format(format!("expected header `y,x`, found {other:?}"))),
        }
        let mut pairs = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut cols = line.split(',');
            let mut next = || -> Result<f64> {
                cols.next()
                    .ok_or_else(|| Error::Format(format!("line {}: missing column", i + 2)))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("line {}: {e}", i + 2)))
            };
            pairs.push((next()?, next()?));
        }
        Self::from_pairs(&pairs)
    }
}

/// 17 significant digits: enough for an exact `f64` round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Configuration of the toy problem `x = sin(y) + eta`, `eta ~ N(0, noise_variance)`,
/// `y ~ U(y_range)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyProblemConfig {
    pub noise_variance: f64,
    pub dataset_size: usize,
    #[serde(default = "default_y_range")]
    pub y_range: (f64, f64),
    pub seed: u64,
}

fn default_y_range() -> (f64, f64) {
    (-5.0, 5.0)
}

impl ToyProblemConfig {
    pub fn new(noise_variance: f64, dataset_size: usize, seed: u64) -> Self {
        Self {
            noise_variance,
            dataset_size,
            y_range: default_y_range(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise variance must be finite and non-negative, got {}",
                self.noise_variance
            )));
        }
        if self.dataset_size == 0 {
            return Err(Error::InvalidConfig("dataset size must be at least 1".into()));
        }
        let (lo, hi) = self.y_range;
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidConfig(format!("degenerate y range {:?}", self.y_range)));
        }
        Ok(())
    }
}

/// The forward operator of the toy problem.
pub fn toy_forward(y: f64) -> f64 {
    y.sin()
}

pub fn gen_toy_data(config: &ToyProblemConfig) -> Result<Dataset> {
    config.validate()?;
    let mut r = rng::stream(config.seed, &[purpose::DATA]);
    let (lo, hi) = config.y_range;
    let sd = config.noise_variance.sqrt();
    let pairs: Vec<(f64, f64)> = (0..config.dataset_size)
        .map(|_| {
            let y = r.gen_range(lo..hi);
            let eta = sd * rng::normal(&mut r);
            (y, toy_forward(y) + eta)
        })
        .collect();
    Dataset::from_pairs(&pairs)
}

/// Generates the toy dataset and persists it as `<stem>.csv` plus a
/// `<stem>.json` manifest recording the configuration.
pub fn write_toy_data(config: &ToyProblemConfig, dir: &Path, stem: &str) -> Result<Dataset> {
    let ds = gen_toy_data(config)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ds.write_csv(&dir.join(format!("{stem}.csv")))?;
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, toy_data_manifest(config)?).map_err(|e| Error::io(&path, e))?;
    Ok(ds)
}

/// Sidecar JSON describing a generated toy dataset.
pub fn toy_data_manifest(config: &ToyProblemConfig) -> Result<String> {
    let manifest = serde_json::json!({
        "format_version": 1,
        "kind": "toy-dataset",
        "config": config,
    });
    Ok(serde_json::to_string_pretty(&manifest)? + "\n")
}
