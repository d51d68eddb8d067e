//! Prediction matrices and their aleatoric/epistemic decomposition.
//!
//! For predictions `x[i][j]` (weight draw `i`, diffusion sample `j`):
//! aleatoric = mean over `i` of the variance over `j`, epistemic = variance
//! over `i` of the mean over `j`. With population variances and equal row
//! lengths the two add up exactly to the variance of all entries.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::fmt_f64;
use crate::diffusion::{sample_batch, DiffusionConfig};
use crate::error::{Error, Result};
use crate::hyper::{generate_weights, member_latent, DropoutMember, HyperNetConfig, Strategy};
use crate::models::WeightVector;
use crate::rng::{self, purpose, StreamRng};
use crate::tensor::Tensor;

/// Samples per work unit. Units are the granularity of parallel sampling;
/// the partition is fixed so results never depend on the worker count.
pub const SAMPLE_CHUNK: usize = 250;

/// Relative tolerance of the total-variance identity.
pub const IDENTITY_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: Option<Strategy>,
    pub master_seed: u64,
    pub condition: Vec<f64>,
}

/// `[M, N, D]` predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMatrix {
    values: Tensor,
    pub provenance: Provenance,
}

impl SampleMatrix {
    pub fn new(values: Tensor, provenance: Provenance) -> Result<Self> {
        let &[m, n, _d] = values.shape() else {
            return Err(Error::shape("sample_matrix", format!("expected [M, N, D], got {:?}", values.shape())));
        };
        if m < 1 {
            return Err(Error::TooFewSamples { axis: "weight", needed: 1, got: m });
        }
        if n < 2 {
            return Err(Error::TooFewSamples { axis: "sample", needed: 2, got: n });
        }
        if !values.all_finite() {
            return Err(Error::NonFinite { op: "sample_matrix".into() });
        }
        Ok(Self { values, provenance })
    }

    /// Convenience constructor from nested `rows[i][j]` scalars (`D = 1`).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::shape("sample_matrix", "rows have unequal lengths"));
        }
        let values = Tensor::new(vec![m, n, 1], rows.concat())?;
        Self::new(values, Provenance { strategy: None, master_seed: 0, condition: Vec::new() })
    }

    pub fn m(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn d(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Entries `x[i][.][k]` of weight draw `i`, dimension `k`.
    fn row(&self, i: usize, k: usize) -> impl Iterator<Item = f64> + Clone + '_ {
        let (n, d) = (self.n(), self.d());
        let base = i * n * d;
        self.values.as_slice()[base..base + n * d].iter().skip(k).step_by(d).copied()
    }

    fn column(&self, k: usize) -> impl Iterator<Item = f64> + Clone + '_ {
        self.values.as_slice().iter().skip(k).step_by(self.d()).copied()
    }

    /// Matrix restricted to the first `m` draws and `n` samples of each.
    pub fn prefix(&self, m: usize, n: usize) -> Result<Self> {
        let (mm, nn, d) = (self.m(), self.n(), self.d());
        if m > mm || n > nn {
            return Err(Error::shape("sample_matrix", format!("prefix {m}x{n} of {mm}x{nn}")));
        }
        let src = self.values.as_slice();
        let mut out = Vec::with_capacity(m * n * d);
        for i in 0..m {
            out.extend_from_slice(&src[i * nn * d..(i * nn + n) * d]);
        }
        Self::new(Tensor::from_parts(vec![m, n, d], out), self.provenance.clone())
    }

    /// One row per `(i, j)`: `i,j,x_0,...,x_{D-1}`.
    pub fn to_csv(&self) -> String {
        let (m, n, d) = (self.m(), self.n(), self.d());
        let mut out = String::from("i,j");
        for k in 0..d {
            write!(out, ",x_{k}").unwrap();
        }
        out.push('\n');
        let vals = self.values.as_slice();
        for i in 0..m {
            for j in 0..n {
                write!(out, "{i},{j}").unwrap();
                for k in 0..d {
                    write!(out, ",{}", fmt_f64(vals[(i * n + j) * d + k])).unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty sample CSV".into()))?;
        let d = header.split(',').count().saturating_sub(2);
        if !header.starts_with("i,j") || d == 0 {
            return Err(Error::Format(format!("unexpected sample CSV header `{header}`")));
        }
        let mut entries: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let err = |e: String| Error::Format(format!("line {}: {e}", ln + 2));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != d + 2 {
                return Err(err(format!("expected {} columns", d + 2)));
            }
            let i = cols[0].trim().parse().map_err(|e| err(format!("{e}")))?;
            let j = cols[1].trim().parse().map_err(|e| err(format!("{e}")))?;
            let x = cols[2..]
                .iter()
                .map(|c| c.trim().parse::<f64>().map_err(|e| err(format!("{e}"))))
                .collect::<Result<Vec<_>>>()?;
            entries.push((i, j, x));
        }
        let m = entries.iter().map(|e| e.0).max().map_or(0, |v| v + 1);
        let n = entries.iter().map(|e| e.1).max().map_or(0, |v| v + 1);
        if entries.len() != m * n {
            return Err(Error::Format(format!("{} rows do not fill a {m}x{n} grid", entries.len())));
        }
        let mut vals = vec![f64::NAN; m * n * d];
        for (i, j, x) in entries {
            vals[(i * n + j) * d..(i * n + j + 1) * d].copy_from_slice(&x);
        }
        let values = Tensor::new(vec![m, n, d], vals)
            .map_err(|_| Error::Format("duplicate or missing (i, j) entries".into()))?;
        Self::new(values, Provenance { strategy: None, master_seed: 0, condition: Vec::new() })
    }
}

/// Mean computed relative to the first element, so constant data yield the
/// constant exactly.
fn shifted_mean(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut it = xs.clone();
    let Some(pilot) = it.next() else { return 0.0 };
    let (sum, count) = xs.fold((0.0, 0usize), |(s, c), x| (s + (x - pilot), c + 1));
    pilot + sum / count as f64
}

/// Population variance around a given mean, with the usual correction term
/// for the rounding error in that mean.
fn population_variance(xs: impl Iterator<Item = f64> + Clone, mean: f64) -> f64 {
    let (sq, lin, count) = xs.fold((0.0, 0.0, 0usize), |(sq, lin, c), x| {
        let dev = x - mean;
        (sq + dev * dev, lin + dev, c + 1)
    });
    let n = count as f64;
    (sq / n - (lin / n) * (lin / n)).max(0.0)
}

/// Statistics of one output dimension. Everything is computed on values
/// centered at the matrix's first entry, so row means keep full precision
/// even when the spread is tiny next to the magnitude.
struct DimStats {
    mean: f64,
    aleatoric: f64,
    epistemic: f64,
    total: f64,
}

fn dim_stats(matrix: &SampleMatrix, k: usize) -> DimStats {
    let pivot = matrix.values.as_slice()[k];
    let row = |i: usize| matrix.row(i, k).map(move |x| x - pivot);
    let means: Vec<f64> = (0..matrix.m()).map(|i| shifted_mean(row(i))).collect();
    let aleatoric = means.iter().enumerate().map(|(i, &mu)| population_variance(row(i), mu)).sum::<f64>()
        / matrix.m() as f64;
    // equal row lengths: the mean of row means is the grand mean
    let grand = shifted_mean(means.iter().copied());
    DimStats {
        mean: pivot + grand,
        aleatoric,
        epistemic: population_variance(means.iter().copied(), grand),
        total: population_variance(matrix.column(k).map(|x| x - pivot), grand),
    }
}

fn per_dim(matrix: &SampleMatrix, f: impl Fn(&DimStats) -> f64) -> Tensor {
    let vals = (0..matrix.d()).map(|k| f(&dim_stats(matrix, k))).collect();
    Tensor::from_parts(vec![matrix.d()], vals)
}

/// Mean and population variance of each weight draw's samples in dimension `k`.
pub fn draw_moments(matrix: &SampleMatrix, k: usize) -> Vec<(f64, f64)> {
    (0..matrix.m())
        .map(|i| {
            let mu = shifted_mean(matrix.row(i, k));
            (mu, population_variance(matrix.row(i, k), mu))
        })
        .collect()
}

/// Grand mean over all `M * N` predictions.
pub fn predict_mean(matrix: &SampleMatrix) -> Tensor {
    per_dim(matrix, |s| s.mean)
}

/// Mean over weight draws of the within-draw sample variance.
pub fn aleatoric(matrix: &SampleMatrix) -> Tensor {
    per_dim(matrix, |s| s.aleatoric)
}

/// Variance over weight draws of the per-draw sample means. Identically zero
/// when `M = 1`; [`decompose`] flags that case.
pub fn epistemic(matrix: &SampleMatrix) -> Tensor {
    per_dim(matrix, |s| s.epistemic)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Warning {
    /// Only one weight draw: the epistemic estimate is zero by construction.
    SingleWeightDraw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyReport {
    pub mean: Tensor,
    pub aleatoric: Tensor,
    pub epistemic: Tensor,
    pub total: Tensor,
    pub m: usize,
    pub n: usize,
    pub warnings: Vec<Warning>,
}

impl UncertaintyReport {
    /// Labeled rows `quantity,dim_0,...`.
    pub fn to_csv(&self) -> String {
        let d = self.mean.len();
        let mut out = String::from("quantity");
        for k in 0..d {
            write!(out, ",dim_{k}").unwrap();
        }
        out.push('\n');
        for (name, t) in [
            ("mean", &self.mean),
            ("aleatoric", &self.aleatoric),
            ("epistemic", &self.epistemic),
            ("total", &self.total),
        ] {
            out.push_str(name);
            for v in t.as_slice() {
                write!(out, ",{}", fmt_f64(*v)).unwrap();
            }
            out.push('\n');
        }
        for (name, count) in [("m", self.m), ("n", self.n)] {
            out.push_str(name);
            for _ in 0..d {
                write!(out, ",{count}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Mean, aleatoric, epistemic and total variance, checking
/// `total == aleatoric + epistemic` to [`IDENTITY_TOLERANCE`].
pub fn decompose(matrix: &SampleMatrix) -> Result<UncertaintyReport> {
    let stats: Vec<DimStats> = (0..matrix.d()).map(|k| dim_stats(matrix, k)).collect();
    for st in &stats {
        let (t, sum) = (st.total, st.aleatoric + st.epistemic);
        if (t - sum).abs() > IDENTITY_TOLERANCE * t.abs().max(sum.abs()) {
            return Err(Error::DecompositionIdentity { total: t, sum });
        }
    }
    let field = |f: fn(&DimStats) -> f64| Tensor::from_parts(vec![matrix.d()], stats.iter().map(f).collect());
    let warnings = if matrix.m() == 1 { vec![Warning::SingleWeightDraw] } else { Vec::new() };
    Ok(UncertaintyReport {
        mean: field(|s| s.mean),
        aleatoric: field(|s| s.aleatoric),
        epistemic: field(|s| s.epistemic),
        total: field(|s| s.total),
        m: matrix.m(),
        n: matrix.n(),
        warnings,
    })
}

/// A trained ensembling strategy able to produce weight draws.
#[derive(Clone, Debug)]
pub enum Ensemble {
    /// Unlimited draws `theta_i = h_phi(z_i)`.
    Hyper {
        config: HyperNetConfig,
        phi: WeightVector,
    },
    /// Independently trained members; at most `members.len()` draws.
    Deep { members: Vec<WeightVector> },
    /// Unlimited pseudo-members of one dropout-trained network.
    McDropout { weights: WeightVector, rate: f64 },
}

/// Weights of one draw plus, for MC-dropout, its frozen unit masks.
#[derive(Clone, Debug)]
pub struct Member {
    pub weights: WeightVector,
    pub masks: Option<Vec<Tensor>>,
}

impl Ensemble {
    pub fn strategy(&self) -> Strategy {
        match self {
            Ensemble::Hyper { .. } => Strategy::HyperDiffusion,
            Ensemble::Deep { .. } => Strategy::DeepEnsemble,
            Ensemble::McDropout { .. } => Strategy::McDropout,
        }
    }

    /// Maximum number of distinct draws, `None` when unlimited.
    pub fn capacity(&self) -> Option<usize> {
        match self {
            Ensemble::Deep { members } => Some(members.len()),
            _ => None,
        }
    }

    /// Weight draw `index` under `master_seed`.
    pub fn member(&self, config: &DiffusionConfig, index: usize, master_seed: u64) -> Result<Member> {
        match self {
            Ensemble::Hyper { config: hyper, phi } => {
                let z = member_latent(hyper, master_seed, index);
                Ok(Member {
                    weights: generate_weights(hyper, phi, &z, &config.backbone)?,
                    masks: None,
                })
            }
            Ensemble::Deep { members } => members
                .get(index)
                .map(|w| Member { weights: w.clone(), masks: None })
                .ok_or(Error::InsufficientMembers { available: members.len(), requested: index + 1 }),
            Ensemble::McDropout { weights, rate } => {
                let member = DropoutMember::draw(weights, *rate, master_seed, index)?;
                Ok(Member { masks: Some(member.masks()), weights: member.weights })
            }
        }
    }
}

/// Stream label for a condition vector.
fn condition_label(cond: &[f64]) -> u64 {
    let bits: Vec<u64> = cond.iter().map(|v| v.to_bits()).collect();
    rng::derive_seed(0, &bits)
}

/// Independent stream of prediction `(i, j)` at condition `cond`.
pub fn sample_stream(master_seed: u64, cond: &[f64], i: usize, j: usize) -> StreamRng {
    rng::stream(master_seed, &[purpose::SAMPLE, condition_label(cond), i as u64, j as u64])
}

/// Sampling parameters shared by every condition of a request.
#[derive(Clone, Copy, Debug)]
pub struct SamplingPlan {
    pub m: usize,
    pub n: usize,
    pub master_seed: u64,
    pub workers: usize,
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start {workers} workers: {e}")))
}

/// Builds one `[M, N, D]` matrix per condition. Work is split into fixed
/// `(condition, draw, chunk)` units and every prediction uses its own counter
/// stream, so the output is identical for any worker count.
pub fn build_sample_matrices(
    config: &DiffusionConfig,
    ensemble: &Ensemble,
    conditions: &[Vec<f64>],
    plan: SamplingPlan,
) -> Result<Vec<SampleMatrix>> {
    let SamplingPlan { m, n, master_seed, workers } = plan;
    if m < 1 {
        return Err(Error::TooFewSamples { axis: "weight", needed: 1, got: m });
    }
    if n < 2 {
        return Err(Error::TooFewSamples { axis: "sample", needed: 2, got: n });
    }
    if let Some(cap) = ensemble.capacity() {
        if m > cap {
            return Err(Error::InsufficientMembers { available: cap, requested: m });
        }
    }
    let pool = thread_pool(workers)?;
    let d = config.data_dim;
    pool.install(|| {
        let members: Vec<Member> = (0..m)
            .into_par_iter()
            .map(|i| ensemble.member(config, i, master_seed))
            .collect::<Result<_>>()?;
        let chunks = n.div_ceil(SAMPLE_CHUNK);
        let units: Vec<(usize, usize, usize)> = (0..conditions.len())
            .flat_map(|c| (0..m).flat_map(move |i| (0..chunks).map(move |k| (c, i, k))))
            .collect();
        let outputs: Vec<Vec<f64>> = units
            .par_iter()
            .map(|&(c, i, k)| {
                let cond = &conditions[c];
                let j0 = k * SAMPLE_CHUNK;
                let j1 = (j0 + SAMPLE_CHUNK).min(n);
                let mut streams: Vec<StreamRng> =
                    (j0..j1).map(|j| sample_stream(master_seed, cond, i, j)).collect();
                let member = &members[i];
                sample_batch(config, &member.weights, cond, &mut streams, member.masks.as_deref()).map_err(
                    |e| match e {
                        Error::SamplerDiverged { step, sample, .. } => Error::SamplerDiverged {
                            step,
                            member: Some(i),
                            sample: sample.map(|r| j0 + r),
                        },
                        other => other,
                    },
                )
            })
            .collect::<Result<_>>()?;

        let per_cond = m * chunks;
        conditions
            .iter()
            .enumerate()
            .map(|(c, cond)| {
                let mut vals = Vec::with_capacity(m * n * d);
                for out in &outputs[c * per_cond..(c + 1) * per_cond] {
                    vals.extend_from_slice(out);
                }
                SampleMatrix::new(
                    Tensor::from_parts(vec![m, n, d], vals),
                    Provenance {
                        strategy: Some(ensemble.strategy()),
                        master_seed,
                        condition: cond.clone(),
                    },
                )
            })
            .collect()
    })
}

pub fn build_sample_matrix(
    config: &DiffusionConfig,
    ensemble: &Ensemble,
    condition: &[f64],
    plan: SamplingPlan,
) -> Result<SampleMatrix> {
    let mut v = build_sample_matrices(config, ensemble, &[condition.to_vec()], plan)?;
    Ok(v.remove(0))
}
