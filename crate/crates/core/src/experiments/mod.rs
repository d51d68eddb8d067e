//! Experiment manifests and the sweep, ablation and OOD runners built on them.

mod runners;

pub use runners::{
    run_experiment, run_ood_probe, run_sampling_ablation, run_sweep, AblationOutcome, AblationRow, ConditionResult,
    ExperimentOutcome, OodOutcome, OodStrategyResult, SweepOutcome, SweepRow,
};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{gen_toy_data, toy_data_manifest, Dataset, ToyProblemConfig};
use crate::diffusion::{DiffusionConfig, DiffusionParams};
use crate::error::{Error, Result};
use crate::hyper::{
    train_deep_ensemble, train_diffusion, train_hyper_diffusion, HyperNetConfig, LatentMode, Strategy,
    TrainRunConfig, TrainingLog,
};
use crate::uq::Ensemble;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentTag {
    AleatoricSweep,
    EpistemicSweep,
    MSweep,
    NSweep,
    OodProbe,
}

impl ExperimentTag {
    pub fn file_stem(&self) -> &'static str {
        match self {
            ExperimentTag::AleatoricSweep => "aleatoric_sweep",
            ExperimentTag::EpistemicSweep => "epistemic_sweep",
            ExperimentTag::MSweep => "m_sweep",
            ExperimentTag::NSweep => "n_sweep",
            ExperimentTag::OodProbe => "ood_probe",
        }
    }
}

/// Sampling sizes: desk (M = 20, N = 1000) or full (M = 100, N = 10000).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    #[default]
    Desk,
    Full,
}

impl Scale {
    pub fn sizes(&self) -> (usize, usize) {
        match self {
            Scale::Desk => (20, 1000),
            Scale::Full => (100, 10_000),
        }
    }
}

/// `count` equally spaced conditions from `start` to `end` inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionGrid {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

impl ConditionGrid {
    pub fn points(&self) -> Vec<f64> {
        match self.count {
            0 => Vec::new(),
            1 => vec![self.start],
            n => (0..n)
                .map(|k| self.start + (self.end - self.start) * k as f64 / (n - 1) as f64)
                .collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 || !self.start.is_finite() || !self.end.is_finite() || self.end < self.start {
            return Err(Error::InvalidConfig(format!("bad condition grid {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub conditions: ConditionGrid,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        let (m, n) = Scale::Desk.sizes();
        Self {
            m,
            n,
            seed: 0,
            conditions: ConditionGrid { start: -5.0, end: 5.0, count: 64 },
        }
    }
}

/// Hyper-network settings; the output layer is sized from the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperSettings {
    pub latent_dim: usize,
    pub sigma_z: f64,
    pub hidden: Vec<usize>,
    pub output_scale: f64,
    #[serde(default)]
    pub latent_mode: LatentMode,
}

impl Default for HyperSettings {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            sigma_z: 1.0,
            hidden: vec![128; 4],
            output_scale: 0.1,
            latent_mode: LatentMode::Random,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub diffusion: DiffusionParams,
    pub hyper: HyperSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            diffusion: DiffusionConfig::toy().params(),
            hyper: HyperSettings::default(),
        }
    }
}

impl ModelConfig {
    pub fn diffusion_config(&self) -> Result<DiffusionConfig> {
        DiffusionConfig::from_params(&self.diffusion)
    }

    pub fn hyper_config(&self, primary: &DiffusionConfig) -> Result<HyperNetConfig> {
        let h = &self.hyper;
        if h.latent_dim == 0 || h.hidden.contains(&0) {
            return Err(Error::InvalidConfig("hyper-network widths must be positive".into()));
        }
        let mut cfg = HyperNetConfig::with_widths(&primary.backbone, h.latent_dim, &h.hidden);
        cfg.sigma_z = h.sigma_z;
        cfg.output_scale = h.output_scale;
        cfg.latent_mode = h.latent_mode;
        cfg.validate(&primary.backbone)?;
        Ok(cfg)
    }
}

/// One training run (or a pre-trained checkpoint) of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub label: String,
    pub data: ToyProblemConfig,
    #[serde(default)]
    pub train: TrainRunConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// Load this checkpoint instead of training.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_label = !self.label.is_empty()
            && self.label.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            && !self.label.starts_with('.');
        if !ok_label {
            return Err(Error::InvalidConfig(format!(
                "run label `{}` must be non-empty and use only [A-Za-z0-9._-]",
                self.label
            )));
        }
        self.data.validate()?;
        self.train.validate()?;
        let cfg = self.model.diffusion_config()?;
        if cfg.data_dim != 1 || cfg.cond_dim != 1 {
            return Err(Error::InvalidConfig("toy experiments need scalar x and y".into()));
        }
        if cfg.schedule.steps() != self.train.steps {
            return Err(Error::InvalidConfig(format!(
                "run `{}`: train.steps {} differs from the model's {} diffusion steps",
                self.label,
                self.train.steps,
                cfg.schedule.steps()
            )));
        }
        if self.train.strategy == Strategy::HyperDiffusion {
            self.model.hyper_config(&cfg)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub m_values: Vec<usize>,
    pub fixed_n: usize,
    pub n_values: Vec<usize>,
    pub fixed_m: usize,
    pub repeats: usize,
    pub conditions: ConditionGrid,
    pub ood_conditions: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            m_values: vec![2, 4, 8, 16],
            fixed_n: 100,
            n_values: vec![2, 4, 8, 16],
            fixed_m: 10,
            repeats: 20,
            conditions: ConditionGrid { start: -5.0, end: 5.0, count: 16 },
            ood_conditions: vec![6.0, 7.0, 8.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodConfig {
    pub in_conditions: ConditionGrid,
    pub ood_conditions: Vec<f64>,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            in_conditions: ConditionGrid { start: -5.0, end: 5.0, count: 21 },
            ood_conditions: vec![6.0, 7.0, 8.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub format_version: u32,
    pub experiment: ExperimentTag,
    pub output_dir: PathBuf,
    pub runs: Vec<RunConfig>,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub ood: OodConfig,
}

fn toy_run(label: String, noise_variance: f64, dataset_size: usize, strategy: Strategy, seed: u64) -> RunConfig {
    RunConfig {
        label,
        data: ToyProblemConfig::new(noise_variance, dataset_size, seed),
        train: TrainRunConfig { strategy, master_seed: seed, ..Default::default() },
        model: ModelConfig::default(),
        checkpoint: None,
    }
}

impl ExperimentManifest {
    /// The toy-problem configuration of each experiment.
    pub fn preset(experiment: ExperimentTag, output_dir: PathBuf, seed: u64) -> Self {
        let runs = match experiment {
            ExperimentTag::AleatoricSweep => [0.01, 0.04, 0.16, 0.64]
                .iter()
                .map(|&v| toy_run(format!("noise-{v}"), v, 500, Strategy::HyperDiffusion, seed))
                .collect(),
            ExperimentTag::EpistemicSweep => [100, 200, 400, 800]
                .iter()
                .map(|&n| toy_run(format!("size-{n}"), 0.01, n, Strategy::HyperDiffusion, seed))
                .collect(),
            ExperimentTag::MSweep | ExperimentTag::NSweep => {
                vec![toy_run("hyper-diffusion".into(), 0.01, 500, Strategy::HyperDiffusion, seed)]
            }
            ExperimentTag::OodProbe => [Strategy::HyperDiffusion, Strategy::DeepEnsemble, Strategy::McDropout]
                .iter()
                .map(|&s| toy_run(s.tag().into(), 0.01, 500, s, seed))
                .collect(),
        };
        Self {
            format_version: MANIFEST_VERSION,
            experiment,
            output_dir,
            runs,
            sampling: SamplingConfig { seed, ..Default::default() },
            ablation: AblationConfig::default(),
            ood: OodConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("format_version") {
            Some(v) if v.as_u64() == Some(u64::from(MANIFEST_VERSION)) => {}
            Some(v) => return Err(Error::InvalidConfig(format!("unsupported manifest version {v}"))),
            None => return Err(Error::InvalidConfig("manifest is missing `format_version`".into())),
        }
        let manifest: Self = serde_json::from_value(value)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Uses `seed` for data, training and sampling of every run.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sampling.seed = seed;
        for run in &mut self.runs {
            run.data.seed = seed;
            run.train.master_seed = seed;
        }
        self
    }

    pub fn with_scale(mut self, scale: Scale) -> Self {
        (self.sampling.m, self.sampling.n) = scale.sizes();
        self
    }

    /// Checks every run before anything is trained.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported manifest version {}",
                self.format_version
            )));
        }
        if self.runs.is_empty() {
            return Err(Error::InvalidConfig("manifest lists no runs".into()));
        }
        let mut labels = BTreeSet::new();
        for run in &self.runs {
            run.validate()?;
            if !labels.insert(run.label.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate run label `{}`", run.label)));
            }
        }
        let s = &self.sampling;
        if s.m < 1 || s.n < 2 {
            return Err(Error::InvalidConfig(format!("need M >= 1 and N >= 2, got M={} N={}", s.m, s.n)));
        }
        s.conditions.validate()?;
        match self.experiment {
            ExperimentTag::MSweep | ExperimentTag::NSweep => {
                let a = &self.ablation;
                if self.runs.len() != 1 || self.runs[0].train.strategy != Strategy::HyperDiffusion {
                    return Err(Error::InvalidConfig("sampling ablation needs exactly one hyper-diffusion run".into()));
                }
                if a.repeats < 2 {
                    return Err(Error::InvalidConfig("sampling ablation needs at least 2 repeats".into()));
                }
                if a.m_values.is_empty() || a.m_values.contains(&0) || a.fixed_m == 0 {
                    return Err(Error::InvalidConfig("M values must be positive".into()));
                }
                if a.n_values.is_empty() || a.n_values.iter().any(|&n| n < 2) || a.fixed_n < 2 {
                    return Err(Error::InvalidConfig("N values must be at least 2".into()));
                }
                a.conditions.validate()?;
            }
            ExperimentTag::OodProbe => {
                let mut seen = BTreeSet::new();
                for run in &self.runs {
                    if !seen.insert(run.train.strategy.tag()) {
                        return Err(Error::InvalidConfig(format!(
                            "ood probe lists strategy {} twice",
                            run.train.strategy.tag()
                        )));
                    }
                }
                self.ood.in_conditions.validate()?;
                if self.ood.ood_conditions.iter().any(|y| !y.is_finite()) {
                    return Err(Error::InvalidConfig("non-finite OOD condition".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Files written by one experiment, with content hashes for the run summary.
#[derive(Debug)]
pub struct Artifacts {
    dir: PathBuf,
    entries: Vec<ArtifactEntry>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), entries: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.entries.retain(|e| e.path != name);
        self.entries.push(ArtifactEntry {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(path)
    }

    pub fn entries(&self) -> &[ArtifactEntry] {
        &self.entries
    }

    /// Writes `run_summary.json` listing every artifact written so far.
    pub fn finish(mut self, manifest: &ExperimentManifest, statuses: &[(String, String)]) -> Result<Vec<ArtifactEntry>> {
        let runs: Vec<_> = statuses
            .iter()
            .map(|(label, status)| serde_json::json!({ "label": label, "status": status }))
            .collect();
        let summary = serde_json::json!({
            "format_version": MANIFEST_VERSION,
            "experiment": manifest.experiment,
            "manifest": manifest,
            "runs": runs,
            "artifacts": self.entries,
        });
        let text = serde_json::to_string_pretty(&summary)? + "\n";
        let path = self.dir.join("run_summary.json");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(self.entries)
    }
}

/// A trained (or loaded) model together with its training data.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: DiffusionConfig,
    pub ensemble: Ensemble,
    pub logs: Vec<TrainingLog>,
    pub dataset: Dataset,
}

impl TrainedModel {
    pub fn final_loss(&self) -> Option<f64> {
        let last: Vec<f64> = self.logs.iter().filter_map(TrainingLog::last).collect();
        (!last.is_empty()).then(|| last.iter().sum::<f64>() / last.len() as f64)
    }
}

/// Trains the run's strategy, or loads its checkpoint, and records the
/// dataset and checkpoint as artifacts.
pub fn acquire_model(run: &RunConfig, artifacts: &mut Artifacts) -> Result<TrainedModel> {
    let dataset = gen_toy_data(&run.data)?;
    if let Some(path) = &run.checkpoint {
        let ckpt = Checkpoint::read(path)?;
        if ckpt.header.strategy != run.train.strategy {
            return Err(Error::Checkpoint(format!(
                "{} holds a {} model, run `{}` expects {}",
                path.display(),
                ckpt.header.strategy.tag(),
                run.label,
                run.train.strategy.tag()
            )));
        }
        return Ok(TrainedModel {
            config: ckpt.diffusion_config()?,
            ensemble: ckpt.ensemble(),
            logs: ckpt.header.training_logs,
            dataset,
        });
    }
    artifacts.write(&format!("{}_data.csv", run.label), dataset.to_csv()?.as_bytes())?;
    artifacts.write(&format!("{}_data.json", run.label), toy_data_manifest(&run.data)?.as_bytes())?;
    let model = train_run(run, dataset)?;
    let ckpt = Checkpoint::new(&model.config, &run.train, &model.ensemble, model.logs.clone())?;
    artifacts.write(&format!("{}.ckpt", run.label), &ckpt.to_bytes()?)?;
    Ok(model)
}

/// Trains the run's strategy on `dataset`.
pub fn train_run(run: &RunConfig, dataset: Dataset) -> Result<TrainedModel> {
    let config = run.model.diffusion_config()?;
    let (ensemble, logs) = match run.train.strategy {
        Strategy::HyperDiffusion => {
            let hyper = run.model.hyper_config(&config)?;
            let (phi, log) = train_hyper_diffusion(&dataset, &config, &hyper, &run.train)?;
            (Ensemble::Hyper { config: hyper, phi }, vec![log])
        }
        Strategy::DeepEnsemble => {
            let (members, logs) = train_deep_ensemble(&dataset, &config, &run.train)?.into_iter().unzip();
            (Ensemble::Deep { members }, logs)
        }
        Strategy::McDropout => {
            let (weights, log) = train_diffusion(&dataset, &config, &run.train, 0)?;
            (Ensemble::McDropout { weights, rate: run.train.dropout_rate }, vec![log])
        }
    };
    Ok(TrainedModel { config, ensemble, logs, dataset })
}

#[cfg(test)]
mod tests;
