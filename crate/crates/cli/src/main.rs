use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hyperdiff_core::checkpoint::Checkpoint;
use hyperdiff_core::data::{write_toy_data, Dataset, ToyProblemConfig};
use hyperdiff_core::experiments::{
    acquire_model, run_experiment, train_run, Artifacts, ExperimentManifest, ExperimentOutcome, ExperimentTag,
    RunConfig, Scale,
};
use hyperdiff_core::gradchecks;
use hyperdiff_core::hyper::{Strategy, TrainRunConfig};
use hyperdiff_core::uq::{build_sample_matrix, decompose, SampleMatrix, SamplingPlan};

#[derive(Parser)]
#[command(name = "hyperdiff", version, about = "Hyper-diffusion uncertainty experiments on the toy problem x = sin(y) + noise")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Master seed for data, training and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON experiment manifest.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sampling threads; results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Sampling size: desk (M=20, N=1000) or full (M=100, N=10000).
    #[arg(long, global = true, value_enum)]
    scale: Option<ScaleArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Full,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Desk => Scale::Desk,
            ScaleArg::Full => Scale::Full,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    HyperDiffusion,
    DeepEnsemble,
    McDropout,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::HyperDiffusion => Strategy::HyperDiffusion,
            StrategyArg::DeepEnsemble => Strategy::DeepEnsemble,
            StrategyArg::McDropout => Strategy::McDropout,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentArg {
    AleatoricSweep,
    EpistemicSweep,
    MSweep,
    NSweep,
    OodProbe,
}

impl From<ExperimentArg> for ExperimentTag {
    fn from(e: ExperimentArg) -> Self {
        match e {
            ExperimentArg::AleatoricSweep => ExperimentTag::AleatoricSweep,
            ExperimentArg::EpistemicSweep => ExperimentTag::EpistemicSweep,
            ExperimentArg::MSweep => ExperimentTag::MSweep,
            ExperimentArg::NSweep => ExperimentTag::NSweep,
            ExperimentArg::OodProbe => ExperimentTag::OodProbe,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the preset manifest of an experiment as JSON.
    Manifest {
        #[arg(value_enum)]
        experiment: ExperimentArg,
    },
    /// Generate a toy dataset as CSV plus a JSON sidecar.
    GenData {
        #[arg(long, default_value_t = 0.04)]
        noise_variance: f64,
        #[arg(long, default_value_t = 500)]
        size: usize,
        #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
        y_min: f64,
        #[arg(long, default_value_t = 5.0, allow_hyphen_values = true)]
        y_max: f64,
        #[arg(long, default_value = "toy_data")]
        name: String,
    },
    /// Train a model and write its checkpoint. With --config, trains every run of the manifest.
    Train {
        /// Train on this `y,x` CSV instead of generating data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0.04)]
        noise_variance: f64,
        #[arg(long, default_value_t = 500)]
        size: usize,
        #[arg(long, value_enum, default_value = "hyper-diffusion")]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 500)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 5)]
        ensemble_size: usize,
        #[arg(long, default_value_t = 0.1)]
        dropout_rate: f64,
        /// Checkpoint file stem; defaults to the strategy name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Draw an M x N sample matrix per condition from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Condition value; repeat for several.
        #[arg(long = "y", required = true, allow_hyphen_values = true)]
        ys: Vec<f64>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value = "samples")]
        name: String,
    },
    /// Decompose a sample-matrix CSV into aleatoric and epistemic variance.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        /// Report CSV path; defaults to <out>/report.csv.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Aleatoric estimates across noise levels.
    SweepAleatoric,
    /// Epistemic estimates across dataset sizes.
    SweepEpistemic,
    /// Estimator spread as M and N vary.
    AblateSampling {
        /// Pre-trained hyper-diffusion checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Epistemic estimates inside and outside the training support.
    OodProbe {
        #[arg(long)]
        hyper_checkpoint: Option<PathBuf>,
        #[arg(long)]
        deep_checkpoint: Option<PathBuf>,
        #[arg(long)]
        dropout_checkpoint: Option<PathBuf>,
    },
    /// Finite-difference checks of the gradient paths.
    Gradcheck {
        #[arg(long, default_value_t = gradchecks::DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let g = &cli.global;
    let workers = g
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from));
    if workers == 0 {
        bail!("--workers must be at least 1");
    }
    match &cli.command {
        Command::Manifest { experiment } => {
            let tag = ExperimentTag::from(*experiment);
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("out").join(tag.file_stem()));
            let mut manifest = ExperimentManifest::preset(tag, out, g.seed.unwrap_or(0));
            if let Some(scale) = g.scale {
                manifest = manifest.with_scale(scale.into());
            }
            print!("{}", manifest.to_json()?);
        }
        Command::GenData { noise_variance, size, y_min, y_max, name } => {
            let out = g.out.clone().unwrap_or_else(|| "out".into());
            let config = ToyProblemConfig {
                noise_variance: *noise_variance,
                dataset_size: *size,
                y_range: (*y_min, *y_max),
                seed: g.seed.unwrap_or(0),
            };
            let ds = write_toy_data(&config, &out, name)?;
            println!("wrote {} pairs to {}", ds.len(), out.join(format!("{name}.csv")).display());
        }
        Command::Train { data, noise_variance, size, strategy, epochs, batch_size, ensemble_size, dropout_rate, name } => {
            if let Some(path) = &g.config {
                let mut manifest = load_manifest(path, g)?;
                manifest.output_dir = g.out.clone().unwrap_or(manifest.output_dir);
                let mut artifacts = Artifacts::create(&manifest.output_dir)?;
                for run in &manifest.runs {
                    let model = acquire_model(run, &mut artifacts)?;
                    report_training(&run.label, model.final_loss());
                }
                return Ok(());
            }
            let strategy: Strategy = (*strategy).into();
            let seed = g.seed.unwrap_or(0);
            let run = RunConfig {
                label: name.clone().unwrap_or_else(|| strategy.tag().to_string()),
                data: ToyProblemConfig::new(*noise_variance, *size, seed),
                train: TrainRunConfig {
                    epochs: *epochs,
                    batch_size: *batch_size,
                    master_seed: seed,
                    strategy,
                    ensemble_size: *ensemble_size,
                    dropout_rate: *dropout_rate,
                    ..Default::default()
                },
                model: Default::default(),
                checkpoint: None,
            };
            run.validate()?;
            let out = g.out.clone().unwrap_or_else(|| "out".into());
            let mut artifacts = Artifacts::create(&out)?;
            let model = match data {
                Some(path) => {
                    let ds = Dataset::read_csv(path)?;
                    let model = train_run(&run, ds)?;
                    let ckpt = Checkpoint::new(&model.config, &run.train, &model.ensemble, model.logs.clone())?;
                    artifacts.write(&format!("{}.ckpt", run.label), &ckpt.to_bytes()?)?;
                    model
                }
                None => acquire_model(&run, &mut artifacts)?,
            };
            let mut losses = String::from("member,epoch,loss\n");
            for (member, log) in model.logs.iter().enumerate() {
                for (epoch, loss) in log.epoch_loss.iter().enumerate() {
                    losses.push_str(&format!("{member},{epoch},{loss:.16e}\n"));
                }
            }
            artifacts.write(&format!("{}_loss.csv", run.label), losses.as_bytes())?;
            report_training(&run.label, model.final_loss());
            println!("checkpoint: {}", out.join(format!("{}.ckpt", run.label)).display());
        }
        Command::Sample { checkpoint, ys, m, n, name } => {
            let ckpt = Checkpoint::read(checkpoint)?;
            let config = ckpt.diffusion_config()?;
            let ensemble = ckpt.ensemble();
            let (dm, dn) = Scale::from(g.scale.unwrap_or(ScaleArg::Desk)).sizes();
            let m = m.unwrap_or_else(|| ensemble.capacity().map_or(dm, |c| c.min(dm)));
            let plan = SamplingPlan { m, n: n.unwrap_or(dn), master_seed: g.seed.unwrap_or(0), workers };
            let out = g.out.clone().unwrap_or_else(|| "out".into());
            let mut artifacts = Artifacts::create(&out)?;
            println!("y,mean,aleatoric,epistemic,total");
            for (k, &y) in ys.iter().enumerate() {
                let matrix = build_sample_matrix(&config, &ensemble, &[y], plan)?;
                artifacts.write(&format!("{name}_{k}.csv"), matrix.to_csv().as_bytes())?;
                let r = decompose(&matrix)?;
                artifacts.write(&format!("{name}_{k}_report.csv"), r.to_csv().as_bytes())?;
                println!(
                    "{y},{:.6e},{:.6e},{:.6e},{:.6e}",
                    r.mean.as_slice()[0],
                    r.aleatoric.as_slice()[0],
                    r.epistemic.as_slice()[0],
                    r.total.as_slice()[0]
                );
            }
        }
        Command::Decompose { input, output } => {
            let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
            let matrix = SampleMatrix::from_csv(&text)?;
            let report = decompose(&matrix)?;
            let path = match output {
                Some(p) => p.clone(),
                None => {
                    let out = g.out.clone().unwrap_or_else(|| "out".into());
                    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
                    out.join("report.csv")
                }
            };
            fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            print!("{}", report.to_csv());
            for w in &report.warnings {
                eprintln!("warning: {w:?}");
            }
        }
        Command::SweepAleatoric => run_manifest(experiment_manifest(ExperimentTag::AleatoricSweep, g)?, workers)?,
        Command::SweepEpistemic => run_manifest(experiment_manifest(ExperimentTag::EpistemicSweep, g)?, workers)?,
        Command::AblateSampling { checkpoint } => {
            if g.config.is_some() {
                let mut manifest = experiment_manifest(ExperimentTag::MSweep, g)?;
                if !matches!(manifest.experiment, ExperimentTag::MSweep | ExperimentTag::NSweep) {
                    bail!("ablate-sampling needs an m-sweep or n-sweep manifest");
                }
                if checkpoint.is_some() {
                    manifest.runs[0].checkpoint = checkpoint.clone();
                }
                run_manifest(manifest, workers)?;
            } else {
                let root = g.out.clone().unwrap_or_else(|| "out".into());
                let mut reuse = checkpoint.clone();
                for tag in [ExperimentTag::MSweep, ExperimentTag::NSweep] {
                    let mut manifest = experiment_manifest(tag, g)?;
                    manifest.output_dir = root.join(tag.file_stem());
                    manifest.runs[0].checkpoint = reuse.clone();
                    let label = manifest.runs[0].label.clone();
                    let dir = manifest.output_dir.clone();
                    run_manifest(manifest, workers)?;
                    reuse = reuse.or_else(|| Some(dir.join(format!("{label}.ckpt"))));
                }
            }
        }
        Command::OodProbe { hyper_checkpoint, deep_checkpoint, dropout_checkpoint } => {
            let mut manifest = experiment_manifest(ExperimentTag::OodProbe, g)?;
            for run in &mut manifest.runs {
                let given = match run.train.strategy {
                    Strategy::HyperDiffusion => hyper_checkpoint,
                    Strategy::DeepEnsemble => deep_checkpoint,
                    Strategy::McDropout => dropout_checkpoint,
                };
                if given.is_some() {
                    run.checkpoint = given.clone();
                }
            }
            run_manifest(manifest, workers)?;
        }
        Command::Gradcheck { tolerance } => {
            let mut failed = false;
            for (name, r) in gradchecks::run_all(g.seed.unwrap_or(0), *tolerance)? {
                println!(
                    "{} {name}: max relative error {:.3e} over {} coordinates ({} skipped at ReLU kinks), tolerance {:.0e}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.max_rel_error,
                    r.checked,
                    r.skipped_kinks,
                    r.tolerance
                );
                failed |= !r.passed;
            }
            if failed {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}

fn report_training(label: &str, final_loss: Option<f64>) {
    match final_loss {
        Some(l) => println!("{label}: final epoch loss {l:.4}"),
        None => println!("{label}: loaded"),
    }
}

fn load_manifest(path: &Path, g: &Global) -> Result<ExperimentManifest> {
    let mut manifest = ExperimentManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))?;
    if let Some(seed) = g.seed {
        manifest = manifest.with_seed(seed);
    }
    if let Some(scale) = g.scale {
        manifest = manifest.with_scale(scale.into());
    }
    manifest.validate()?;
    Ok(manifest)
}

/// The manifest given by --config, or the preset for `tag`, with global
/// overrides applied.
fn experiment_manifest(tag: ExperimentTag, g: &Global) -> Result<ExperimentManifest> {
    let mut manifest = match &g.config {
        Some(path) => {
            let m = load_manifest(path, g)?;
            let compatible = m.experiment == tag
                || matches!((tag, m.experiment), (ExperimentTag::MSweep, ExperimentTag::NSweep));
            if !compatible {
                bail!("manifest {} is for {:?}, not {:?}", path.display(), m.experiment, tag);
            }
            m
        }
        None => {
            let out = PathBuf::from("out").join(tag.file_stem());
            let mut m = ExperimentManifest::preset(tag, out, g.seed.unwrap_or(0));
            if let Some(scale) = g.scale {
                m = m.with_scale(scale.into());
            }
            m
        }
    };
    if let Some(out) = &g.out {
        manifest.output_dir = out.clone();
    }
    Ok(manifest)
}

fn run_manifest(manifest: ExperimentManifest, workers: usize) -> Result<()> {
    let outcome = run_experiment(&manifest, workers)?;
    match &outcome {
        ExperimentOutcome::Sweep(s) => {
            println!("label,noise_variance,dataset_size,mean_aleatoric,mean_epistemic,status");
            for r in &s.rows {
                let fmt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.4e}"));
                println!(
                    "{},{},{},{},{},{}",
                    r.label,
                    r.noise_variance,
                    r.dataset_size,
                    fmt(r.mean_aleatoric),
                    fmt(r.mean_epistemic),
                    r.status
                );
            }
        }
        ExperimentOutcome::Ablation(a) => {
            println!("m,n,std_aleatoric,std_epistemic");
            for r in &a.rows {
                println!("{},{},{:.4e},{:.4e}", r.m, r.n, r.std_aleatoric, r.std_epistemic);
            }
        }
        ExperimentOutcome::Ood(o) => {
            println!("strategy,m,median_in_epistemic,ood_y,ood_epistemic,rmse_clean");
            for s in &o.strategies {
                for c in &s.out_of_distribution {
                    println!(
                        "{},{},{:.4e},{},{:.4e},{:.4e}",
                        s.strategy.tag(),
                        s.m,
                        s.median_in_epistemic,
                        c.y,
                        c.epistemic,
                        s.rmse_clean
                    );
                }
            }
        }
    }
    println!("{} artifacts in {}", outcome.artifacts().len() + 1, manifest.output_dir.display());
    Ok(())
}
