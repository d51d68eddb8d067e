use std::fmt::Write as _;

use super::{acquire_model, ArtifactEntry, Artifacts, ExperimentManifest, ExperimentTag, TrainedModel};
use crate::data::{fmt_f64, toy_forward};
use crate::error::{Error, Result};
use crate::hyper::Strategy;
use crate::plot::{render_svg, PlotData, Series};
use crate::rng;
use crate::uq::{build_sample_matrices, build_sample_matrix, decompose, draw_moments, SampleMatrix, SamplingPlan, UncertaintyReport};

/// Decomposition at one scalar condition.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionResult {
    pub y: f64,
    pub mean: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
    pub total: f64,
}

impl ConditionResult {
    fn new(y: f64, r: &UncertaintyReport) -> Self {
        Self {
            y,
            mean: r.mean.as_slice()[0],
            aleatoric: r.aleatoric.as_slice()[0],
            epistemic: r.epistemic.as_slice()[0],
            total: r.total.as_slice()[0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub noise_variance: f64,
    pub dataset_size: usize,
    pub m: usize,
    pub n: usize,
    pub mean_aleatoric: Option<f64>,
    pub median_aleatoric: Option<f64>,
    pub mean_epistemic: Option<f64>,
    pub median_epistemic: Option<f64>,
    pub final_loss: Option<f64>,
    pub status: String,
    pub per_condition: Vec<ConditionResult>,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub m: usize,
    pub n: usize,
    /// Across-repeat standard deviation, averaged over conditions.
    pub std_aleatoric: f64,
    pub std_epistemic: f64,
    /// Across-repeat mean, averaged over conditions.
    pub mean_aleatoric: f64,
    pub mean_epistemic: f64,
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OodStrategyResult {
    pub strategy: Strategy,
    pub label: String,
    pub m: usize,
    pub n: usize,
    pub in_distribution: Vec<ConditionResult>,
    pub out_of_distribution: Vec<ConditionResult>,
    pub median_in_epistemic: f64,
    pub p90_in_epistemic: f64,
    /// RMSE of the mean prediction against the noise-free `sin(y)` over the
    /// in-distribution conditions.
    pub rmse_clean: f64,
}

#[derive(Clone, Debug)]
pub struct OodOutcome {
    pub strategies: Vec<OodStrategyResult>,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Clone, Debug)]
pub enum ExperimentOutcome {
    Sweep(SweepOutcome),
    Ablation(AblationOutcome),
    Ood(OodOutcome),
}

impl ExperimentOutcome {
    pub fn artifacts(&self) -> &[ArtifactEntry] {
        match self {
            ExperimentOutcome::Sweep(o) => &o.artifacts,
            ExperimentOutcome::Ablation(o) => &o.artifacts,
            ExperimentOutcome::Ood(o) => &o.artifacts,
        }
    }
}

pub fn run_experiment(manifest: &ExperimentManifest, workers: usize) -> Result<ExperimentOutcome> {
    match manifest.experiment {
        ExperimentTag::AleatoricSweep | ExperimentTag::EpistemicSweep => {
            run_sweep(manifest, workers).map(ExperimentOutcome::Sweep)
        }
        ExperimentTag::MSweep | ExperimentTag::NSweep => {
            run_sampling_ablation(manifest, workers).map(ExperimentOutcome::Ablation)
        }
        ExperimentTag::OodProbe => run_ood_probe(manifest, workers).map(ExperimentOutcome::Ood),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Linear-interpolated quantile of a non-empty slice.
fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn condition_csv(rows: &[ConditionResult]) -> String {
    let mut out = String::from("y,mean,aleatoric,epistemic,total\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{}", fmt_f64(r.y), fmt_f64(r.mean), fmt_f64(r.aleatoric), fmt_f64(r.epistemic), fmt_f64(r.total)).unwrap();
    }
    out
}

fn scalar_conditions(ys: &[f64]) -> Vec<Vec<f64>> {
    ys.iter().map(|&y| vec![y]).collect()
}

/// Error kinds a sweep records per run instead of aborting.
fn is_run_failure(e: &Error) -> bool {
    matches!(e, Error::TrainingDiverged { .. } | Error::SamplerDiverged { .. } | Error::NonFinite { .. })
}

/// Aleatoric or epistemic sweep: trains each run, samples the condition grid
/// and records mean estimates. Diverged runs are recorded and skipped.
pub fn run_sweep(manifest: &ExperimentManifest, workers: usize) -> Result<SweepOutcome> {
    manifest.validate()?;
    let aleatoric_focus = match manifest.experiment {
        ExperimentTag::AleatoricSweep => true,
        ExperimentTag::EpistemicSweep => false,
        other => return Err(Error::InvalidConfig(format!("{other:?} is not a sweep"))),
    };
    let mut artifacts = Artifacts::create(&manifest.output_dir)?;
    let s = &manifest.sampling;
    let ys = s.conditions.points();
    let plan = SamplingPlan { m: s.m, n: s.n, master_seed: s.seed, workers };
    let mut rows = Vec::new();

    for run in &manifest.runs {
        let mut row = SweepRow {
            label: run.label.clone(),
            noise_variance: run.data.noise_variance,
            dataset_size: run.data.dataset_size,
            m: s.m,
            n: s.n,
            mean_aleatoric: None,
            median_aleatoric: None,
            mean_epistemic: None,
            median_epistemic: None,
            final_loss: None,
            status: "ok".into(),
            per_condition: Vec::new(),
        };
        let attempt = acquire_model(run, &mut artifacts).and_then(|model| {
            let plan = SamplingPlan { m: model.ensemble.capacity().map_or(plan.m, |c| c.min(plan.m)), ..plan };
            let matrices = build_sample_matrices(&model.config, &model.ensemble, &scalar_conditions(&ys), plan)?;
            Ok((model, plan, matrices))
        });
        let (model, plan, matrices) = match attempt {
            Ok(v) => v,
            Err(e) if is_run_failure(&e) => {
                row.status = format!("failed: {e}");
                rows.push(row);
                continue;
            }
            Err(e) => return Err(e),
        };
        row.m = plan.m;
        row.final_loss = model.final_loss();
        let reports = matrices.iter().map(decompose).collect::<Result<Vec<_>>>()?;
        row.per_condition = ys.iter().zip(&reports).map(|(&y, r)| ConditionResult::new(y, r)).collect();
        let alea: Vec<f64> = row.per_condition.iter().map(|c| c.aleatoric).collect();
        let epi: Vec<f64> = row.per_condition.iter().map(|c| c.epistemic).collect();
        row.mean_aleatoric = Some(mean(&alea));
        row.median_aleatoric = Some(quantile(&alea, 0.5));
        row.mean_epistemic = Some(mean(&epi));
        row.median_epistemic = Some(quantile(&epi, 0.5));

        artifacts.write(&format!("{}_uncertainty.csv", run.label), condition_csv(&row.per_condition).as_bytes())?;
        let (title, x_label, values) = distribution(&matrices, aleatoric_focus);
        let svg = render_svg(
            &format!("{title}: {}", run.label),
            x_label,
            "count",
            &PlotData::Histogram { label: run.label.clone(), values, bins: 40 },
        )?;
        let kind = if aleatoric_focus { "variance" } else { "mean" };
        artifacts.write(&format!("{}_{kind}_hist.svg", run.label), svg.as_bytes())?;
        rows.push(row);
    }

    let stem = manifest.experiment.file_stem();
    let mut table = String::from(
        "label,noise_variance,dataset_size,m,n,conditions,mean_aleatoric,median_aleatoric,mean_epistemic,median_epistemic,final_loss,status\n",
    );
    for r in &rows {
        writeln!(
            table,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.label,
            fmt_f64(r.noise_variance),
            r.dataset_size,
            r.m,
            r.n,
            r.per_condition.len(),
            opt(r.mean_aleatoric),
            opt(r.median_aleatoric),
            opt(r.mean_epistemic),
            opt(r.median_epistemic),
            opt(r.final_loss),
            r.status.replace(',', ";")
        )
        .unwrap();
    }
    artifacts.write(&format!("{stem}.csv"), table.as_bytes())?;

    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| {
            let x = if aleatoric_focus { r.noise_variance } else { r.dataset_size as f64 };
            let y = if aleatoric_focus { r.mean_aleatoric } else { r.mean_epistemic };
            y.map(|y| (x, y))
        })
        .collect();
    if !points.is_empty() {
        let (x_label, y_label) = if aleatoric_focus {
            ("noise variance", "mean aleatoric estimate")
        } else {
            ("dataset size", "mean epistemic estimate")
        };
        let svg = render_svg(stem, x_label, y_label, &PlotData::Lines(vec![Series { label: "estimate".into(), points }]))?;
        artifacts.write(&format!("{stem}.svg"), svg.as_bytes())?;
    }
    let statuses: Vec<(String, String)> = rows.iter().map(|r| (r.label.clone(), r.status.clone())).collect();
    let artifacts = artifacts.finish(manifest, &statuses)?;
    Ok(SweepOutcome { rows, artifacts })
}

/// Per-draw variances (aleatoric view) or mean-centred per-draw means
/// (epistemic view), pooled over conditions.
fn distribution(matrices: &[SampleMatrix], aleatoric_focus: bool) -> (&'static str, &'static str, Vec<f64>) {
    let mut values = Vec::new();
    for m in matrices {
        let moments = draw_moments(m, 0);
        if aleatoric_focus {
            values.extend(moments.iter().map(|&(_, v)| v));
        } else {
            let centre = moments.iter().map(|&(mu, _)| mu).sum::<f64>() / moments.len() as f64;
            values.extend(moments.iter().map(|&(mu, _)| mu - centre));
        }
    }
    if aleatoric_focus {
        ("per-draw sample variance", "variance", values)
    } else {
        ("per-draw mean, centred", "mean - grand mean", values)
    }
}

fn only_model(manifest: &ExperimentManifest, artifacts: &mut Artifacts) -> Result<TrainedModel> {
    acquire_model(&manifest.runs[0], artifacts)
}

/// Repeated estimates at varying M (fixed N) or varying N (fixed M). Every
/// repeat and condition draws its own weights and samples; smaller settings
/// reuse leading blocks of the largest one.
pub fn run_sampling_ablation(manifest: &ExperimentManifest, workers: usize) -> Result<AblationOutcome> {
    manifest.validate()?;
    let a = &manifest.ablation;
    let settings: Vec<(usize, usize)> = match manifest.experiment {
        ExperimentTag::MSweep => a.m_values.iter().map(|&m| (m, a.fixed_n)).collect(),
        ExperimentTag::NSweep => a.n_values.iter().map(|&n| (a.fixed_m, n)).collect(),
        other => return Err(Error::InvalidConfig(format!("{other:?} is not a sampling ablation"))),
    };
    let mut artifacts = Artifacts::create(&manifest.output_dir)?;
    let model = only_model(manifest, &mut artifacts)?;
    let m_max = settings.iter().map(|s| s.0).max().expect("validated");
    let n_max = settings.iter().map(|s| s.1).max().expect("validated");
    let mut ys = a.conditions.points();
    let in_count = ys.len();
    ys.extend(&a.ood_conditions);

    // estimates[setting][condition][repeat] = (aleatoric, epistemic)
    let mut estimates = vec![vec![Vec::with_capacity(a.repeats); ys.len()]; settings.len()];
    for r in 0..a.repeats {
        for (c, &y) in ys.iter().enumerate() {
            let seed = rng::derive_seed(manifest.sampling.seed, &[r as u64, c as u64]);
            let plan = SamplingPlan { m: m_max, n: n_max, master_seed: seed, workers };
            let full = build_sample_matrix(&model.config, &model.ensemble, &[y], plan)?;
            for (k, &(m, n)) in settings.iter().enumerate() {
                let rep = decompose(&full.prefix(m, n)?)?;
                estimates[k][c].push((rep.aleatoric.as_slice()[0], rep.epistemic.as_slice()[0]));
            }
        }
    }

    let stem = manifest.experiment.file_stem();
    let mut raw = String::from("m,n,y,repeat,aleatoric,epistemic\n");
    let mut profiles =
        String::from("m,n,y,in_distribution,mean_aleatoric,std_aleatoric,mean_epistemic,std_epistemic\n");
    let mut rows = Vec::new();
    let mut alea_series = Vec::new();
    let mut epi_series = Vec::new();
    for (k, &(m, n)) in settings.iter().enumerate() {
        let (mut sa, mut se, mut ma, mut me) = (0.0, 0.0, 0.0, 0.0);
        let mut alea_points = Vec::new();
        let mut epi_points = Vec::new();
        for (c, &y) in ys.iter().enumerate() {
            let alea: Vec<f64> = estimates[k][c].iter().map(|e| e.0).collect();
            let epi: Vec<f64> = estimates[k][c].iter().map(|e| e.1).collect();
            for (r, (al, ep)) in alea.iter().zip(&epi).enumerate() {
                writeln!(raw, "{m},{n},{},{r},{},{}", fmt_f64(y), fmt_f64(*al), fmt_f64(*ep)).unwrap();
            }
            let (mean_a, std_a, mean_e, std_e) = (mean(&alea), sample_std(&alea), mean(&epi), sample_std(&epi));
            writeln!(
                profiles,
                "{m},{n},{},{},{},{},{},{}",
                fmt_f64(y),
                c < in_count,
                fmt_f64(mean_a),
                fmt_f64(std_a),
                fmt_f64(mean_e),
                fmt_f64(std_e)
            )
            .unwrap();
            sa += std_a;
            se += std_e;
            ma += mean_a;
            me += mean_e;
            alea_points.push((y, mean_a));
            epi_points.push((y, mean_e));
        }
        let k = ys.len() as f64;
        rows.push(AblationRow {
            m,
            n,
            std_aleatoric: sa / k,
            std_epistemic: se / k,
            mean_aleatoric: ma / k,
            mean_epistemic: me / k,
        });
        let label = format!("M={m}, N={n}");
        alea_series.push(Series { label: label.clone(), points: alea_points });
        epi_series.push(Series { label, points: epi_points });
    }
    let mut summary = String::from("m,n,repeats,conditions,std_aleatoric,std_epistemic,mean_aleatoric,mean_epistemic\n");
    for r in &rows {
        writeln!(
            summary,
            "{},{},{},{},{},{},{},{}",
            r.m,
            r.n,
            a.repeats,
            ys.len(),
            fmt_f64(r.std_aleatoric),
            fmt_f64(r.std_epistemic),
            fmt_f64(r.mean_aleatoric),
            fmt_f64(r.mean_epistemic)
        )
        .unwrap();
    }
    artifacts.write(&format!("{stem}.csv"), summary.as_bytes())?;
    artifacts.write(&format!("{stem}_profiles.csv"), profiles.as_bytes())?;
    artifacts.write(&format!("{stem}_repeats.csv"), raw.as_bytes())?;
    for (name, series, y_label) in [
        ("aleatoric", alea_series, "mean aleatoric estimate"),
        ("epistemic", epi_series, "mean epistemic estimate"),
    ] {
        let svg = render_svg(&format!("{stem}: {name} profile"), "condition y", y_label, &PlotData::Lines(series))?;
        artifacts.write(&format!("{stem}_{name}.svg"), svg.as_bytes())?;
    }
    let artifacts = artifacts.finish(manifest, &[(manifest.runs[0].label.clone(), "ok".into())])?;
    Ok(AblationOutcome { rows, artifacts })
}

/// Epistemic estimates of every strategy inside and outside the training
/// support, plus mean-prediction accuracy inside it.
pub fn run_ood_probe(manifest: &ExperimentManifest, workers: usize) -> Result<OodOutcome> {
    manifest.validate()?;
    if manifest.experiment != ExperimentTag::OodProbe {
        return Err(Error::InvalidConfig(format!("{:?} is not an OOD probe", manifest.experiment)));
    }
    let mut artifacts = Artifacts::create(&manifest.output_dir)?;
    let s = &manifest.sampling;
    let in_ys = manifest.ood.in_conditions.points();
    let ood_ys = manifest.ood.ood_conditions.clone();
    let all: Vec<f64> = in_ys.iter().chain(&ood_ys).copied().collect();
    let mut strategies = Vec::new();
    for run in &manifest.runs {
        let model = acquire_model(run, &mut artifacts)?;
        let m = model.ensemble.capacity().map_or(s.m, |c| c.min(s.m));
        let plan = SamplingPlan { m, n: s.n, master_seed: s.seed, workers };
        let matrices = build_sample_matrices(&model.config, &model.ensemble, &scalar_conditions(&all), plan)?;
        let results: Vec<ConditionResult> = all
            .iter()
            .zip(&matrices)
            .map(|(&y, mat)| decompose(mat).map(|r| ConditionResult::new(y, &r)))
            .collect::<Result<_>>()?;
        let (inside, outside) = results.split_at(in_ys.len());
        let epi: Vec<f64> = inside.iter().map(|c| c.epistemic).collect();
        let sq: Vec<f64> = inside.iter().map(|c| (c.mean - toy_forward(c.y)).powi(2)).collect();
        strategies.push(OodStrategyResult {
            strategy: run.train.strategy,
            label: run.label.clone(),
            m,
            n: s.n,
            in_distribution: inside.to_vec(),
            out_of_distribution: outside.to_vec(),
            median_in_epistemic: quantile(&epi, 0.5),
            p90_in_epistemic: quantile(&epi, 0.9),
            rmse_clean: mean(&sq).sqrt(),
        });
    }

    let mut detail = String::from("strategy,label,m,n,y,in_distribution,mean,aleatoric,epistemic,total\n");
    let mut summary = String::from("strategy,label,m,n,median_in_epistemic,p90_in_epistemic,ood_y,ood_epistemic,ratio_to_median\n");
    let mut accuracy = String::from("strategy,label,m,n,rmse_clean\n");
    let mut series = Vec::new();
    for r in &strategies {
        let tag = r.strategy.tag();
        for (c, inside) in r.in_distribution.iter().map(|c| (c, true)).chain(r.out_of_distribution.iter().map(|c| (c, false))) {
            writeln!(
                detail,
                "{tag},{},{},{},{},{inside},{},{},{},{}",
                r.label,
                r.m,
                r.n,
                fmt_f64(c.y),
                fmt_f64(c.mean),
                fmt_f64(c.aleatoric),
                fmt_f64(c.epistemic),
                fmt_f64(c.total)
            )
            .unwrap();
        }
        for c in &r.out_of_distribution {
            writeln!(
                summary,
                "{tag},{},{},{},{},{},{},{},{}",
                r.label,
                r.m,
                r.n,
                fmt_f64(r.median_in_epistemic),
                fmt_f64(r.p90_in_epistemic),
                fmt_f64(c.y),
                fmt_f64(c.epistemic),
                fmt_f64(c.epistemic / r.median_in_epistemic)
            )
            .unwrap();
        }
        writeln!(accuracy, "{tag},{},{},{},{}", r.label, r.m, r.n, fmt_f64(r.rmse_clean)).unwrap();
        let points = r.in_distribution.iter().chain(&r.out_of_distribution).map(|c| (c.y, c.epistemic)).collect();
        series.push(Series { label: tag.to_string(), points });
    }
    artifacts.write("ood_probe.csv", detail.as_bytes())?;
    artifacts.write("ood_summary.csv", summary.as_bytes())?;
    artifacts.write("ood_accuracy.csv", accuracy.as_bytes())?;
    let svg = render_svg("epistemic estimate by condition", "condition y", "epistemic", &PlotData::Lines(series))?;
    artifacts.write("ood_epistemic.svg", svg.as_bytes())?;
    let statuses: Vec<(String, String)> = manifest.runs.iter().map(|r| (r.label.clone(), "ok".to_string())).collect();
    let artifacts = artifacts.finish(manifest, &statuses)?;
    Ok(OodOutcome { strategies, artifacts })
}
