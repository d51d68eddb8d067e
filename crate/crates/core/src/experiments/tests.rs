use super::*;
use crate::models::TimeEmbedding;

fn tiny_model() -> ModelConfig {
    let cfg = DiffusionConfig::new(10, 1, 1, TimeEmbedding { num_frequencies: 2 }, &[8]).unwrap();
    ModelConfig {
        diffusion: cfg.params(),
        hyper: HyperSettings { latent_dim: 2, hidden: vec![8], ..Default::default() },
    }
}

fn tiny_run(label: &str, noise: f64, size: usize, strategy: Strategy) -> RunConfig {
    RunConfig {
        label: label.into(),
        data: ToyProblemConfig::new(noise, size, 1),
        train: TrainRunConfig { epochs: 3, steps: 10, batch_size: 16, strategy, ensemble_size: 3, ..Default::default() },
        model: tiny_model(),
        checkpoint: None,
    }
}

fn tiny_manifest(experiment: ExperimentTag, dir: &Path, runs: Vec<RunConfig>) -> ExperimentManifest {
    ExperimentManifest {
        format_version: MANIFEST_VERSION,
        experiment,
        output_dir: dir.to_path_buf(),
        runs,
        sampling: SamplingConfig { m: 3, n: 8, seed: 4, conditions: ConditionGrid { start: -2.0, end: 2.0, count: 3 } },
        ablation: AblationConfig {
            m_values: vec![2, 4],
            fixed_n: 4,
            n_values: vec![2, 4],
            fixed_m: 3,
            repeats: 3,
            conditions: ConditionGrid { start: -1.0, end: 1.0, count: 2 },
            ood_conditions: vec![7.0],
        },
        ood: OodConfig {
            in_conditions: ConditionGrid { start: -3.0, end: 3.0, count: 5 },
            ood_conditions: vec![8.0],
        },
    }
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn condition_grid_is_inclusive() {
    let g = ConditionGrid { start: -5.0, end: 5.0, count: 64 };
    let p = g.points();
    assert_eq!(p.len(), 64);
    assert_eq!((p[0], p[63]), (-5.0, 5.0));
    assert_eq!(ConditionGrid { start: 1.0, end: 1.0, count: 1 }.points(), vec![1.0]);
}

#[test]
fn presets_validate() {
    for tag in [
        ExperimentTag::AleatoricSweep,
        ExperimentTag::EpistemicSweep,
        ExperimentTag::MSweep,
        ExperimentTag::NSweep,
        ExperimentTag::OodProbe,
    ] {
        let m = ExperimentManifest::preset(tag, "out".into(), 3);
        m.validate().unwrap();
        assert_eq!(ExperimentManifest::from_json(&m.to_json().unwrap()).unwrap(), m);
    }
    let full = ExperimentManifest::preset(ExperimentTag::AleatoricSweep, "o".into(), 0).with_scale(Scale::Full);
    assert_eq!((full.sampling.m, full.sampling.n), (100, 10_000));
    let seeded = full.with_seed(9);
    assert!(seeded.runs.iter().all(|r| r.data.seed == 9 && r.train.master_seed == 9));
}

#[test]
fn manifest_json_is_checked() {
    let m = ExperimentManifest::preset(ExperimentTag::AleatoricSweep, "out".into(), 0);
    let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("format_version");
    assert!(ExperimentManifest::from_json(&v.to_string()).is_err());
    v["format_version"] = 7.into();
    assert!(ExperimentManifest::from_json(&v.to_string()).is_err());
    v["format_version"] = 1.into();
    v["surprise"] = true.into();
    assert!(ExperimentManifest::from_json(&v.to_string()).is_err());
}

#[test]
fn every_run_validates_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let mut bad = tiny_run("b", 0.04, 16, Strategy::HyperDiffusion);
    bad.train.steps = 50;
    let m = tiny_manifest(ExperimentTag::AleatoricSweep, &out, vec![tiny_run("a", 0.04, 16, Strategy::HyperDiffusion), bad]);
    assert!(matches!(run_sweep(&m, 1), Err(Error::InvalidConfig(_))));
    assert!(!out.exists());

    let dup = tiny_manifest(
        ExperimentTag::AleatoricSweep,
        &out,
        vec![tiny_run("a", 0.04, 16, Strategy::HyperDiffusion), tiny_run("a", 0.01, 16, Strategy::HyperDiffusion)],
    );
    assert!(dup.validate().is_err());
    let slash = tiny_manifest(ExperimentTag::AleatoricSweep, &out, vec![tiny_run("../x", 0.04, 16, Strategy::HyperDiffusion)]);
    assert!(slash.validate().is_err());
}

#[test]
fn sweep_writes_hashed_artifacts_and_records_failures() {
    let dir = tempfile::tempdir().unwrap();
    let mut diverging = tiny_run("blows-up", 0.16, 32, Strategy::HyperDiffusion);
    diverging.train.learning_rate = 1e200;
    let m = tiny_manifest(
        ExperimentTag::AleatoricSweep,
        dir.path(),
        vec![tiny_run("ok", 0.04, 32, Strategy::HyperDiffusion), diverging],
    );
    let outcome = run_sweep(&m, 2).unwrap();
    assert_eq!(outcome.rows.len(), 2);
    assert_eq!(outcome.rows[0].status, "ok");
    assert_eq!(outcome.rows[0].per_condition.len(), 3);
    assert!(outcome.rows[0].mean_aleatoric.unwrap() > 0.0);
    assert!(outcome.rows[1].status.starts_with("failed"), "{}", outcome.rows[1].status);
    assert!(outcome.rows[1].mean_aleatoric.is_none());

    let table = read(dir.path(), "aleatoric_sweep.csv");
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(2).unwrap().starts_with("blows-up,"));
    let summary: serde_json::Value = serde_json::from_str(&read(dir.path(), "run_summary.json")).unwrap();
    let listed = summary["artifacts"].as_array().unwrap();
    assert_eq!(listed.len(), outcome.artifacts.len());
    for a in &outcome.artifacts {
        let bytes = fs::read(dir.path().join(&a.path)).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&bytes)), a.sha256, "{}", a.path);
    }
    for name in ["ok.ckpt", "ok_data.csv", "ok_uncertainty.csv", "ok_variance_hist.svg", "aleatoric_sweep.svg"] {
        assert!(outcome.artifacts.iter().any(|a| a.path == name), "{name} missing");
    }
}

fn csvs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    for tag in [ExperimentTag::EpistemicSweep, ExperimentTag::MSweep, ExperimentTag::NSweep, ExperimentTag::OodProbe] {
        let runs = match tag {
            ExperimentTag::OodProbe => vec![
                tiny_run("h", 0.04, 32, Strategy::HyperDiffusion),
                tiny_run("d", 0.04, 32, Strategy::DeepEnsemble),
                tiny_run("mc", 0.04, 32, Strategy::McDropout),
            ],
            ExperimentTag::EpistemicSweep => {
                vec![tiny_run("s16", 0.01, 16, Strategy::HyperDiffusion), tiny_run("s32", 0.01, 32, Strategy::HyperDiffusion)]
            }
            _ => vec![tiny_run("h", 0.04, 32, Strategy::HyperDiffusion)],
        };
        let a = dir.path().join(format!("{tag:?}-1"));
        let b = dir.path().join(format!("{tag:?}-4"));
        run_experiment(&tiny_manifest(tag, &a, runs.clone()), 1).unwrap();
        run_experiment(&tiny_manifest(tag, &b, runs), 4).unwrap();
        let (ca, cb) = (csvs(&a), csvs(&b));
        assert!(!ca.is_empty());
        assert_eq!(ca, cb, "{tag:?}");
    }
}

#[test]
fn ablation_settings_and_checkpoint_reuse() {
    let dir = tempfile::tempdir().unwrap();
    let train_dir = dir.path().join("train");
    let m = tiny_manifest(ExperimentTag::MSweep, &train_dir, vec![tiny_run("h", 0.04, 32, Strategy::HyperDiffusion)]);
    let trained = run_sampling_ablation(&m, 1).unwrap();
    assert_eq!(trained.rows.iter().map(|r| (r.m, r.n)).collect::<Vec<_>>(), vec![(2, 4), (4, 4)]);
    assert!(trained.rows.iter().all(|r| r.std_aleatoric > 0.0 && r.std_epistemic > 0.0));
    let repeats = read(&train_dir, "m_sweep_repeats.csv");
    // 2 settings x 3 conditions x 3 repeats
    assert_eq!(repeats.lines().count(), 1 + 2 * 3 * 3);

    let mut reuse = tiny_run("h", 0.04, 32, Strategy::HyperDiffusion);
    reuse.checkpoint = Some(train_dir.join("h.ckpt"));
    let again_dir = dir.path().join("again");
    let again = run_sampling_ablation(&tiny_manifest(ExperimentTag::MSweep, &again_dir, vec![reuse.clone()]), 1).unwrap();
    assert_eq!(again.rows, trained.rows);
    assert!(!again_dir.join("h.ckpt").exists());

    let n = run_sampling_ablation(&tiny_manifest(ExperimentTag::NSweep, &dir.path().join("n"), vec![reuse.clone()]), 1).unwrap();
    assert_eq!(n.rows.iter().map(|r| (r.m, r.n)).collect::<Vec<_>>(), vec![(3, 2), (3, 4)]);

    reuse.train.strategy = Strategy::DeepEnsemble;
    let wrong = tiny_manifest(ExperimentTag::OodProbe, &dir.path().join("w"), vec![reuse]);
    assert!(matches!(run_ood_probe(&wrong, 1), Err(Error::Checkpoint(_))));
}

#[test]
fn ood_probe_reports_each_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_manifest(
        ExperimentTag::OodProbe,
        dir.path(),
        vec![tiny_run("h", 0.04, 32, Strategy::HyperDiffusion), tiny_run("d", 0.04, 32, Strategy::DeepEnsemble)],
    );
    let out = run_ood_probe(&m, 1).unwrap();
    assert_eq!(out.strategies.len(), 2);
    assert_eq!(out.strategies[1].m, 3);
    for s in &out.strategies {
        assert_eq!(s.in_distribution.len(), 5);
        assert_eq!(s.out_of_distribution.len(), 1);
        assert!(s.rmse_clean.is_finite());
        assert!(s.p90_in_epistemic >= s.median_in_epistemic);
    }
    assert_eq!(read(dir.path(), "ood_probe.csv").lines().count(), 1 + 2 * 6);
    assert_eq!(read(dir.path(), "ood_summary.csv").lines().count(), 1 + 2);
}
