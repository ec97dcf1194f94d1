use std::fs;

use bbcoreset::algorithms::train_bb_psvi;
use bbcoreset::experiment::{
    aggregate, build_model, entropy_grid, prepare_data, read_aggregate_csv, read_trials, run_continual, run_continual_seed,
    run_experiment, run_trial, ExperimentConfig, Method,
};
use bbcoreset::par::Exec;

const TOY: &str = r#"
name = "toy"
method = "bb-psvi"
seeds = [0, 1]
final_samples = 20

[data]
source = "half-moon"
n = 80
noise = 0.1

[model]
kind = "feedforward-bnn"
hidden = [4]

[train]
coreset_size = 4
[train.bilevel]
inner_steps = 2
outer_iters = 4
batch_size = 16
"#;

fn toy(dir: &std::path::Path, extra: &[&str]) -> ExperimentConfig {
    let mut o: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
    o.push(format!("out_dir={:?}", dir.to_string_lossy()));
    ExperimentConfig::from_toml(TOY, &o).unwrap()
}

#[test]
fn training_is_deterministic_across_executors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path(), &[]);
    let (train, test) = prepare_data(&cfg.data, 3).unwrap();
    let model = build_model(&cfg.model, train.dim(), train.num_classes).unwrap();
    let mut tc = cfg.train.clone();
    tc.bilevel.seed = 3;
    let a = train_bb_psvi(&model, &train, Some(&test), &tc).unwrap();
    tc.exec = Exec::Sequential;
    let b = train_bb_psvi(&model, &train, Some(&test), &tc).unwrap();
    assert_eq!(a.psi, b.psi);
    assert_eq!(a.coreset, b.coreset);
    assert_eq!(a.trace.without_timing(), b.trace.without_timing());
}

#[test]
fn reruns_write_identical_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path(), &["coreset_sizes=[3, 5]"]);
    let first = run_experiment(&cfg, &cfg.sizes(), Exec::Parallel).unwrap();
    let bytes = fs::read(first.dir.join("aggregate.csv")).unwrap();
    let second = run_experiment(&cfg, &cfg.sizes(), Exec::Sequential).unwrap();
    assert_eq!(bytes, fs::read(second.dir.join("aggregate.csv")).unwrap());
    assert_eq!(first.rows.len(), 2);
    assert!(first.rows.iter().all(|r| r.trials == 2 && r.config_hash == cfg.hash()));
    assert!(first.dir.ends_with(format!("toy-{}", cfg.hash())));
}

#[test]
fn aggregate_is_recomputable_from_trial_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path(), &[]);
    let summary = run_experiment(&cfg, &cfg.sizes(), Exec::Parallel).unwrap();
    let trials = read_trials(&summary.dir).unwrap();
    assert_eq!(trials.len(), 2);
    assert_eq!(trials, summary.trials);
    let recomputed = aggregate(&trials);
    let written = read_aggregate_csv(&summary.dir.join("aggregate.csv")).unwrap();
    assert_eq!(recomputed, written);
    assert!(summary.dir.join("config.toml").is_file());
    assert!(!summary.dir.join("error.json").exists());
}

#[test]
fn full_mfvi_reports_a_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path(), &["method=\"full-mfvi\"", "coreset_sizes=[3, 5, 7]", "train.vi_steps=10"]);
    assert_eq!(cfg.sizes(), vec![0]);
    let summary = run_experiment(&cfg, &cfg.sizes(), Exec::Parallel).unwrap();
    assert_eq!(summary.rows.len(), 1);
    assert_eq!(summary.rows[0].method, Method::FullMfvi);
    assert!(summary.trials.iter().all(|t| t.coreset.is_none() && !t.corrected));
}

#[test]
fn failed_trial_leaves_error_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path(), &["train.coreset_size=500"]);
    let err = run_experiment(&cfg, &cfg.sizes(), Exec::Parallel).unwrap_err();
    let text = fs::read_to_string(cfg.run_dir().join("error.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["kind"], err.kind());
    assert_eq!(v["config_hash"], cfg.hash());
    assert!(!cfg.run_dir().join("aggregate.csv").exists());
}

#[test]
fn trial_outputs_are_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path(), &[]);
    let t = run_trial(&cfg, 4, 0).unwrap();
    assert!((0.0..=1.0).contains(&t.report.accuracy));
    assert!(t.report.nll.is_finite() && t.report.nll >= 0.0);
    assert!(t.report.ess > 0.0 && t.report.ess <= 1.0 + 1e-12);
    assert!(t.final_elbo.is_finite());
    assert_eq!(t.trace.iterations.len(), 4);
    let cs = t.coreset.as_ref().unwrap();
    assert_eq!(cs.len(), 4);
    assert!(cs.weights().iter().all(|&w| w >= 0.0));
}

#[test]
fn entropy_grid_is_bounded_and_lists_coreset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path(), &[]);
    let t = run_trial(&cfg, 4, 0).unwrap();
    let model = bbcoreset::models::Model::new(t.model.clone()).unwrap();
    let rows = entropy_grid(&model, &t.psi, t.correction(), [-2.0, 2.0, -2.0, 2.0], (5, 4), 10, 0).unwrap();
    let (grid, points): (Vec<_>, Vec<_>) = rows.iter().partition(|r| r.kind == "grid");
    assert_eq!(grid.len(), 20);
    assert_eq!(points.len(), 4);
    assert!(grid.iter().all(|r| r.value >= 0.0 && r.value <= 2f64.ln() + 1e-12));
    assert!(entropy_grid(&model, &t.psi, None, [0.0; 4], (0, 3), 10, 0).is_err());
}

#[test]
fn continual_records_every_task() {
    let dir = tempfile::tempdir().unwrap();
    let text = TOY.replace("\"half-moon\"\nn = 80\nnoise = 0.1", "\"four-class\"\nn = 200");
    let mut cfg = ExperimentConfig::from_toml(&text, &[format!("out_dir={:?}", dir.path().to_string_lossy())]).unwrap();
    cfg.continual = Some(bbcoreset::experiment::ContinualConfig {
        tasks: vec![vec![0, 1], vec![2], vec![3]],
        coreset_sizes: vec![4, 6, 8],
        fresh_only: false,
    });
    let results = run_continual(&cfg, Exec::Parallel).unwrap();
    assert_eq!(results.len(), 2);
    for r in &results {
        let seen: Vec<usize> = r.tasks.iter().map(|t| t.classes_seen).collect();
        assert_eq!(seen, vec![2, 3, 4]);
        let sizes: Vec<usize> = r.tasks.iter().map(|t| t.coreset_size).collect();
        assert_eq!(sizes, vec![4, 6, 8]);
        for t in &r.tasks {
            assert!(t.accuracy_all <= t.accuracy_seen + 1e-12);
        }
    }
    assert!(cfg.run_dir().join("continual.csv").is_file());

    let mut bad = cfg.clone();
    bad.continual.as_mut().unwrap().coreset_sizes = vec![4, 3, 8];
    assert!(run_continual_seed(&bad, 0).is_err());
    bad.continual.as_mut().unwrap().tasks = vec![vec![0, 1], vec![3], vec![2]];
    bad.continual.as_mut().unwrap().coreset_sizes = vec![4, 6, 8];
    assert!(run_continual_seed(&bad, 0).is_err());
}
