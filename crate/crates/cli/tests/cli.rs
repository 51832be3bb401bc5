use std::path::{Path, PathBuf};
use std::process::Command;

use asnpe::seed;
use asnpe_cli::experiment::{
    cell_dir, read_metrics, read_summary, read_trajectory, Manifest, MANIFEST_FILE, METRICS_FILE, SUMMARY_FILE,
    TRAJECTORY_FILE,
};
use asnpe_cli::plot::{bootstrap_band, emit_plots, read_band};
use asnpe_cli::{resume_experiment, run_experiment, ExperimentConfig, MethodKind, RunOptions};
use proptest::prelude::*;

const EXE: &str = env!("CARGO_BIN_EXE_asnpe");

/// A linear-Gaussian experiment small enough to run in a few seconds.
fn tiny_lg(dir: &Path, methods: &str, seeds: &str) -> String {
    format!(
        r#"output_dir = "{}"
methods = {methods}
seeds = {seeds}
metrics = ["rmsne", "mmd", "mean_err", "median_dist"]

[task]
kind = "linear_gaussian"
dim = 2

[inference]
rounds = 2
proposal_pool = 32
batch = 16

[inference.acquisition]
num_weight_samples = 5

[inference.train]
max_epochs = 10

[inference.network]
num_transforms = 1
hidden_units = 8

[evaluation]
posterior_samples = 100
reference_samples = 100
predictive_samples = 10
prior_rmsne_draws = 10
"#,
        dir.display()
    )
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn asnpe(args: &[&str]) -> std::process::Output {
    Command::new(EXE).args(args).env("RUST_LOG", "warn").output().unwrap()
}

#[test]
fn defaults_match_documented_values() {
    let c = ExperimentConfig::from_toml("output_dir = \"x\"\n[task]\nkind = \"toy_od\"\n").unwrap();
    assert_eq!(c.inference.rounds, 4);
    assert_eq!(c.inference.proposal_pool, 256);
    assert_eq!(c.inference.batch, 32);
    assert_eq!(c.inference.acquisition.num_weight_samples, 100);
    assert_eq!(c.inference.network.dropout_rate, 0.25);
    assert_eq!(c.seeds, vec![0, 1, 2, 3, 4]);
    assert_eq!(c.methods, vec![MethodKind::Asnpe, MethodKind::Snpe]);
    assert_eq!(c.budget(), 128);
    let again = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
    assert_eq!(again, c);
}

#[test]
fn invalid_configs_are_rejected() {
    let base = "output_dir = \"x\"\n[task]\nkind = \"linear_gaussian\"\n";
    assert!(ExperimentConfig::from_toml(&format!("seeds = [1, 1]\n{base}")).is_err());
    assert!(ExperimentConfig::from_toml(&format!("methods = [\"snpe\", \"snpe\"]\n{base}")).is_err());
    assert!(ExperimentConfig::from_toml(&format!("budget_cap = 127\n{base}")).is_err());
    assert!(ExperimentConfig::from_toml(&format!("budget_cap = 127\nmethods = [\"abc\"]\n{base}")).is_ok());
    assert!(ExperimentConfig::from_toml(&format!("typo_field = 3\n{base}")).is_err());
    assert!(ExperimentConfig::from_toml(&format!("{base}[inference]\nbatch = 0\n")).is_err());
    assert!(ExperimentConfig::from_toml(&format!("{base}[abc]\naccept_quantile = 0.0\n")).is_err());
}

#[test]
fn exit_code_one_for_bad_config() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), "output_dir = \"x\"\nseeds = [0, 0]\n[task]\nkind = \"gaussian_mixture\"\n");
    let out = asnpe(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let out = asnpe(&["run", tmp.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exit_code_three_when_nothing_to_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let out = asnpe(&["resume", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn print_effective_config_round_trips() {
    let out = asnpe(&["print-effective-config"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let c = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(c.inference.batch, 32);
}

#[test]
fn resume_refuses_changed_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let config = ExperimentConfig::from_toml(&tiny_lg(&run, "[\"abc\"]", "[0]")).unwrap();
    let report = run_experiment(config.clone(), RunOptions::default()).unwrap();
    assert_eq!(report.complete.len(), 1);

    let again = resume_experiment(&run, RunOptions::default()).unwrap();
    assert!(again.already_complete);
    assert_eq!(asnpe(&["resume", run.to_str().unwrap()]).status.code(), Some(0));

    // A second `run` into the same directory is a configuration error.
    assert_eq!(run_experiment(config, RunOptions::default()).unwrap_err().exit_code(), 1);

    let snapshot = run.join("config.toml");
    let original = std::fs::read_to_string(&snapshot).unwrap();
    std::fs::write(&snapshot, original.replace("posterior_samples = 100", "posterior_samples = 101")).unwrap();
    assert_eq!(resume_experiment(&run, RunOptions::default()).unwrap_err().exit_code(), 3);
    assert_eq!(asnpe(&["resume", run.to_str().unwrap()]).status.code(), Some(3));
    std::fs::write(&snapshot, &original).unwrap();
    assert!(resume_experiment(&run, RunOptions::default()).is_ok());

    let manifest_path = run.join(MANIFEST_FILE);
    let mut manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
    manifest.schema_digest = "0".repeat(64);
    std::fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();
    assert_eq!(resume_experiment(&run, RunOptions::default()).unwrap_err().exit_code(), 3);
}

#[test]
fn every_method_spends_exactly_the_budget_on_toy_od() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("od");
    let text = format!(
        r#"output_dir = "{}"
methods = ["asnpe", "snpe", "abc", "spsa"]
seeds = [0]
metrics = ["rmsne"]
budget_cap = 128

[task]
kind = "toy_od"

[inference]
rounds = 4
proposal_pool = 64
batch = 32

[inference.acquisition]
num_weight_samples = 5

[inference.train]
max_epochs = 5

[inference.network]
num_transforms = 1
hidden_units = 8

[evaluation]
predictive_samples = 5
prior_rmsne_draws = 10
"#,
        run.display()
    );
    let config = ExperimentConfig::from_toml(&text).unwrap();
    let report = run_experiment(config, RunOptions::default()).unwrap();
    assert!(report.failed.is_empty(), "{:?}", report.failed);
    for m in [MethodKind::Asnpe, MethodKind::Snpe, MethodKind::Abc, MethodKind::Spsa] {
        let dir = cell_dir(&run, m, 0);
        let traj = read_trajectory(&dir.join(TRAJECTORY_FILE)).unwrap();
        assert_eq!(traj.len(), 128, "{m}");
        let sims: Vec<usize> = traj.iter().map(|r| r.simulation).collect();
        assert_eq!(sims, (1..=128).collect::<Vec<_>>(), "{m}");
        let last = read_metrics(&dir.join(METRICS_FILE)).unwrap().pop().unwrap();
        assert_eq!(last.simulator_calls, 128, "{m}");
        // best_rmsne never increases
        let best: Vec<f64> = traj.iter().filter_map(|r| r.best_rmsne).collect();
        assert!(best.windows(2).all(|w| w[1] <= w[0]), "{m}");
    }
}

#[test]
fn identical_runs_give_identical_summaries() {
    let tmp = tempfile::tempdir().unwrap();
    let mut summaries = Vec::new();
    for name in ["a", "b"] {
        let run = tmp.path().join(name);
        let config = ExperimentConfig::from_toml(&tiny_lg(&run, "[\"asnpe\", \"abc\"]", "[3]")).unwrap();
        run_experiment(config, RunOptions::default()).unwrap();
        summaries.push(std::fs::read_to_string(run.join(SUMMARY_FILE)).unwrap());
    }
    assert_eq!(summaries[0], summaries[1]);
}

#[test]
fn summary_matches_per_seed_finals() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let config = ExperimentConfig::from_toml(&tiny_lg(&run, "[\"abc\"]", "[0, 1, 2, 3, 4]")).unwrap();
    run_experiment(config, RunOptions::default()).unwrap();
    let summary = read_summary(&run.join(SUMMARY_FILE)).unwrap();
    for metric in ["mmd", "mean_err"] {
        let finals: Vec<f64> = (0..5)
            .map(|s| {
                let rows = read_metrics(&cell_dir(&run, MethodKind::Abc, s).join(METRICS_FILE)).unwrap();
                rows.last().unwrap().score(metric).unwrap()
            })
            .collect();
        let mean = finals.iter().sum::<f64>() / 5.0;
        let sd = (finals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0).sqrt();
        let row = summary.iter().find(|r| r.method == "abc" && r.metric == metric).unwrap();
        assert_eq!(row.n, 5);
        assert!((row.mean.unwrap() - mean).abs() < 1e-12);
        assert!((row.sd.unwrap() - sd).abs() < 1e-12);
        assert!(row.failed_seeds.is_empty());
    }
}

#[test]
fn plots_are_reproducible_and_span_the_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let config = ExperimentConfig::from_toml(&tiny_lg(&run, "[\"abc\", \"snpe\"]", "[0]")).unwrap();
    run_experiment(config, RunOptions::default()).unwrap();
    let written = emit_plots(&run).unwrap();
    assert!(written.iter().all(|p| p.extension().unwrap() == "svg" && p.exists()));
    let band_path = run.join("plots").join("mmd_vs_simulations.csv");
    let first = std::fs::read_to_string(&band_path).unwrap();
    let bands = read_band(&band_path).unwrap();
    assert!(!bands.is_empty());
    for b in &bands {
        // one seed: no spread to bootstrap
        assert_eq!(b.n, 1);
        assert_eq!(b.lower, b.mean);
        assert_eq!(b.upper, b.mean);
        assert!(b.x <= 32.0);
    }
    assert_eq!(bands.iter().map(|b| b.x).fold(0.0, f64::max), 32.0);

    let out = asnpe(&["plot", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&band_path).unwrap(), first);
}

#[test]
fn plot_on_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = asnpe(&["plot", tmp.path().to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn validate_simulator_round_trips_mock() {
    let out = asnpe(&[
        "validate-simulator",
        "--theta-dim",
        "2",
        "--x-dim",
        "2",
        "--",
        EXE,
        "mock-simulator",
        "--model",
        "echo",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("identical"));

    let out = asnpe(&[
        "validate-simulator",
        "--theta-dim",
        "2",
        "--x-dim",
        "3",
        "--",
        EXE,
        "mock-simulator",
        "--model",
        "echo",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn external_task_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("ext");
    let text = format!(
        r#"output_dir = "{}"
methods = ["snpe", "abc"]
seeds = [0]
metrics = ["rmsne", "median_dist"]

[task]
kind = "external"
true_theta = [1.0, 2.0]

[task.simulator]
command = ["{EXE}", "mock-simulator", "--model", "linear-gaussian"]
theta_dim = 2
x_dim = 2
timeout_s = 30.0

[task.prior]
kind = "factorized"
marginals = [{{ kind = "uniform", low = 0.0, high = 4.0 }}, {{ kind = "uniform", low = 0.0, high = 4.0 }}]

[inference]
rounds = 2
proposal_pool = 32
batch = 16

[inference.acquisition]
num_weight_samples = 5

[inference.train]
max_epochs = 10

[inference.network]
num_transforms = 1
hidden_units = 8

[evaluation]
predictive_samples = 10
prior_rmsne_draws = 10
"#,
        run.display()
    );
    let path = write_config(tmp.path(), &text);
    let out = asnpe(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_summary(&run.join(SUMMARY_FILE)).unwrap();
    for m in ["snpe", "abc"] {
        let row = summary.iter().find(|r| r.method == m && r.metric == "rmsne").unwrap();
        assert_eq!(row.n, 1);
        assert!(row.mean.unwrap().is_finite());
    }
}

proptest! {
    #[test]
    fn bootstrap_band_brackets_the_mean(values in prop::collection::vec(-10.0f64..10.0, 1..20), s in any::<u64>()) {
        let mut rng = seed::rng_from(s);
        let b = bootstrap_band(&values, 200, &mut rng);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(b.lower <= b.upper);
        prop_assert!(lo - 1e-12 <= b.lower && b.upper <= hi + 1e-12);
        prop_assert!(b.mean >= lo - 1e-12 && b.mean <= hi + 1e-12);
        let mut again = seed::rng_from(s);
        prop_assert_eq!(bootstrap_band(&values, 200, &mut again), b);
    }

    #[test]
    fn constant_values_collapse_the_band(v in -5.0f64..5.0, n in 1usize..10) {
        let mut rng = seed::rng_from(1);
        let b = bootstrap_band(&vec![v; n], 100, &mut rng);
        prop_assert!((b.lower - v).abs() < 1e-12 && (b.upper - v).abs() < 1e-12);
    }
}
