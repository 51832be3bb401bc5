use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use anyhow::{anyhow, Context};
use asnpe::acquisition::write_acquisition_csv;
use asnpe::csvio;
use asnpe::flow::{Flow, FlowCheckpoint};
use asnpe::inference::{self, InferenceConfig, Method, RoundRecord, RunState, Runner};
use asnpe::metrics::{c2st, median_l2_distance, mmd, posterior_mean_error, rmsne};
use asnpe::prior::{Marginal, PriorSpec};
use asnpe::seed::{self, Stream};
use asnpe::simulators::{column_mean, SimResult, Simulator, TaskSpec};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, MethodKind, MetricKind, TaskConfig};
use crate::CliError;

pub const MANIFEST_VERSION: u32 = 1;
pub const METRICS_VERSION: u32 = 1;
pub const TRAJECTORY_VERSION: u32 = 1;
pub const SUMMARY_VERSION: u32 = 1;
pub const CELL_STATUS_VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
const STATE_FILE: &str = "state.json";
const STATUS_FILE: &str = "status.json";

pub const METRICS_HEADER: &[&str] = &[
    "round",
    "dataset_size",
    "simulator_calls",
    "rmsne",
    "rmsne_pp",
    "c2st",
    "mmd",
    "median_dist",
    "mean_err",
    "wallclock_sim_s",
    "wallclock_train_s",
    "elapsed_s",
    "config_digest",
];

/// Columns that hold scores, in file order.
pub const SCORE_COLUMNS: &[&str] = &["rmsne", "rmsne_pp", "c2st", "mmd", "median_dist", "mean_err"];

/// Columns that measure time and so differ between otherwise identical runs.
pub const WALLCLOCK_COLUMNS: &[&str] = &["wallclock_sim_s", "wallclock_train_s", "elapsed_s"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub dataset_size: usize,
    pub simulator_calls: usize,
    pub rmsne: Option<f64>,
    pub rmsne_pp: Option<f64>,
    pub c2st: Option<f64>,
    pub mmd: Option<f64>,
    pub median_dist: Option<f64>,
    pub mean_err: Option<f64>,
    pub wallclock_sim_s: f64,
    pub wallclock_train_s: f64,
    /// Time since the cell started, scoring excluded.
    pub elapsed_s: f64,
    pub config_digest: String,
}

impl MetricsRow {
    pub fn score(&self, column: &str) -> Option<f64> {
        match column {
            "rmsne" => self.rmsne,
            "rmsne_pp" => self.rmsne_pp,
            "c2st" => self.c2st,
            "mmd" => self.mmd,
            "median_dist" => self.median_dist,
            "mean_err" => self.mean_err,
            _ => None,
        }
    }

    fn set_scores(&mut self, m: &BTreeMap<String, f64>) {
        let get = |k: &str| m.get(k).copied();
        self.rmsne = get("rmsne");
        self.rmsne_pp = get("rmsne_pp");
        self.c2st = get("c2st");
        self.mmd = get("mmd");
        self.median_dist = get("median_dist");
        self.mean_err = get("mean_err");
    }
}

pub const TRAJECTORY_HEADER: &[&str] = &["simulation", "round", "rmsne", "best_rmsne", "elapsed_s"];

/// One row per simulator call in budget order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub simulation: usize,
    pub round: usize,
    /// Empty for failed simulations.
    pub rmsne: Option<f64>,
    pub best_rmsne: Option<f64>,
    pub elapsed_s: f64,
}

pub const SUMMARY_HEADER: &[&str] = &["method", "metric", "n", "mean", "sd", "values", "failed_seeds"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub metric: String,
    pub n: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation over seeds.
    pub sd: Option<f64>,
    pub values: String,
    pub failed_seeds: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_digest: String,
    pub schema_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellState {
    Complete,
    Incomplete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStatus {
    pub schema_version: u32,
    pub method: MethodKind,
    pub seed: u64,
    pub state: CellState,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub complete: Vec<(MethodKind, u64)>,
    pub incomplete: Vec<(MethodKind, u64)>,
    pub failed: Vec<(MethodKind, u64, String)>,
    /// Resume found nothing left to do.
    pub already_complete: bool,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of every artifact schema version this binary reads and writes.
/// Digest of the configuration with `output_dir` blanked, so the same
/// experiment run in two places carries the same digest in its tables.
pub fn experiment_digest(config: &ExperimentConfig) -> anyhow::Result<String> {
    let mut c = config.clone();
    c.output_dir = PathBuf::new();
    Ok(sha256_hex(c.to_toml()?.as_bytes()))
}

pub fn schema_digest() -> String {
    let versions = [
        ("manifest", MANIFEST_VERSION),
        ("metrics", METRICS_VERSION),
        ("trajectory", TRAJECTORY_VERSION),
        ("summary", SUMMARY_VERSION),
        ("cell_status", CELL_STATUS_VERSION),
        ("run_state", inference::RUN_STATE_VERSION),
        ("round_record", inference::ROUND_RECORD_VERSION),
        ("flow_checkpoint", asnpe::flow::FLOW_CHECKPOINT_VERSION),
        ("acquisition_dump", asnpe::acquisition::ACQUISITION_DUMP_VERSION),
        ("od_scenario", asnpe::simulators::OD_SCENARIO_VERSION),
    ];
    let text: Vec<String> = versions.iter().map(|(k, v)| format!("{k}={v}")).collect();
    sha256_hex(text.join(";").as_bytes())
}

pub fn cell_dir(root: &Path, method: MethodKind, seed: u64) -> PathBuf {
    root.join("cells").join(format!("{method}_seed{seed}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

pub fn read_metrics(path: &Path) -> anyhow::Result<Vec<MetricsRow>> {
    Ok(csvio::read_rows(path, "metrics", METRICS_VERSION)?)
}

pub fn read_trajectory(path: &Path) -> anyhow::Result<Vec<TrajectoryRow>> {
    Ok(csvio::read_rows(path, "trajectory", TRAJECTORY_VERSION)?)
}

pub fn read_summary(path: &Path) -> anyhow::Result<Vec<SummaryRow>> {
    Ok(csvio::read_rows(path, "summary", SUMMARY_VERSION)?)
}

/// Reference posterior summary for one observation.
struct Reference {
    samples: Vec<Vec<f64>>,
    mean: Vec<f64>,
    sd: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Observation {
    key: u64,
    x_o: Vec<f64>,
}

/// Wraps a simulator and records when each call finished.
struct Timed<'a> {
    inner: &'a dyn Simulator,
    start: Instant,
    finished: Mutex<Vec<f64>>,
}

impl Simulator for Timed<'_> {
    fn theta_dim(&self) -> usize {
        self.inner.theta_dim()
    }
    fn x_dim(&self) -> usize {
        self.inner.x_dim()
    }
    fn simulate(&self, theta: &[f64], seed: u64) -> SimResult {
        let out = self.inner.simulate(theta, seed);
        self.finished.lock().unwrap().push(self.start.elapsed().as_secs_f64());
        out
    }
}

/// Stops sequential cells once this many rounds are done.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub stop_after_round: Option<usize>,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub digest: String,
    task: TaskSpec,
    references: Mutex<BTreeMap<u64, Arc<Reference>>>,
    rmsne_ok: bool,
}

impl Experiment {
    fn new(config: ExperimentConfig, dir: PathBuf, digest: String) -> anyhow::Result<Self> {
        let task = config.task.build()?;
        let mut exp = Experiment {
            config,
            dir,
            digest,
            task,
            references: Mutex::new(BTreeMap::new()),
            rmsne_ok: true,
        };
        let probe = exp.observation(exp.config.seeds[0])?;
        exp.rmsne_ok = rmsne(&probe.x_o, &probe.x_o).is_ok();
        if exp.wants(MetricKind::Rmsne) && !exp.rmsne_ok {
            warn!("observation sums to zero or less; RMSNE is undefined and skipped");
        }
        for m in &exp.config.metrics {
            if m.needs_reference() && exp.task.reference.is_none() {
                warn!("task {} has no reference posterior; {m:?} is skipped", exp.task.name);
            }
        }
        Ok(exp)
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    fn wants(&self, m: MetricKind) -> bool {
        self.config.metrics.contains(&m)
    }

    fn observation(&self, seed: u64) -> anyhow::Result<Observation> {
        let key = self.config.observation_seed.unwrap_or(seed);
        if let TaskConfig::External {
            observation: Some(x), ..
        } = &self.config.task
        {
            return Ok(Observation { key, x_o: x.clone() });
        }
        let obs = self.task.observation(key).context("simulating the observation")?;
        Ok(Observation { key, x_o: obs.x_o })
    }

    fn reference(&self, obs: &Observation) -> anyhow::Result<Arc<Reference>> {
        if let Some(r) = self.references.lock().unwrap().get(&obs.key) {
            return Ok(r.clone());
        }
        let n = self.config.evaluation.reference_samples;
        let out = self
            .task
            .reference_posterior(&obs.x_o, n, seed::stream_seed(obs.key, Stream::Reference, 0))?;
        if let Some(w) = &out.warning {
            warn!("reference posterior: {w}");
        }
        let mean = column_mean(&out.samples);
        let sd = (0..mean.len())
            .map(|k| {
                let v = out.samples.iter().map(|s| (s[k] - mean[k]).powi(2)).sum::<f64>();
                (v / (out.samples.len() as f64 - 1.0)).sqrt()
            })
            .collect();
        let r = Arc::new(Reference {
            samples: out.samples,
            mean,
            sd,
        });
        self.references.lock().unwrap().insert(obs.key, r.clone());
        Ok(r)
    }

    fn cell_inference_config(&self, seed: u64) -> InferenceConfig {
        InferenceConfig {
            seed,
            budget_cap: Some(self.config.budget()),
            ..self.config.inference.clone()
        }
    }

    /// Scores of a posterior sample set. Metric failures are logged and leave
    /// the metric out.
    fn score_samples(&self, samples: &[Vec<f64>], obs: &Observation, metrics_seed: u64) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        let eval = &self.config.evaluation;
        let mut put = |name: &str, v: asnpe::Result<f64>| match v {
            Ok(v) if v.is_finite() => {
                out.insert(name.to_string(), v);
            }
            Ok(v) => warn!("{name} is {v}; left out"),
            Err(e) => warn!("{name} failed: {e}"),
        };
        if samples.is_empty() {
            return BTreeMap::new();
        }
        let wants_reference = self.config.metrics.iter().any(|m| m.needs_reference());
        if wants_reference && self.task.reference.is_some() {
            match self.reference(obs) {
                Ok(reference) => {
                    let post = &samples[..samples.len().min(eval.posterior_samples)];
                    if self.wants(MetricKind::C2st) {
                        let k = post.len().min(reference.samples.len());
                        put(
                            "c2st",
                            c2st(&post[..k], &reference.samples[..k], &eval.c2st, seed::derive(metrics_seed, 1)),
                        );
                    }
                    if self.wants(MetricKind::Mmd) {
                        put("mmd", mmd(post, &reference.samples).map(|m| m.value));
                    }
                    if self.wants(MetricKind::MeanErr) {
                        put("mean_err", posterior_mean_error(post, &reference.mean, &reference.sd));
                    }
                }
                Err(e) => warn!("reference posterior failed: {e}"),
            }
        }
        let wants_pp = self.wants(MetricKind::MedianDist) || (self.wants(MetricKind::Rmsne) && self.rmsne_ok);
        let k = samples.len().min(eval.predictive_samples);
        if wants_pp && k > 0 {
            let sim_seed = seed::derive(metrics_seed, 2);
            let seeds: Vec<u64> = (0..k as u64).map(|i| seed::derive(sim_seed, i)).collect();
            let results = self
                .task
                .simulator
                .simulate_batch(&samples[..k], &seeds, self.config.inference.workers);
            let outputs: Vec<&[f64]> = results
                .iter()
                .filter_map(|r| r.as_deref().ok())
                .filter(|x| x.len() == obs.x_o.len() && x.iter().all(|v| v.is_finite()))
                .collect();
            if outputs.len() < k {
                warn!("{} of {k} posterior predictive simulations failed", k - outputs.len());
            }
            if self.wants(MetricKind::MedianDist) {
                put("median_dist", median_l2_distance(&outputs, &obs.x_o));
            }
            if self.wants(MetricKind::Rmsne) && self.rmsne_ok && !outputs.is_empty() {
                let total: f64 = outputs.iter().map(|x| rmsne(x, &obs.x_o).unwrap_or(f64::NAN)).sum();
                put("rmsne_pp", Ok(total / outputs.len() as f64));
            }
        }
        out
    }

    fn score_flow(&self, flow: &Flow, obs: &Observation, seed: u64, round: usize) -> BTreeMap<String, f64> {
        let eval = &self.config.evaluation;
        let metrics_seed = seed::stream_seed(seed, Stream::Metrics, round as u64);
        let n = eval.posterior_samples.max(eval.predictive_samples);
        let mut rng = seed::rng_from(seed::derive(metrics_seed, 0));
        match inference::posterior_samples(flow, &obs.x_o, &self.task.prior, n, &self.config.inference, &mut rng) {
            Ok(samples) => self.score_samples(&samples, obs, metrics_seed),
            Err(e) => {
                warn!("posterior sampling for metrics failed: {e}");
                BTreeMap::new()
            }
        }
    }

    fn rmsne_of(&self, x: &[f64], obs: &Observation) -> Option<f64> {
        if !(self.rmsne_ok && self.wants(MetricKind::Rmsne)) {
            return None;
        }
        rmsne(x, &obs.x_o).ok().filter(|v| v.is_finite())
    }

    fn write_status(&self, method: MethodKind, seed: u64, state: CellState, error: Option<String>) -> anyhow::Result<()> {
        let dir = cell_dir(&self.dir, method, seed);
        std::fs::create_dir_all(&dir)?;
        write_json(
            &dir.join(STATUS_FILE),
            &CellStatus {
                schema_version: CELL_STATUS_VERSION,
                method,
                seed,
                state,
                error,
            },
        )
    }

    fn cell_state(&self, method: MethodKind, seed: u64) -> Option<CellState> {
        let path = cell_dir(&self.dir, method, seed).join(STATUS_FILE);
        read_json::<CellStatus>(&path).ok().map(|s| s.state)
    }

    fn run_cell(&self, method: MethodKind, seed: u64, opts: RunOptions) -> anyhow::Result<CellState> {
        let dir = cell_dir(&self.dir, method, seed);
        std::fs::create_dir_all(&dir)?;
        match method {
            MethodKind::Asnpe => self.run_sequential(Method::Asnpe, seed, &dir, opts),
            MethodKind::Snpe => self.run_sequential(Method::Snpe, seed, &dir, opts),
            MethodKind::Abc => self.run_abc(seed, &dir).map(|()| CellState::Complete),
            MethodKind::Spsa => self.run_spsa(seed, &dir).map(|()| CellState::Complete),
        }
    }

    fn run_sequential(&self, method: Method, seed: u64, dir: &Path, opts: RunOptions) -> anyhow::Result<CellState> {
        for sub in ["rounds", "checkpoints", "acquisition"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        let obs = self.observation(seed)?;
        let cfg = self.cell_inference_config(seed);
        let state_path = dir.join(STATE_FILE);
        let mut runner = if state_path.exists() {
            let state: RunState = read_json(&state_path)?;
            if state.method != method {
                return Err(anyhow!("{} holds a {} run", state_path.display(), state.method));
            }
            info!("{method} seed {seed}: resuming at round {}", state.next_round);
            Runner::resume(&self.task, &obs.x_o, cfg, state)?
        } else {
            Runner::new(&self.task, &obs.x_o, method, cfg)?
        };
        while !runner.is_finished() {
            if opts.stop_after_round.is_some_and(|k| runner.next_round() >= k) {
                return Ok(CellState::Incomplete);
            }
            let outcome = runner.step()?.expect("runner not finished");
            let r = outcome.record.round;
            if let Some(scored) = &outcome.scored {
                write_acquisition_csv(
                    &dir.join(format!("acquisition/round_{r:03}.csv")),
                    scored,
                    &outcome.record.candidates,
                )?;
            }
            let checkpoint = format!("checkpoints/round_{r:03}.json");
            let flow = runner.flow().expect("a round has run");
            FlowCheckpoint::from_flow(flow).save(&dir.join(&checkpoint))?;
            let mut scores = if self.config.evaluation.every_round || runner.is_finished() {
                self.score_flow(flow, &obs, seed, r)
            } else {
                BTreeMap::new()
            };
            let best = runner
                .records()
                .iter()
                .flat_map(|rec| &rec.outputs)
                .filter_map(|x| self.rmsne_of(x, &obs))
                .fold(f64::INFINITY, f64::min);
            if best.is_finite() {
                scores.insert("rmsne".into(), best);
            }
            let record = runner.last_record_mut().expect("a round has run");
            record.checkpoint = Some(checkpoint);
            record.metrics = scores;
            write_json(&dir.join(format!("rounds/round_{r:03}.json")), &*record)?;
            write_json(&state_path, &runner.state())?;
            self.write_sequential_tables(runner.records(), &obs, dir)?;
        }
        Ok(CellState::Complete)
    }

    fn write_sequential_tables(&self, records: &[RoundRecord], obs: &Observation, dir: &Path) -> anyhow::Result<()> {
        let mut rows = Vec::new();
        let mut trajectory = Vec::new();
        let (mut sim_s, mut train_s, mut elapsed) = (0.0, 0.0, 0.0);
        let mut best: Option<f64> = None;
        let mut calls = 0;
        for rec in records {
            sim_s += rec.wallclock_sim_s;
            train_s += rec.wallclock_train_s;
            let sims_done = elapsed + rec.wallclock_proposal_s + rec.wallclock_acquisition_s + rec.wallclock_sim_s;
            elapsed = sims_done + rec.wallclock_train_s;
            // Failed calls come first in the trajectory of a round; their order is not recorded.
            for _ in &rec.failures {
                calls += 1;
                trajectory.push(TrajectoryRow {
                    simulation: calls,
                    round: rec.round,
                    rmsne: None,
                    best_rmsne: best,
                    elapsed_s: sims_done,
                });
            }
            for x in &rec.outputs {
                calls += 1;
                let v = self.rmsne_of(x, obs);
                if let Some(v) = v {
                    best = Some(best.map_or(v, |b: f64| b.min(v)));
                }
                trajectory.push(TrajectoryRow {
                    simulation: calls,
                    round: rec.round,
                    rmsne: v,
                    best_rmsne: best,
                    elapsed_s: sims_done,
                });
            }
            let mut row = MetricsRow {
                round: rec.round,
                dataset_size: rec.dataset_size,
                simulator_calls: rec.total_simulator_calls,
                rmsne: None,
                rmsne_pp: None,
                c2st: None,
                mmd: None,
                median_dist: None,
                mean_err: None,
                wallclock_sim_s: sim_s,
                wallclock_train_s: train_s,
                elapsed_s: elapsed,
                config_digest: self.digest.clone(),
            };
            row.set_scores(&rec.metrics);
            rows.push(row);
        }
        csvio::write_rows(&dir.join(METRICS_FILE), "metrics", METRICS_VERSION, METRICS_HEADER, &rows)?;
        if self.wants(MetricKind::Rmsne) && self.rmsne_ok {
            csvio::write_rows(
                &dir.join(TRAJECTORY_FILE),
                "trajectory",
                TRAJECTORY_VERSION,
                TRAJECTORY_HEADER,
                &trajectory,
            )?;
        }
        Ok(())
    }

    /// Round boundaries for the single-shot baselines: every `batch` calls.
    fn checkpoints(&self, budget: usize) -> Vec<usize> {
        let step = self.config.inference.batch.max(1);
        let mut marks: Vec<usize> = (1..).map(|k| k * step).take_while(|&m| m <= budget).collect();
        if marks.last() != Some(&budget) {
            marks.push(budget);
        }
        marks
    }

    fn baseline_tables(
        &self,
        values: &[Option<f64>],
        times: &[f64],
        final_scores: BTreeMap<String, f64>,
        dir: &Path,
    ) -> anyhow::Result<()> {
        let marks = self.checkpoints(values.len());
        let mut trajectory = Vec::with_capacity(values.len());
        let mut best: Option<f64> = None;
        for (i, v) in values.iter().enumerate() {
            if let Some(v) = *v {
                best = Some(best.map_or(v, |b: f64| b.min(v)));
            }
            let round = marks.iter().position(|&m| i < m).unwrap_or(marks.len() - 1);
            trajectory.push(TrajectoryRow {
                simulation: i + 1,
                round,
                rmsne: *v,
                best_rmsne: best,
                elapsed_s: times[i],
            });
        }
        let rows: Vec<MetricsRow> = marks
            .iter()
            .enumerate()
            .map(|(round, &m)| {
                let mut row = MetricsRow {
                    round,
                    dataset_size: m,
                    simulator_calls: m,
                    rmsne: trajectory[m - 1].best_rmsne,
                    rmsne_pp: None,
                    c2st: None,
                    mmd: None,
                    median_dist: None,
                    mean_err: None,
                    wallclock_sim_s: times[m - 1],
                    wallclock_train_s: 0.0,
                    elapsed_s: times[m - 1],
                    config_digest: self.digest.clone(),
                };
                if m == values.len() {
                    let rmsne = row.rmsne;
                    row.set_scores(&final_scores);
                    row.rmsne = rmsne;
                }
                row
            })
            .collect();
        csvio::write_rows(&dir.join(METRICS_FILE), "metrics", METRICS_VERSION, METRICS_HEADER, &rows)?;
        if self.wants(MetricKind::Rmsne) && self.rmsne_ok {
            csvio::write_rows(
                &dir.join(TRAJECTORY_FILE),
                "trajectory",
                TRAJECTORY_VERSION,
                TRAJECTORY_HEADER,
                &trajectory,
            )?;
        }
        Ok(())
    }

    fn run_abc(&self, seed: u64, dir: &Path) -> anyhow::Result<()> {
        let obs = self.observation(seed)?;
        let budget = self.config.budget();
        let start = Instant::now();
        let out = inference::run_rejection_abc(
            &self.task.prior,
            &*self.task.simulator,
            &obs.x_o,
            budget,
            self.config.abc.accept_quantile,
            seed::stream_seed(seed, Stream::Baseline, 0),
            self.config.inference.workers,
        )?;
        // The batch runs concurrently, so every call is stamped with the batch time.
        let done = start.elapsed().as_secs_f64();
        let values: Vec<Option<f64>> = out
            .outputs
            .iter()
            .map(|o| o.as_ref().and_then(|x| self.rmsne_of(x, &obs)))
            .collect();
        let scores = self.score_samples(&out.samples, &obs, seed::stream_seed(seed, Stream::Metrics, 0));
        let accepted: Vec<serde_json::Value> = out
            .accepted
            .iter()
            .map(|&i| serde_json::json!({"draw": i, "theta": out.thetas[i], "distance": out.distances[i]}))
            .collect();
        write_json(
            &dir.join("abc.json"),
            &serde_json::json!({"threshold": out.threshold, "accepted": accepted}),
        )?;
        self.baseline_tables(&values, &vec![done; budget], scores, dir)
    }

    fn spsa_start(&self) -> anyhow::Result<Vec<f64>> {
        if let Some(s) = &self.config.spsa.start {
            return Ok(s.clone());
        }
        if let TaskConfig::ToyOd {
            scenario,
            scenario_path,
        } = &self.config.task
        {
            let sc = match scenario_path {
                Some(p) => asnpe::simulators::OdScenario::load(p)?,
                None => asnpe::simulators::OdScenario::generate(scenario)?,
            };
            return Ok(sc.prior_estimate);
        }
        Ok(self.task.prior.mean())
    }

    fn run_spsa(&self, seed: u64, dir: &Path) -> anyhow::Result<()> {
        let obs = self.observation(seed)?;
        if !self.rmsne_ok {
            return Err(anyhow!("SPSA minimizes RMSNE, which is undefined for this observation"));
        }
        let budget = self.config.budget();
        let timed = Timed {
            inner: &*self.task.simulator,
            start: Instant::now(),
            finished: Mutex::new(Vec::with_capacity(budget)),
        };
        let project = self
            .config
            .spsa
            .project_nonnegative
            .unwrap_or_else(|| nonnegative_support(&self.task.prior));
        let out = inference::run_spsa(
            &timed,
            &obs.x_o,
            &self.spsa_start()?,
            budget / 2,
            &self.config.spsa.gains,
            project,
            seed::stream_seed(seed, Stream::Baseline, 1),
        )?;
        let times = timed.finished.into_inner().unwrap();
        let values: Vec<Option<f64>> = out.evaluations.iter().map(|e| e.value).collect();
        write_json(&dir.join("spsa.json"), &out)?;
        self.baseline_tables(&values, &times, BTreeMap::new(), dir)
    }

    /// Mean RMSNE over prior draws: the score of the starting prior.
    fn prior_rmsne(&self, seed: u64) -> anyhow::Result<Option<f64>> {
        if !(self.rmsne_ok && self.wants(MetricKind::Rmsne)) || self.config.evaluation.prior_rmsne_draws == 0 {
            return Ok(None);
        }
        let obs = self.observation(seed)?;
        let base = seed::stream_seed(seed, Stream::Baseline, 2);
        let n = self.config.evaluation.prior_rmsne_draws;
        let thetas = self.task.prior.sample_n(n, &mut seed::rng_from(seed::derive(base, 0)));
        let seeds: Vec<u64> = (0..n as u64).map(|i| seed::derive(seed::derive(base, 1), i)).collect();
        let vals: Vec<f64> = self
            .task
            .simulator
            .simulate_batch(&thetas, &seeds, self.config.inference.workers)
            .into_iter()
            .filter_map(|r| r.ok())
            .filter_map(|x| self.rmsne_of(&x, &obs))
            .collect();
        Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
    }

    fn cells(&self) -> Vec<(MethodKind, u64)> {
        let mut cells = Vec::new();
        for &m in &self.config.methods {
            for &s in &self.config.seeds {
                cells.push((m, s));
            }
        }
        cells
    }

    fn execute(&self, opts: RunOptions) -> RunReport {
        let todo: Vec<(MethodKind, u64)> = self
            .cells()
            .into_iter()
            .filter(|&(m, s)| self.cell_state(m, s) != Some(CellState::Complete))
            .collect();
        let run_one = |(m, s): (MethodKind, u64)| -> (MethodKind, u64, anyhow::Result<CellState>) {
            info!("cell {m} seed {s}: start");
            let result = self.run_cell(m, s, opts);
            let status = match &result {
                Ok(state) => self.write_status(m, s, *state, None),
                Err(e) => {
                    warn!("cell {m} seed {s} failed: {e:#}");
                    self.write_status(m, s, CellState::Failed, Some(format!("{e:#}")))
                }
            };
            if let Err(e) = status {
                warn!("cell {m} seed {s}: could not write status: {e:#}");
            }
            (m, s, result)
        };
        let results: Vec<_> = if self.config.parallel_cells {
            std::thread::scope(|scope| {
                let handles: Vec<_> = todo.iter().map(|&c| scope.spawn(move || run_one(c))).collect();
                handles.into_iter().map(|h| h.join().expect("cell thread panicked")).collect()
            })
        } else {
            todo.iter().map(|&c| run_one(c)).collect()
        };
        let mut report = RunReport::default();
        for (m, s, r) in results {
            match r {
                Ok(CellState::Complete) => report.complete.push((m, s)),
                Ok(CellState::Incomplete) => report.incomplete.push((m, s)),
                Ok(CellState::Failed) => unreachable!("cells report failure as errors"),
                Err(e) => report.failed.push((m, s, format!("{e:#}"))),
            }
        }
        report
    }

    /// Final-row scores per method over seeds; failed cells are listed.
    pub fn write_summary(&self) -> anyhow::Result<Vec<SummaryRow>> {
        let mut rows = Vec::new();
        let stats = |vals: &[f64]| -> (Option<f64>, Option<f64>) {
            let n = vals.len() as f64;
            if vals.is_empty() {
                return (None, None);
            }
            let mean = vals.iter().sum::<f64>() / n;
            let sd = (vals.len() > 1)
                .then(|| (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
            (Some(mean), sd)
        };
        let fmt = |vals: &[f64]| vals.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(";");
        for &method in &self.config.methods {
            let mut finals: Vec<MetricsRow> = Vec::new();
            let mut failed = Vec::new();
            for &s in &self.config.seeds {
                let dir = cell_dir(&self.dir, method, s);
                let last = (self.cell_state(method, s) == Some(CellState::Complete))
                    .then(|| read_metrics(&dir.join(METRICS_FILE)).ok())
                    .flatten()
                    .and_then(|rows| rows.last().cloned());
                match last {
                    Some(row) => finals.push(row),
                    None => failed.push(s.to_string()),
                }
            }
            for &col in SCORE_COLUMNS {
                let vals: Vec<f64> = finals.iter().filter_map(|r| r.score(col)).collect();
                if vals.is_empty() {
                    continue;
                }
                let (mean, sd) = stats(&vals);
                rows.push(SummaryRow {
                    method: method.to_string(),
                    metric: col.to_string(),
                    n: vals.len(),
                    mean,
                    sd,
                    values: fmt(&vals),
                    failed_seeds: failed.join(";"),
                });
            }
            if finals.is_empty() {
                rows.push(SummaryRow {
                    method: method.to_string(),
                    metric: "none".into(),
                    n: 0,
                    mean: None,
                    sd: None,
                    values: String::new(),
                    failed_seeds: failed.join(";"),
                });
            }
        }
        let mut prior = Vec::new();
        for &s in &self.config.seeds {
            if let Some(v) = self.prior_rmsne(s)? {
                prior.push(v);
            }
        }
        if !prior.is_empty() {
            let (mean, sd) = stats(&prior);
            rows.push(SummaryRow {
                method: "prior".into(),
                metric: "rmsne".into(),
                n: prior.len(),
                mean,
                sd,
                values: fmt(&prior),
                failed_seeds: String::new(),
            });
        }
        csvio::write_rows(
            &self.dir.join(SUMMARY_FILE),
            "summary",
            SUMMARY_VERSION,
            SUMMARY_HEADER,
            &rows,
        )?;
        Ok(rows)
    }
}

fn nonnegative_support(prior: &PriorSpec) -> bool {
    match prior {
        PriorSpec::Factorized { marginals } => marginals.iter().all(|m| match *m {
            Marginal::Uniform { low, .. } => low >= 0.0,
            Marginal::TruncatedNormal { lower, .. } => lower >= 0.0,
            Marginal::Normal { .. } => false,
        }),
        PriorSpec::Gaussian { .. } => false,
    }
}

fn finish(exp: &Experiment, opts: RunOptions) -> Result<RunReport, CliError> {
    let report = exp.execute(opts);
    if report.incomplete.is_empty() {
        exp.write_summary().map_err(CliError::Runtime)?;
    } else {
        info!(
            "stopped with {} unfinished cells; continue with `asnpe resume {}`",
            report.incomplete.len(),
            exp.dir.display()
        );
    }
    Ok(report)
}

/// Start a fresh experiment in `config.output_dir`.
pub fn run_experiment(config: ExperimentConfig, opts: RunOptions) -> Result<RunReport, CliError> {
    config.validate().map_err(CliError::Config)?;
    let dir = config.output_dir.clone();
    if dir.join(MANIFEST_FILE).exists() {
        return Err(CliError::Config(anyhow!(
            "{} already holds a run; use `resume` or pick another output_dir",
            dir.display()
        )));
    }
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(CliError::Runtime)?;
    let snapshot = config.to_toml().map_err(CliError::Config)?;
    let digest = sha256_hex(snapshot.as_bytes());
    let io = |r: anyhow::Result<()>| r.map_err(CliError::Runtime);
    io(std::fs::write(dir.join(CONFIG_FILE), &snapshot).map_err(Into::into))?;
    io(write_json(
        &dir.join(MANIFEST_FILE),
        &Manifest {
            schema_version: MANIFEST_VERSION,
            config_digest: digest.clone(),
            schema_digest: schema_digest(),
        },
    ))?;
    let digest = experiment_digest(&config).map_err(CliError::Config)?;
    let exp = Experiment::new(config, dir, digest).map_err(CliError::Runtime)?;
    finish(&exp, opts)
}

/// Continue the experiment stored in `dir`.
pub fn resume_experiment(dir: &Path, opts: RunOptions) -> Result<RunReport, CliError> {
    let refuse = |m: String| CliError::ResumeRefused(m);
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))
        .map_err(|e| refuse(format!("{} holds no run: {e:#}", dir.display())))?;
    if manifest.schema_version != MANIFEST_VERSION || manifest.schema_digest != schema_digest() {
        return Err(refuse(
            "the run was written with different artifact schema versions than this binary uses".into(),
        ));
    }
    let snapshot = std::fs::read_to_string(dir.join(CONFIG_FILE))
        .map_err(|e| refuse(format!("config snapshot unreadable: {e}")))?;
    let digest = sha256_hex(snapshot.as_bytes());
    if digest != manifest.config_digest {
        return Err(refuse("config snapshot does not match its recorded digest".into()));
    }
    let mut config = ExperimentConfig::from_toml(&snapshot).map_err(|e| refuse(format!("config snapshot: {e:#}")))?;
    config.output_dir = dir.to_path_buf();
    let digest = experiment_digest(&config).map_err(CliError::Runtime)?;
    let exp = Experiment::new(config, dir.to_path_buf(), digest).map_err(CliError::Runtime)?;
    let done = exp
        .cells()
        .iter()
        .all(|&(m, s)| exp.cell_state(m, s) == Some(CellState::Complete));
    if done && dir.join(SUMMARY_FILE).exists() {
        info!("{}: every cell is complete; nothing to do", dir.display());
        return Ok(RunReport {
            complete: exp.cells(),
            already_complete: true,
            ..RunReport::default()
        });
    }
    finish(&exp, opts)
}
