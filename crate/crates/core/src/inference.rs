//! Round-based sequential inference: active (acquisition-filtered) and plain
//! sequential neural posterior estimation, plus ABC and SPSA baselines.
//!
//! Each round draws `N` candidates from the current proposal (the prior in the
//! first round, afterwards the flow's posterior at `x_o` truncated to the prior
//! support), simulates `B` of them, appends the pairs to the dataset and
//! retrains the flow. The active variant simulates the `B` highest-scoring
//! candidates; the plain variant simulates the first `B` draws. The first round
//! takes the first `B` draws in both variants, so they share their initial data.

mod baselines;

use std::collections::BTreeMap;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::acquisition::{self, AcquisitionConfig, ScoredCandidate};
use crate::error::{check_dim, Error, Result};
use crate::flow::{Flow, FlowCheckpoint, FlowConfig, PermutationScheme, Standardization, WeightSample};
use crate::prior::PriorSpec;
use crate::seed::{self, Rng, Stream};
use crate::simulators::{SimulationError, TaskSpec};
use crate::training::{self, LossKind, Pair, RoundDataset, TrainConfig};

pub use baselines::{
    run_rejection_abc, run_spsa, spsa_minimize, AbcOutput, SpsaGains, SpsaOutput, SpsaStep,
};

pub const RUN_STATE_VERSION: u32 = 1;
pub const ROUND_RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Asnpe,
    Snpe,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Asnpe => "asnpe",
            Method::Snpe => "snpe",
        })
    }
}

/// Flow architecture; the dimensions come from the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub num_transforms: usize,
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub dropout_rate: f64,
    pub permutation: PermutationScheme,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let f = FlowConfig::default();
        NetworkConfig {
            num_transforms: f.num_transforms,
            hidden_units: f.hidden_units,
            hidden_layers: f.hidden_layers,
            dropout_rate: f.dropout_rate,
            permutation: f.permutation.clone(),
        }
    }
}

impl NetworkConfig {
    pub fn flow_config(&self, theta_dim: usize, context_dim: usize) -> FlowConfig {
        FlowConfig {
            theta_dim,
            context_dim,
            num_transforms: self.num_transforms,
            hidden_units: self.hidden_units,
            hidden_layers: self.hidden_layers,
            dropout_rate: self.dropout_rate,
            permutation: self.permutation.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub rounds: usize,
    /// Proposal draws per round (N).
    pub proposal_pool: usize,
    /// Simulations per round (B).
    pub batch: usize,
    pub acquisition: AcquisitionConfig,
    pub train: TrainConfig,
    pub network: NetworkConfig,
    pub seed: u64,
    /// Concurrent simulator calls.
    pub workers: usize,
    /// Hard limit on simulator calls, replacements included.
    pub budget_cap: Option<usize>,
    /// Draw budget of the truncated proposal sampler.
    pub max_proposal_draws: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            rounds: 4,
            proposal_pool: 256,
            batch: 32,
            acquisition: AcquisitionConfig::default(),
            train: TrainConfig::default(),
            network: NetworkConfig::default(),
            seed: 0,
            workers: 4,
            budget_cap: None,
            max_proposal_draws: 1_000_000,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.batch == 0 || self.batch > self.proposal_pool {
            return bad(format!(
                "batch ({}) must lie in 1..=proposal_pool ({})",
                self.batch, self.proposal_pool
            ));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.max_proposal_draws < self.proposal_pool {
            return bad("max_proposal_draws is smaller than the proposal pool".into());
        }
        self.acquisition.validate()?;
        self.train.validate()?;
        self.network.flow_config(1, 1).validate()
    }

    /// Simulator calls of a complete run without failures.
    pub fn nominal_budget(&self) -> usize {
        self.rounds * self.batch
    }
}

/// Candidates drawn from a (possibly truncated) proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub thetas: Vec<Vec<f64>>,
    /// Unnormalized log proposal densities (the truncation constant is dropped).
    pub log_densities: Vec<f64>,
    pub drawn: usize,
}

impl Proposal {
    pub fn acceptance_rate(&self) -> f64 {
        self.thetas.len() as f64 / self.drawn.max(1) as f64
    }
}

/// Draw `n` prior samples.
pub fn propose_from_prior(prior: &PriorSpec, n: usize, rng: &mut Rng) -> Proposal {
    let thetas = prior.sample_n(n, rng);
    let log_densities = thetas.iter().map(|t| prior.log_density(t)).collect();
    Proposal {
        thetas,
        log_densities,
        drawn: n,
    }
}

/// Rejection-sample `n` draws of `q(θ | x_o)` under `phi` that fall inside the
/// prior support. Fails when fewer than `n` are accepted within `max_draws`
/// draws, i.e. when the posterior has mostly left the support.
pub fn propose(
    flow: &Flow,
    phi: &WeightSample,
    x_o: &[f64],
    prior: &PriorSpec,
    n: usize,
    max_draws: usize,
    rng: &mut Rng,
) -> Result<Proposal> {
    let mut thetas = Vec::with_capacity(n);
    let mut drawn = 0usize;
    while thetas.len() < n {
        if drawn >= max_draws {
            return Err(Error::ProposalEscaped {
                accepted: thetas.len(),
                drawn,
            });
        }
        let chunk = (2 * (n - thetas.len())).max(256).min(max_draws - drawn);
        // Draws past the n-th acceptance do not count towards the rate.
        for t in flow.sample(chunk, x_o, phi, rng)? {
            drawn += 1;
            if t.iter().all(|v| v.is_finite()) && prior.in_support(&t) {
                thetas.push(t);
                if thetas.len() == n {
                    break;
                }
            }
        }
    }
    let log_densities = flow.log_prob_each(&thetas, x_o, phi)?;
    Ok(Proposal {
        thetas,
        log_densities,
        drawn,
    })
}

/// Draws from the trained posterior at `x_o` (mean network, truncated to the prior support).
pub fn posterior_samples(
    flow: &Flow,
    x_o: &[f64],
    prior: &PriorSpec,
    n: usize,
    config: &InferenceConfig,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>> {
    let phi = flow.mean_weights();
    Ok(propose(flow, &phi, x_o, prior, n, config.max_proposal_draws, rng)?.thetas)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedSimulation {
    pub candidate: usize,
    pub theta: Vec<f64>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub loss: LossKind,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
}

/// Everything that happened in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub schema_version: u32,
    pub round: usize,
    pub method: Method,
    /// Proposal-draw positions of the simulated candidates, in simulation order.
    pub candidates: Vec<usize>,
    pub selected: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub failures: Vec<FailedSimulation>,
    pub replacements: usize,
    pub simulator_calls: usize,
    pub total_simulator_calls: usize,
    pub dataset_size: usize,
    pub proposal_acceptance: f64,
    pub training: TrainingSummary,
    pub wallclock_proposal_s: f64,
    pub wallclock_acquisition_s: f64,
    pub wallclock_sim_s: f64,
    pub wallclock_train_s: f64,
    /// Set by callers that persist the flow after the round.
    pub checkpoint: Option<String>,
    /// Metric snapshot filled in by the caller.
    pub metrics: BTreeMap<String, f64>,
}

/// Serializable progress of a run: enough to continue it bit for bit, since
/// every random stream is derived from the seed and the round index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub schema_version: u32,
    pub method: Method,
    pub next_round: usize,
    pub dataset: RoundDataset,
    pub records: Vec<RoundRecord>,
    pub simulator_calls: usize,
    pub flow: Option<FlowCheckpoint>,
}

/// What a round step hands back besides the record.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub record: RoundRecord,
    /// Scored candidates in draw order (active rounds after the first only).
    pub scored: Option<Vec<ScoredCandidate>>,
}

/// Step-wise runner for [`Method::Asnpe`] and [`Method::Snpe`].
pub struct Runner<'a> {
    task: &'a TaskSpec,
    x_o: Vec<f64>,
    method: Method,
    config: InferenceConfig,
    dataset: RoundDataset,
    records: Vec<RoundRecord>,
    flow: Option<Flow>,
    next_round: usize,
    simulator_calls: usize,
}

impl<'a> Runner<'a> {
    pub fn new(task: &'a TaskSpec, x_o: &[f64], method: Method, config: InferenceConfig) -> Result<Self> {
        config.validate()?;
        check_dim("observation", task.x_dim(), x_o.len())?;
        check_dim("prior", task.theta_dim(), task.prior.dim())?;
        if x_o.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation".into()));
        }
        Ok(Runner {
            task,
            x_o: x_o.to_vec(),
            method,
            config,
            dataset: RoundDataset::new(),
            records: Vec::new(),
            flow: None,
            next_round: 0,
            simulator_calls: 0,
        })
    }

    /// Continue from a saved state.
    pub fn resume(task: &'a TaskSpec, x_o: &[f64], config: InferenceConfig, state: RunState) -> Result<Self> {
        if state.schema_version != RUN_STATE_VERSION {
            return Err(Error::SchemaVersion {
                what: "run state",
                found: state.schema_version,
                expected: RUN_STATE_VERSION,
            });
        }
        let mut runner = Runner::new(task, x_o, state.method, config)?;
        runner.flow = state.flow.map(FlowCheckpoint::into_flow).transpose()?;
        runner.dataset = state.dataset;
        runner.records = state.records;
        runner.next_round = state.next_round;
        runner.simulator_calls = state.simulator_calls;
        Ok(runner)
    }

    pub fn state(&self) -> RunState {
        RunState {
            schema_version: RUN_STATE_VERSION,
            method: self.method,
            next_round: self.next_round,
            dataset: self.dataset.clone(),
            records: self.records.clone(),
            simulator_calls: self.simulator_calls,
            flow: self.flow.as_ref().map(FlowCheckpoint::from_flow),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.next_round >= self.config.rounds
    }

    pub fn next_round(&self) -> usize {
        self.next_round
    }

    pub fn flow(&self) -> Option<&Flow> {
        self.flow.as_ref()
    }

    pub fn dataset(&self) -> &RoundDataset {
        &self.dataset
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    /// Mutable access to the latest record, e.g. to attach metrics.
    pub fn last_record_mut(&mut self) -> Option<&mut RoundRecord> {
        self.records.last_mut()
    }

    pub fn simulator_calls(&self) -> usize {
        self.simulator_calls
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.config
    }

    pub fn x_o(&self) -> &[f64] {
        &self.x_o
    }

    pub fn task(&self) -> &TaskSpec {
        self.task
    }

    fn calls_left(&self) -> usize {
        self.config
            .budget_cap
            .map_or(usize::MAX, |cap| cap.saturating_sub(self.simulator_calls))
    }

    /// Run the next round. Returns `None` once every round is done.
    pub fn step(&mut self) -> Result<Option<RoundOutcome>> {
        if self.is_finished() {
            return Ok(None);
        }
        let r = self.next_round;
        let cfg = &self.config;
        let prior = &self.task.prior;

        let t0 = Instant::now();
        let mut prop_rng = seed::stream_rng(cfg.seed, Stream::Proposal, r as u64);
        let proposal = match &self.flow {
            None => propose_from_prior(prior, cfg.proposal_pool, &mut prop_rng),
            Some(flow) => propose(
                flow,
                &flow.mean_weights(),
                &self.x_o,
                prior,
                cfg.proposal_pool,
                cfg.max_proposal_draws,
                &mut prop_rng,
            )?,
        };
        let wallclock_proposal_s = t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let (order, scored) = match (&self.flow, self.method) {
            (Some(flow), Method::Asnpe) => {
                let phis = flow.weight_samples(
                    cfg.acquisition.num_weight_samples,
                    seed::stream_seed(cfg.seed, Stream::Acquisition, r as u64),
                )?;
                let scored = acquisition::score_candidates(
                    flow,
                    &proposal.thetas,
                    &proposal.log_densities,
                    &self.x_o,
                    &phis,
                    &cfg.acquisition,
                )?;
                (acquisition::ranking(&scored, cfg.batch)?, Some(scored))
            }
            _ => ((0..proposal.thetas.len()).collect(), None),
        };
        let wallclock_acquisition_s = t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let sim_seed = seed::stream_seed(cfg.seed, Stream::Simulation, r as u64);
        let mut accepted: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut failures = Vec::new();
        let mut calls = 0usize;
        let mut cursor = 0usize;
        let mut replacements = 0usize;
        while accepted.len() < cfg.batch && cursor < order.len() {
            let want = (cfg.batch - accepted.len())
                .min(order.len() - cursor)
                .min(self.calls_left() - calls.min(self.calls_left()));
            if want == 0 {
                warn!("round {r}: simulation budget exhausted with {} pairs", accepted.len());
                break;
            }
            if cursor >= cfg.batch {
                replacements += want;
            }
            let picks = &order[cursor..cursor + want];
            cursor += want;
            let thetas: Vec<Vec<f64>> = picks.iter().map(|&i| proposal.thetas[i].clone()).collect();
            let seeds: Vec<u64> = picks.iter().map(|&i| seed::derive(sim_seed, i as u64)).collect();
            let results = self.task.simulator.simulate_batch(&thetas, &seeds, cfg.workers);
            calls += want;
            for ((&i, theta), result) in picks.iter().zip(thetas).zip(results) {
                let result = result.and_then(|x| {
                    if x.len() != self.x_o.len() {
                        Err(SimulationError::Malformed(format!("output has dimension {}", x.len())))
                    } else if x.iter().any(|v| !v.is_finite()) {
                        Err(SimulationError::Malformed("non-finite output".into()))
                    } else {
                        Ok(x)
                    }
                });
                match result {
                    Ok(x) => accepted.push((i, x)),
                    Err(e) => {
                        warn!("round {r}: simulation of candidate {i} failed: {e}");
                        failures.push(FailedSimulation {
                            candidate: i,
                            theta,
                            error: e.to_string(),
                        });
                    }
                }
            }
        }
        if accepted.len() < cfg.batch {
            warn!("round {r}: only {} of {} simulations succeeded", accepted.len(), cfg.batch);
        }
        self.simulator_calls += calls;
        let wallclock_sim_s = t0.elapsed().as_secs_f64();

        for (i, x) in &accepted {
            let theta = proposal.thetas[*i].clone();
            self.dataset.push(Pair {
                prior_log_density: prior.log_density(&theta),
                proposal_log_density: proposal.log_densities[*i],
                theta,
                x: x.clone(),
                round: r,
            })?;
        }

        let t0 = Instant::now();
        if self.flow.is_none() {
            let mut flow = Flow::new(
                cfg.network.flow_config(self.task.theta_dim(), self.task.x_dim()),
                seed::stream_seed(cfg.seed, Stream::Init, 0),
            )?;
            flow.set_standardization(Standardization::fit(&self.dataset.thetas(), &self.dataset.xs()))?;
            self.flow = Some(flow);
        }
        let train_cfg = TrainConfig {
            seed: seed::stream_seed(cfg.seed, Stream::Training, r as u64),
            ..cfg.train.clone()
        };
        let flow = self.flow.as_mut().expect("flow created above");
        let log = training::train_round(flow, &self.dataset, &train_cfg)?;
        let wallclock_train_s = t0.elapsed().as_secs_f64();
        info!(
            "{} round {r}: {} pairs, {} epochs, val loss {:.4}",
            self.method,
            self.dataset.len(),
            log.epochs.len(),
            log.best_val_loss
        );

        let record = RoundRecord {
            schema_version: ROUND_RECORD_VERSION,
            round: r,
            method: self.method,
            candidates: accepted.iter().map(|(i, _)| *i).collect(),
            selected: accepted.iter().map(|(i, _)| proposal.thetas[*i].clone()).collect(),
            outputs: accepted.into_iter().map(|(_, x)| x).collect(),
            failures,
            replacements,
            simulator_calls: calls,
            total_simulator_calls: self.simulator_calls,
            dataset_size: self.dataset.len(),
            proposal_acceptance: proposal.acceptance_rate(),
            training: TrainingSummary {
                loss: log.loss,
                epochs: log.epochs.len(),
                best_epoch: log.best_epoch,
                initial_val_loss: log.initial_val_loss,
                best_val_loss: log.best_val_loss,
            },
            wallclock_proposal_s,
            wallclock_acquisition_s,
            wallclock_sim_s,
            wallclock_train_s,
            checkpoint: None,
            metrics: BTreeMap::new(),
        };
        self.records.push(record.clone());
        self.next_round += 1;
        Ok(Some(RoundOutcome { record, scored }))
    }

    /// Run every remaining round.
    pub fn run_to_end(mut self) -> Result<RunOutput> {
        while self.step()?.is_some() {}
        Ok(RunOutput {
            flow: self.flow.expect("at least one round ran"),
            records: self.records,
            dataset: self.dataset,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub flow: Flow,
    pub records: Vec<RoundRecord>,
    pub dataset: RoundDataset,
}

/// Active sequential inference: simulate the top-B candidates by acquisition score.
pub fn run_asnpe(task: &TaskSpec, x_o: &[f64], config: &InferenceConfig) -> Result<RunOutput> {
    Runner::new(task, x_o, Method::Asnpe, config.clone())?.run_to_end()
}

/// Plain sequential inference: simulate the first B proposal draws.
pub fn run_snpe(task: &TaskSpec, x_o: &[f64], config: &InferenceConfig) -> Result<RunOutput> {
    Runner::new(task, x_o, Method::Snpe, config.clone())?.run_to_end()
}
