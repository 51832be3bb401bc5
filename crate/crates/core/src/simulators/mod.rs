//! Simulators: benchmark tasks with tractable likelihoods and reference
//! posteriors, the toy origin-destination task, and external processes.

mod external;
mod glm;
mod linear_gaussian;
pub mod mock;
pub mod mcmc;
mod mixture;
mod od;
mod slcp;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use external::{
    ExternalConfig, ExternalSimulator, Transcript, TranscriptEntry, TranscriptSimulator, PROTOCOL_VERSION,
};
pub use glm::BernoulliGlm;
pub use linear_gaussian::LinearGaussian;
pub use mcmc::{MetropolisConfig, MetropolisOutput};
pub use mixture::GaussianMixture;
pub use od::{make_prior_estimate, OdScenario, OdScenarioConfig, PriorEstimate, ToyOd, OD_SCENARIO_VERSION};
pub use slcp::Slcp;

use crate::error::Result;
use crate::prior::PriorSpec;
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulationError {
    #[error("simulator rejected input: {0}")]
    InvalidInput(String),
    #[error("simulator reported failure: {0}")]
    Failed(String),
    #[error("simulator did not answer within {0:?}")]
    Timeout(std::time::Duration),
    #[error("malformed simulator response: {0}")]
    Malformed(String),
    #[error("simulator process exited: {0}")]
    ChildExited(String),
    #[error("simulator i/o: {0}")]
    Io(String),
}

pub type SimResult = std::result::Result<Vec<f64>, SimulationError>;

/// A stochastic map θ → x. `simulate` must be a pure function of `(θ, seed)`.
pub trait Simulator: Send + Sync {
    fn theta_dim(&self) -> usize;
    fn x_dim(&self) -> usize;
    fn simulate(&self, theta: &[f64], seed: u64) -> SimResult;

    /// Simulate many θ, using up to `workers` threads. Results come back in input order.
    fn simulate_batch(&self, thetas: &[Vec<f64>], seeds: &[u64], workers: usize) -> Vec<SimResult> {
        assert_eq!(thetas.len(), seeds.len(), "one seed per θ");
        let workers = workers.clamp(1, thetas.len().max(1));
        if workers == 1 {
            return thetas.iter().zip(seeds).map(|(t, &s)| self.simulate(t, s)).collect();
        }
        let chunk = thetas.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = thetas
                .chunks(chunk)
                .zip(seeds.chunks(chunk))
                .map(|(ts, ss)| {
                    scope.spawn(move || {
                        ts.iter().zip(ss).map(|(t, &s)| self.simulate(t, s)).collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("simulation worker panicked"))
                .collect()
        })
    }
}

pub(crate) fn check_theta(theta: &[f64], dim: usize) -> std::result::Result<(), SimulationError> {
    if theta.len() != dim {
        return Err(SimulationError::InvalidInput(format!(
            "expected θ of dimension {dim}, got {}",
            theta.len()
        )));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(SimulationError::InvalidInput("θ has non-finite entries".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Analytic,
    GridImportance,
    Mcmc,
    None,
}

/// Reference posterior draws with diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSamples {
    pub samples: Vec<Vec<f64>>,
    pub kind: ReferenceKind,
    /// Set when an MCMC convergence check failed.
    pub warning: Option<String>,
    pub acceptance_rate: Option<f64>,
}

impl ReferenceSamples {
    pub fn mean(&self) -> Vec<f64> {
        column_mean(&self.samples)
    }

    pub fn std(&self) -> Vec<f64> {
        let mean = self.mean();
        let n = self.samples.len() as f64;
        (0..mean.len())
            .map(|j| {
                (self.samples.iter().map(|s| (s[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            })
            .collect()
    }
}

pub fn column_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

/// Ground-truth posterior sampler for a task.
pub trait ReferenceOracle: Send + Sync {
    fn kind(&self) -> ReferenceKind;
    fn sample_posterior(&self, x_o: &[f64], n: usize, seed: u64) -> Result<ReferenceSamples>;
}

/// Observed data with the parameter that generated it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub true_theta: Vec<f64>,
    pub x_o: Vec<f64>,
}

/// A complete inference problem: prior, simulator, reference oracle and the
/// recipe for the observation.
#[derive(Clone)]
pub struct TaskSpec {
    pub name: String,
    pub prior: PriorSpec,
    pub simulator: Arc<dyn Simulator>,
    pub reference: Option<Arc<dyn ReferenceOracle>>,
    /// Fixed ground truth; when absent the observation's θ is drawn from the prior.
    pub true_theta: Option<Vec<f64>>,
}

impl std::fmt::Debug for TaskSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskSpec")
            .field("name", &self.name)
            .field("theta_dim", &self.theta_dim())
            .field("x_dim", &self.x_dim())
            .field("reference", &self.reference_kind())
            .finish()
    }
}

impl TaskSpec {
    pub fn theta_dim(&self) -> usize {
        self.simulator.theta_dim()
    }

    pub fn x_dim(&self) -> usize {
        self.simulator.x_dim()
    }

    pub fn reference_kind(&self) -> ReferenceKind {
        self.reference.as_ref().map_or(ReferenceKind::None, |r| r.kind())
    }

    /// Ground-truth θ (fixed, or drawn from the prior) and one simulated `x_o`.
    pub fn observation(&self, seed: u64) -> Result<Observation> {
        let true_theta = match &self.true_theta {
            Some(t) => t.clone(),
            None => self.prior.sample(&mut seed::stream_rng(seed, Stream::Observation, 0)),
        };
        let x_o = self
            .simulator
            .simulate(&true_theta, seed::stream_seed(seed, Stream::Observation, 1))?;
        Ok(Observation { true_theta, x_o })
    }

    pub fn reference_posterior(&self, x_o: &[f64], n: usize, seed: u64) -> Result<ReferenceSamples> {
        let oracle = self.reference.as_ref().ok_or_else(|| {
            crate::Error::InvalidInput(format!("task {} has no reference posterior", self.name))
        })?;
        crate::error::check_dim("observation", self.x_dim(), x_o.len())?;
        oracle.sample_posterior(x_o, n, seed)
    }
}

pub fn task_linear_gaussian(d: usize) -> Result<TaskSpec> {
    let model = Arc::new(LinearGaussian::new(d)?);
    Ok(TaskSpec {
        name: format!("linear_gaussian_{d}"),
        prior: model.prior(),
        simulator: model.clone(),
        reference: Some(model),
        true_theta: None,
    })
}

pub fn task_gaussian_mixture() -> TaskSpec {
    let model = Arc::new(GaussianMixture::default());
    TaskSpec {
        name: "gaussian_mixture".into(),
        prior: model.prior(),
        simulator: model.clone(),
        reference: Some(model),
        true_theta: None,
    }
}

pub fn task_bernoulli_glm() -> TaskSpec {
    let model = Arc::new(BernoulliGlm::new());
    TaskSpec {
        name: "bernoulli_glm".into(),
        prior: model.prior(),
        simulator: model.clone(),
        reference: Some(model),
        true_theta: None,
    }
}

pub fn task_slcp(distractor_dims: usize) -> TaskSpec {
    let model = Arc::new(Slcp::new(distractor_dims));
    TaskSpec {
        name: format!("slcp_distractors_{distractor_dims}"),
        prior: model.prior(),
        simulator: model.clone(),
        reference: Some(model),
        true_theta: None,
    }
}

/// Toy OD calibration task. The observation is generated from the scenario's true demand.
pub fn task_toy_od(scenario: OdScenario) -> Result<TaskSpec> {
    let model = ToyOd::new(scenario)?;
    let prior = model.prior();
    let truth = model.scenario().true_demand.clone();
    Ok(TaskSpec {
        name: "toy_od".into(),
        prior,
        simulator: Arc::new(model),
        reference: None,
        true_theta: Some(truth),
    })
}

/// A task backed by an external simulator process; no reference posterior.
pub fn task_external(prior: PriorSpec, simulator: Arc<dyn Simulator>, name: &str) -> TaskSpec {
    TaskSpec {
        name: name.to_string(),
        prior,
        simulator,
        reference: None,
        true_theta: None,
    }
}
