use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use asnpe::inference::{InferenceConfig, SpsaGains};
use asnpe::metrics::C2stConfig;
use asnpe::prior::PriorSpec;
use asnpe::simulators::{
    task_bernoulli_glm, task_external, task_gaussian_mixture, task_linear_gaussian, task_slcp, task_toy_od,
    ExternalConfig, ExternalSimulator, OdScenario, OdScenarioConfig, TaskSpec,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Asnpe,
    Snpe,
    Abc,
    Spsa,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Asnpe => "asnpe",
            MethodKind::Snpe => "snpe",
            MethodKind::Abc => "abc",
            MethodKind::Spsa => "spsa",
        }
    }

    pub fn is_sequential(self) -> bool {
        matches!(self, MethodKind::Asnpe | MethodKind::Snpe)
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Best RMSNE over the budgeted simulations, plus the posterior-predictive mean.
    Rmsne,
    C2st,
    Mmd,
    MedianDist,
    MeanErr,
}

impl MetricKind {
    pub fn needs_reference(self) -> bool {
        matches!(self, MetricKind::C2st | MetricKind::Mmd | MetricKind::MeanErr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    LinearGaussian {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    GaussianMixture,
    BernoulliGlm,
    Slcp {
        #[serde(default)]
        distractors: usize,
    },
    ToyOd {
        /// Generated scenario; ignored when `scenario_path` is set.
        #[serde(default)]
        scenario: OdScenarioConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scenario_path: Option<PathBuf>,
    },
    External {
        simulator: ExternalConfig,
        prior: PriorSpec,
        /// Observed data. When absent it is simulated at `true_theta`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        observation: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        true_theta: Option<Vec<f64>>,
    },
}

fn default_dim() -> usize {
    2
}

impl TaskConfig {
    /// Build the task. External tasks spawn their child process here.
    pub fn build(&self) -> anyhow::Result<TaskSpec> {
        Ok(match self {
            TaskConfig::LinearGaussian { dim } => task_linear_gaussian(*dim)?,
            TaskConfig::GaussianMixture => task_gaussian_mixture(),
            TaskConfig::BernoulliGlm => task_bernoulli_glm(),
            TaskConfig::Slcp { distractors } => task_slcp(*distractors),
            TaskConfig::ToyOd { scenario, scenario_path } => {
                let scenario = match scenario_path {
                    Some(p) => OdScenario::load(p).with_context(|| format!("loading {}", p.display()))?,
                    None => OdScenario::generate(scenario)?,
                };
                task_toy_od(scenario)?
            }
            TaskConfig::External {
                simulator,
                prior,
                true_theta,
                ..
            } => {
                let sim = ExternalSimulator::new(simulator.clone())?;
                let mut task = task_external(prior.clone(), Arc::new(sim), "external");
                task.true_theta = true_theta.clone();
                task
            }
        })
    }

    fn validate(&self) -> anyhow::Result<()> {
        if let TaskConfig::External {
            simulator,
            prior,
            observation,
            true_theta,
        } = self
        {
            prior.validate()?;
            if prior.dim() != simulator.theta_dim {
                bail!("external prior has dimension {}, simulator expects {}", prior.dim(), simulator.theta_dim);
            }
            match (observation, true_theta) {
                (Some(x), _) if x.len() != simulator.x_dim => {
                    bail!("observation has dimension {}, simulator returns {}", x.len(), simulator.x_dim)
                }
                (None, None) => bail!("external task needs `observation` or `true_theta`"),
                _ => {}
            }
        }
        if let TaskConfig::LinearGaussian { dim: 0 } = self {
            bail!("linear_gaussian needs dim ≥ 1");
        }
        Ok(())
    }
}

/// Sample sizes used when scoring posteriors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Posterior draws compared against the reference (C2ST, MMD, mean error).
    pub posterior_samples: usize,
    pub reference_samples: usize,
    /// Posterior draws simulated for the median distance and predictive RMSNE.
    /// These simulations do not count against the budget.
    pub predictive_samples: usize,
    /// Prior draws simulated once per seed for the starting-prior RMSNE.
    pub prior_rmsne_draws: usize,
    /// Score the posterior after every round rather than only the last.
    pub every_round: bool,
    pub c2st: C2stConfig,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            posterior_samples: 1000,
            reference_samples: 1000,
            predictive_samples: 100,
            prior_rmsne_draws: 100,
            every_round: true,
            c2st: C2stConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbcConfig {
    pub accept_quantile: f64,
}

impl Default for AbcConfig {
    fn default() -> Self {
        AbcConfig { accept_quantile: 0.1 }
    }
}

/// Gains tuned by grid search on the toy OD task (Prior I).
pub fn od_spsa_gains() -> SpsaGains {
    SpsaGains {
        a: 2000.0,
        c: 3.0,
        big_a: 10.0,
        ..SpsaGains::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpsaConfig {
    pub gains: SpsaGains,
    /// Starting point; defaults to the OD prior estimate for toy OD tasks and
    /// to the prior mean otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<f64>>,
    /// Defaults to true when every prior marginal is nonnegative.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub project_nonnegative: Option<bool>,
}

impl Default for SpsaConfig {
    fn default() -> Self {
        SpsaConfig {
            gains: od_spsa_gains(),
            start: None,
            project_nonnegative: None,
        }
    }
}

/// One experiment: every method crossed with every seed on one task.
///
/// `inference.seed` and `inference.budget_cap` are ignored; each cell takes its
/// seed from `seeds` and its cap from `budget_cap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodKind>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<MetricKind>,
    /// Simulator calls per cell; defaults to rounds × batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_cap: Option<usize>,
    /// Seed of the shared observation. When absent each trial seed draws its own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation_seed: Option<u64>,
    /// Run cells on separate threads.
    #[serde(default)]
    pub parallel_cells: bool,
    pub task: TaskConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub abc: AbcConfig,
    #[serde(default)]
    pub spsa: SpsaConfig,
}

fn default_methods() -> Vec<MethodKind> {
    vec![MethodKind::Asnpe, MethodKind::Snpe]
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_metrics() -> Vec<MetricKind> {
    vec![
        MetricKind::Rmsne,
        MetricKind::C2st,
        MetricKind::Mmd,
        MetricKind::MedianDist,
        MetricKind::MeanErr,
    ]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// The configuration with every default spelled out.
    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn budget(&self) -> usize {
        self.budget_cap
            .unwrap_or(self.inference.rounds * self.inference.batch)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.inference.validate()?;
        self.task.validate()?;
        self.spsa.gains.validate()?;
        if self.methods.is_empty() {
            bail!("no methods selected");
        }
        if self.seeds.is_empty() {
            bail!("no seeds given");
        }
        let distinct: BTreeSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            bail!("seeds must be distinct");
        }
        let distinct: BTreeSet<_> = self.methods.iter().collect();
        if distinct.len() != self.methods.len() {
            bail!("methods must be distinct");
        }
        let nominal = self.inference.rounds * self.inference.batch;
        if self.methods.iter().any(|m| m.is_sequential()) && self.budget() < nominal {
            bail!(
                "budget cap {} is below rounds × batch = {nominal}",
                self.budget()
            );
        }
        if self.budget() == 0 {
            bail!("budget cap must be positive");
        }
        if self.methods.contains(&MethodKind::Spsa) && self.budget() < 2 {
            bail!("SPSA needs a budget of at least 2 simulations");
        }
        if !(self.abc.accept_quantile > 0.0 && self.abc.accept_quantile <= 1.0) {
            bail!("abc.accept_quantile must lie in (0, 1]");
        }
        let e = &self.evaluation;
        if e.posterior_samples < 2 || e.reference_samples < 2 {
            bail!("evaluation needs at least 2 posterior and reference samples");
        }
        if self.metrics.contains(&MetricKind::MedianDist) && e.predictive_samples == 0 {
            bail!("median_dist needs predictive_samples ≥ 1");
        }
        Ok(())
    }
}
