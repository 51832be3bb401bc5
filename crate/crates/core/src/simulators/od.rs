//! Toy origin-destination demand calibration.
//!
//! Demand `d` over OD pairs is routed through a fixed sparse assignment matrix
//! `A` (detectors × OD pairs). One simulation draws multiplicative demand noise
//! `η ~ N(1, σ_η²)` per OD pair and additive detector noise, and returns the
//! detector counts `A (d ⊙ η) + ε`.

use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{SimResult, SimulationError, Simulator};
use crate::error::{check_dim, Error, Result};
use crate::prior::{Marginal, PriorSpec};
use crate::seed::{self, Rng};

pub const OD_SCENARIO_VERSION: u32 = 1;

/// Prior standard deviation per OD pair is `max(cv · d̂, floor)`.
pub const DEFAULT_PRIOR_CV: f64 = 1.0;
pub const DEFAULT_PRIOR_SD_FLOOR: f64 = 1.0;

/// Recipe for a synthetic scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdScenarioConfig {
    pub num_od: usize,
    pub num_detectors: usize,
    /// Each OD pair crosses between `min_crossings` and `max_crossings` detectors.
    pub min_crossings: usize,
    pub max_crossings: usize,
    /// True demand per OD pair ~ N(demand_mean, demand_sd²) truncated at 0.
    pub demand_mean: f64,
    pub demand_sd: f64,
    pub bias_r: f64,
    pub noise_q: f64,
    pub demand_noise_sd: f64,
    /// Detector noise sd as a fraction of the mean expected flow at the true demand.
    pub detector_noise_fraction: f64,
    pub prior_cv: f64,
    pub prior_sd_floor: f64,
    pub seed: u64,
}

impl Default for OdScenarioConfig {
    fn default() -> Self {
        OdScenarioConfig {
            num_od: 40,
            num_detectors: 12,
            min_crossings: 1,
            max_crossings: 3,
            demand_mean: 5.0,
            demand_sd: 25.0,
            bias_r: 0.6,
            noise_q: 0.3,
            demand_noise_sd: 0.05,
            detector_noise_fraction: 0.02,
            prior_cv: DEFAULT_PRIOR_CV,
            prior_sd_floor: DEFAULT_PRIOR_SD_FLOOR,
            seed: 0,
        }
    }
}

impl OdScenarioConfig {
    /// Heavily under-estimated demand with little noise (r = 0.6, q = 0.3).
    pub fn prior_one(seed: u64) -> Self {
        OdScenarioConfig {
            bias_r: 0.6,
            noise_q: 0.3,
            seed,
            ..Self::default()
        }
    }

    /// Less biased, noisier estimate (r = 0.75, q = 0.45).
    pub fn prior_two(seed: u64) -> Self {
        OdScenarioConfig {
            bias_r: 0.75,
            noise_q: 0.45,
            seed,
            ..Self::default()
        }
    }
}

/// A fully specified scenario; serialized as JSON with `A` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdScenario {
    pub schema_version: u32,
    pub num_od: usize,
    pub num_detectors: usize,
    /// `num_detectors × num_od`, row-major.
    pub assignment: Vec<f64>,
    pub true_demand: Vec<f64>,
    pub prior_estimate: Vec<f64>,
    pub prior_sd: Vec<f64>,
    pub bias_r: f64,
    pub noise_q: f64,
    pub demand_noise_sd: f64,
    pub detector_noise_sd: f64,
}

/// Perturbed demand estimate and the prior built around it.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorEstimate {
    pub d_hat: Vec<f64>,
    /// The factors `r + q δ` before clipping the estimate at zero.
    pub scale_factors: Vec<f64>,
    pub prior_sd: Vec<f64>,
    pub prior: PriorSpec,
}

/// `d̂_i = max(0, (r + q δ_i) d_i)` with `δ_i ~ N(0, 1/3)`, and a truncated-normal
/// prior at `d̂` with the default width.
pub fn make_prior_estimate(d_true: &[f64], r: f64, q: f64, seed: u64) -> Result<PriorEstimate> {
    make_prior_estimate_with(d_true, r, q, DEFAULT_PRIOR_CV, DEFAULT_PRIOR_SD_FLOOR, seed)
}

pub fn make_prior_estimate_with(
    d_true: &[f64],
    r: f64,
    q: f64,
    prior_cv: f64,
    prior_sd_floor: f64,
    seed: u64,
) -> Result<PriorEstimate> {
    if !(r > 0.0 && q >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "prior estimate needs r > 0 and q ≥ 0, got r = {r}, q = {q}"
        )));
    }
    if !(prior_cv > 0.0 && prior_sd_floor > 0.0) {
        return Err(Error::InvalidConfig("prior width parameters must be positive".into()));
    }
    let mut rng = seed::rng_from(seed);
    let delta_sd = (1.0_f64 / 3.0).sqrt();
    let scale_factors: Vec<f64> = d_true
        .iter()
        .map(|_| r + q * delta_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let d_hat: Vec<f64> = d_true
        .iter()
        .zip(&scale_factors)
        .map(|(d, s)| (d * s).max(0.0))
        .collect();
    let prior_sd: Vec<f64> = d_hat.iter().map(|d| (prior_cv * d).max(prior_sd_floor)).collect();
    let prior = PriorSpec::truncated_normal(&d_hat, &prior_sd, 0.0);
    Ok(PriorEstimate {
        d_hat,
        scale_factors,
        prior_sd,
        prior,
    })
}

fn random_assignment(config: &OdScenarioConfig, rng: &mut Rng) -> Vec<f64> {
    let (m, d) = (config.num_detectors, config.num_od);
    let mut a = vec![0.0; m * d];
    let mut crossings = vec![0usize; d];
    let hi = config.max_crossings.min(m);
    let lo = config.min_crossings.clamp(1, hi);
    for (j, c) in crossings.iter_mut().enumerate() {
        let k = rng.random_range(lo..=hi);
        for det in index::sample(rng, m, k) {
            a[det * d + j] = 1.0;
        }
        *c = k;
    }
    // Give every detector at least one OD pair.
    for det in 0..m {
        if (0..d).any(|j| a[det * d + j] > 0.0) {
            continue;
        }
        let candidates: Vec<usize> = (0..d).filter(|&j| crossings[j] < hi).collect();
        let j = if candidates.is_empty() {
            rng.random_range(0..d)
        } else {
            candidates[rng.random_range(0..candidates.len())]
        };
        a[det * d + j] = 1.0;
        crossings[j] += 1;
    }
    a
}

fn truncated_normal_draws(n: usize, mean: f64, sd: f64, rng: &mut Rng) -> Vec<f64> {
    let m = Marginal::TruncatedNormal {
        mean,
        sd,
        lower: 0.0,
        upper: f64::INFINITY,
    };
    (0..n).map(|_| m.sample(rng)).collect()
}

impl OdScenario {
    pub fn generate(config: &OdScenarioConfig) -> Result<Self> {
        if config.num_od < config.num_detectors || config.num_detectors == 0 {
            return Err(Error::InvalidConfig(format!(
                "toy OD needs 1 ≤ detectors ≤ OD pairs, got {} detectors and {} pairs",
                config.num_detectors, config.num_od
            )));
        }
        if !(config.demand_sd > 0.0 && config.demand_noise_sd >= 0.0 && config.detector_noise_fraction >= 0.0) {
            return Err(Error::InvalidConfig("toy OD noise scales must be nonnegative".into()));
        }
        let mut rng = seed::rng_from(seed::derive(config.seed, 0));
        let assignment = random_assignment(config, &mut rng);
        let true_demand = truncated_normal_draws(config.num_od, config.demand_mean, config.demand_sd, &mut rng);
        let estimate = make_prior_estimate_with(
            &true_demand,
            config.bias_r,
            config.noise_q,
            config.prior_cv,
            config.prior_sd_floor,
            seed::derive(config.seed, 1),
        )?;
        let d = config.num_od;
        let mean_flow = (0..config.num_detectors)
            .map(|i| (0..d).map(|j| assignment[i * d + j] * true_demand[j]).sum::<f64>())
            .sum::<f64>()
            / config.num_detectors as f64;
        let scenario = OdScenario {
            schema_version: OD_SCENARIO_VERSION,
            num_od: d,
            num_detectors: config.num_detectors,
            assignment,
            true_demand,
            prior_estimate: estimate.d_hat,
            prior_sd: estimate.prior_sd,
            bias_r: config.bias_r,
            noise_q: config.noise_q,
            demand_noise_sd: config.demand_noise_sd,
            detector_noise_sd: config.detector_noise_fraction * mean_flow,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != OD_SCENARIO_VERSION {
            return Err(Error::SchemaVersion {
                what: "OD scenario",
                found: self.schema_version,
                expected: OD_SCENARIO_VERSION,
            });
        }
        let (m, d) = (self.num_detectors, self.num_od);
        check_dim("assignment matrix", m * d, self.assignment.len())?;
        check_dim("true demand", d, self.true_demand.len())?;
        check_dim("prior estimate", d, self.prior_estimate.len())?;
        check_dim("prior sd", d, self.prior_sd.len())?;
        if d < m {
            return Err(Error::InvalidConfig("OD scenario must have at least as many OD pairs as detectors".into()));
        }
        if self.assignment.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::InvalidConfig("assignment matrix must be nonnegative".into()));
        }
        if (0..m).any(|i| self.assignment[i * d..(i + 1) * d].iter().all(|&a| a == 0.0)) {
            return Err(Error::InvalidConfig("assignment matrix has a detector with no OD pairs".into()));
        }
        if self.true_demand.iter().chain(&self.prior_estimate).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("demands must be finite and nonnegative".into()));
        }
        if self.prior_sd.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidConfig("prior sd must be positive".into()));
        }
        if !(self.demand_noise_sd >= 0.0 && self.detector_noise_sd >= 0.0) {
            return Err(Error::InvalidConfig("noise scales must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn prior(&self) -> PriorSpec {
        PriorSpec::truncated_normal(&self.prior_estimate, &self.prior_sd, 0.0)
    }

    /// Noise-free detector counts `A d`.
    pub fn expected_flows(&self, demand: &[f64]) -> Vec<f64> {
        let d = self.num_od;
        (0..self.num_detectors)
            .map(|i| {
                self.assignment[i * d..(i + 1) * d]
                    .iter()
                    .zip(demand)
                    .map(|(a, v)| a * v)
                    .sum()
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: OdScenario = serde_json::from_slice(&std::fs::read(path)?)?;
        s.validate()?;
        Ok(s)
    }
}

/// Simulator view of a scenario.
#[derive(Debug, Clone)]
pub struct ToyOd {
    scenario: OdScenario,
}

impl ToyOd {
    pub fn new(scenario: OdScenario) -> Result<Self> {
        scenario.validate()?;
        Ok(ToyOd { scenario })
    }

    pub fn scenario(&self) -> &OdScenario {
        &self.scenario
    }

    pub fn prior(&self) -> PriorSpec {
        self.scenario.prior()
    }
}

impl Simulator for ToyOd {
    fn theta_dim(&self) -> usize {
        self.scenario.num_od
    }

    fn x_dim(&self) -> usize {
        self.scenario.num_detectors
    }

    fn simulate(&self, demand: &[f64], seed: u64) -> SimResult {
        super::check_theta(demand, self.scenario.num_od)?;
        if let Some(v) = demand.iter().find(|v| **v < 0.0) {
            return Err(SimulationError::InvalidInput(format!(
                "negative demand {v} is outside the prior support"
            )));
        }
        let s = &self.scenario;
        let mut rng = seed::rng_from(seed);
        let noisy: Vec<f64> = demand
            .iter()
            .map(|v| v * (1.0 + s.demand_noise_sd * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Ok(s.expected_flows(&noisy)
            .into_iter()
            .map(|f| f + s.detector_noise_sd * rng.sample::<f64, _>(StandardNormal))
            .collect())
    }
}
