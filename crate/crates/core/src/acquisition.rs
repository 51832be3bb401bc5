//! Candidate scoring by the variance of posterior densities across weight samples.
//!
//! For a candidate θ with proposal density `p̃(θ)` and per-weight-sample
//! densities `q_s = q(θ | x_o, φ_s)`, the score is
//! `p̃(θ) · (1/S Σ_s (q̄ − q_s)²)^λ` where `q̄` is the mean over s. Dropping
//! the proposal factor scores by disagreement alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Flow, WeightSample};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionConfig {
    /// Number of frozen dropout masks S shared by every candidate of a round.
    pub num_weight_samples: usize,
    pub lambda: f64,
    /// Component densities below this value count as zero.
    pub density_floor: f64,
    pub use_proposal_weight: bool,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            num_weight_samples: 100,
            lambda: 1.0,
            density_floor: 0.0,
            use_proposal_weight: true,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_weight_samples < 2 {
            return Err(Error::InvalidConfig(
                "acquisition needs at least 2 weight samples".into(),
            ));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.density_floor >= 0.0 && self.density_floor.is_finite()) {
            return Err(Error::InvalidConfig("density_floor must be a nonnegative number".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    /// Position in the proposal draw order.
    pub index: usize,
    pub theta: Vec<f64>,
    pub proposal_density: f64,
    /// Component densities divided by the batch-wide factor `exp(log_shift)`.
    pub component_densities: Vec<f64>,
    pub marginal_density: f64,
    pub variance: f64,
    pub score: f64,
    /// `ln score`, used for ranking; `-inf` for zero scores.
    pub log_score: f64,
    /// Every component density was zero (after flooring).
    pub degenerate: bool,
}

/// Densities of a batch of candidates under each weight sample, all divided by
/// the same factor `exp(log_shift)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentDensities {
    /// `densities[i][s]` for candidate i and weight sample s.
    pub densities: Vec<Vec<f64>>,
    pub log_shift: f64,
}

impl ComponentDensities {
    /// Shift a table of log-densities by its overall maximum and exponentiate.
    /// Entries below `ln(floor)` become exactly zero.
    pub fn from_log(log_densities: Vec<Vec<f64>>, floor: f64) -> Self {
        let log_floor = if floor > 0.0 { floor.ln() } else { f64::NEG_INFINITY };
        let max = log_densities
            .iter()
            .flatten()
            .copied()
            .filter(|v| v.is_finite() && *v >= log_floor)
            .fold(f64::NEG_INFINITY, f64::max);
        let log_shift = if max.is_finite() { max } else { 0.0 };
        let densities = log_densities
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|l| if l.is_finite() && l >= log_floor { (l - log_shift).exp() } else { 0.0 })
                    .collect()
            })
            .collect();
        ComponentDensities { densities, log_shift }
    }
}

/// `q(θ_i | x_o, φ_s)` for every candidate and weight sample, with a shared
/// max-log shift. Weight samples are processed in parallel.
pub fn component_densities(
    flow: &Flow,
    thetas: &[Vec<f64>],
    x_o: &[f64],
    phis: &[WeightSample],
    density_floor: f64,
) -> Result<ComponentDensities> {
    if phis.is_empty() {
        return Err(Error::InvalidInput("component_densities needs at least one weight sample".into()));
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(phis.len());
    let chunk = phis.len().div_ceil(workers);
    let per_phi: Vec<Vec<f64>> = std::thread::scope(|scope| {
        let handles: Vec<_> = phis
            .chunks(chunk)
            .map(|group| {
                scope.spawn(move || {
                    group
                        .iter()
                        .map(|phi| flow.log_prob_each(thetas, x_o, phi))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("density worker panicked"))
            .collect::<Result<Vec<Vec<Vec<f64>>>>>()
            .map(|groups| groups.into_iter().flatten().collect())
    })?;
    let table = (0..thetas.len())
        .map(|i| per_phi.iter().map(|col| col[i]).collect())
        .collect();
    Ok(ComponentDensities::from_log(table, density_floor))
}

/// Mean of the components and their population variance around it. Exactly
/// equal components give exactly zero variance.
pub fn mean_and_variance(components: &[f64]) -> (f64, f64) {
    if components.is_empty() {
        return (0.0, 0.0);
    }
    let n = components.len() as f64;
    let mean = components.iter().sum::<f64>() / n;
    if components.iter().all(|&c| c == components[0]) {
        return (components[0], 0.0);
    }
    let var = components.iter().map(|c| (mean - c) * (mean - c)).sum::<f64>() / n;
    (mean, var)
}

/// `proposal_density · variance(components)^λ`.
pub fn acquisition_score(components: &[f64], proposal_density: f64, lambda: f64) -> f64 {
    let (_, var) = mean_and_variance(components);
    if var == 0.0 || proposal_density <= 0.0 {
        return 0.0;
    }
    proposal_density * var.powf(lambda)
}

/// Score every candidate. `proposal_log_densities` may be unnormalized; it is
/// ignored when `use_proposal_weight` is false.
pub fn score_candidates(
    flow: &Flow,
    thetas: &[Vec<f64>],
    proposal_log_densities: &[f64],
    x_o: &[f64],
    phis: &[WeightSample],
    config: &AcquisitionConfig,
) -> Result<Vec<ScoredCandidate>> {
    config.validate()?;
    crate::error::check_dim("proposal densities", thetas.len(), proposal_log_densities.len())?;
    let comps = component_densities(flow, thetas, x_o, phis, config.density_floor)?;
    Ok(score_from_components(thetas, proposal_log_densities, comps, config))
}

/// Scores from precomputed component densities.
pub fn score_from_components(
    thetas: &[Vec<f64>],
    proposal_log_densities: &[f64],
    comps: ComponentDensities,
    config: &AcquisitionConfig,
) -> Vec<ScoredCandidate> {
    thetas
        .iter()
        .zip(proposal_log_densities)
        .zip(comps.densities)
        .enumerate()
        .map(|(index, ((theta, &lp), components))| {
            let (marginal, variance) = mean_and_variance(&components);
            let degenerate = components.iter().all(|&c| c == 0.0);
            let log_weight = if config.use_proposal_weight { lp } else { 0.0 };
            let log_score = if variance > 0.0 && log_weight > f64::NEG_INFINITY {
                log_weight + config.lambda * variance.ln()
            } else {
                f64::NEG_INFINITY
            };
            ScoredCandidate {
                index,
                theta: theta.clone(),
                proposal_density: lp.exp(),
                component_densities: components,
                marginal_density: marginal,
                variance,
                score: log_score.exp(),
                log_score,
                degenerate,
            }
        })
        .collect()
}

/// Indices of the `b` highest-scoring candidates, ties broken by draw order.
pub fn select_top_b(candidates: &[ScoredCandidate], b: usize) -> Result<Vec<usize>> {
    Ok(ranking(candidates, b)?.into_iter().take(b).collect())
}

/// All candidate positions in selection order (best first). Errors when `b`
/// exceeds the number of candidates.
pub fn ranking(candidates: &[ScoredCandidate], b: usize) -> Result<Vec<usize>> {
    if b > candidates.len() {
        return Err(Error::InvalidInput(format!(
            "cannot select {b} of {} candidates",
            candidates.len()
        )));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .log_score
            .total_cmp(&candidates[a].log_score)
            .then(candidates[a].index.cmp(&candidates[b].index))
    });
    Ok(order)
}

#[derive(Debug, Serialize)]
struct DumpRow {
    index: usize,
    proposal_density: f64,
    marginal_density: f64,
    variance: f64,
    score: f64,
    selected: bool,
}

pub const ACQUISITION_DUMP_VERSION: u32 = 1;

/// Write the per-round candidate table.
pub fn write_acquisition_csv(path: &Path, candidates: &[ScoredCandidate], selected: &[usize]) -> Result<()> {
    let rows: Vec<DumpRow> = candidates
        .iter()
        .enumerate()
        .map(|(pos, c)| DumpRow {
            index: c.index,
            proposal_density: c.proposal_density,
            marginal_density: c.marginal_density,
            variance: c.variance,
            score: c.score,
            selected: selected.contains(&pos),
        })
        .collect();
    crate::csvio::write_rows(
        path,
        "acquisition",
        ACQUISITION_DUMP_VERSION,
        &["index", "proposal_density", "marginal_density", "variance", "score", "selected"],
        &rows,
    )
}

/// Which way round the divergence in the uncertainty diagnostic is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `E_φ KL(q_φ ‖ q̄)`, equal to the mutual information between φ and θ.
    #[default]
    ComponentToMarginal,
    /// `E_φ KL(q̄ ‖ q_φ)`.
    MarginalToComponent,
}

/// A finite family of densities that can be sampled and evaluated.
pub trait Components {
    fn count(&self) -> usize;
    fn log_density(&self, s: usize, theta: &[f64]) -> f64;
    fn sample(&self, s: usize, rng: &mut Rng) -> Vec<f64>;
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub standard_error: f64,
}

/// Expected divergence between the components and their equal-weight mixture,
/// estimated from `num_theta_samples` draws of the mixture. `None` when the
/// estimate is not finite.
pub fn distributional_uncertainty_of<C: Components + ?Sized>(
    components: &C,
    num_theta_samples: usize,
    direction: KlDirection,
    rng: &mut Rng,
) -> Result<Option<Estimate>> {
    use rand::Rng as _;
    let s_count = components.count();
    if s_count < 2 || num_theta_samples < 2 {
        return Err(Error::InvalidInput(
            "distributional uncertainty needs ≥ 2 components and ≥ 2 θ samples".into(),
        ));
    }
    let mut terms = Vec::with_capacity(num_theta_samples);
    let mut logs = vec![0.0; s_count];
    for _ in 0..num_theta_samples {
        let pick = rng.random_range(0..s_count);
        let theta = components.sample(pick, rng);
        for (s, l) in logs.iter_mut().enumerate() {
            *l = components.log_density(s, &theta);
        }
        let Some(log_marginal) = crate::flow::log_mean_exp(&logs) else {
            return Ok(None);
        };
        let term = match direction {
            KlDirection::ComponentToMarginal => logs[pick] - log_marginal,
            KlDirection::MarginalToComponent => log_marginal - logs.iter().sum::<f64>() / s_count as f64,
        };
        terms.push(term);
    }
    let n = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / n;
    let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let est = Estimate {
        value: mean,
        standard_error: (var / n).sqrt(),
    };
    Ok((est.value.is_finite() && est.standard_error.is_finite()).then_some(est))
}

struct FlowComponents<'a> {
    flow: &'a Flow,
    x: &'a [f64],
    phis: &'a [WeightSample],
}

impl Components for FlowComponents<'_> {
    fn count(&self) -> usize {
        self.phis.len()
    }

    fn log_density(&self, s: usize, theta: &[f64]) -> f64 {
        self.flow
            .log_prob(theta, self.x, &self.phis[s])
            .unwrap_or(f64::NEG_INFINITY)
    }

    fn sample(&self, s: usize, rng: &mut Rng) -> Vec<f64> {
        self.flow
            .sample(1, self.x, &self.phis[s], rng)
            .expect("dimensions checked")
            .remove(0)
    }
}

/// [`distributional_uncertainty_of`] for the flow's weight samples at `x`.
pub fn distributional_uncertainty(
    flow: &Flow,
    x: &[f64],
    phis: &[WeightSample],
    num_theta_samples: usize,
    direction: KlDirection,
    rng: &mut Rng,
) -> Result<Option<Estimate>> {
    crate::error::check_dim("context", flow.config().context_dim, x.len())?;
    distributional_uncertainty_of(&FlowComponents { flow, x, phis }, num_theta_samples, direction, rng)
}

/// Mutual information of a discrete joint table `joint[φ][θ]` and the expected
/// divergence `Σ_φ p(φ) KL(p(θ|φ) ‖ p(θ))`, both by exact enumeration.
pub fn mi_identity_oracle(joint: &[Vec<f64>]) -> Result<(f64, f64)> {
    let cols = joint.first().map_or(0, Vec::len);
    if cols == 0 || joint.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidInput("joint table must be a non-empty rectangle".into()));
    }
    if joint.iter().flatten().any(|&p| !(p >= 0.0 && p.is_finite())) {
        return Err(Error::InvalidInput("joint table has negative or non-finite entries".into()));
    }
    let total: f64 = joint.iter().flatten().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("joint table sums to {total}, not 1")));
    }
    let p_phi: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let p_theta: Vec<f64> = (0..cols).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    let mut expected_kl = 0.0;
    for (row, &pf) in joint.iter().zip(&p_phi) {
        if pf == 0.0 {
            continue;
        }
        let mut kl = 0.0;
        for (&p, &pt) in row.iter().zip(&p_theta) {
            if p > 0.0 {
                mi += p * (p / (pf * pt)).ln();
                let cond = p / pf;
                kl += cond * (cond / pt).ln();
            }
        }
        expected_kl += pf * kl;
    }
    Ok((mi, expected_kl))
}

#[cfg(test)]
mod tests;
