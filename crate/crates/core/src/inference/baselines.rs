use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::metrics::rmsne;
use crate::prior::PriorSpec;
use crate::seed::{self, Rng};
use crate::simulators::{SimulationError, Simulator};

#[derive(Debug, Clone, PartialEq)]
pub struct AbcOutput {
    /// Accepted parameters, in draw order.
    pub samples: Vec<Vec<f64>>,
    pub accepted: Vec<usize>,
    /// Every prior draw and its output (`None` if the simulation failed).
    pub thetas: Vec<Vec<f64>>,
    pub outputs: Vec<Option<Vec<f64>>>,
    /// Standardized distance of every successful draw (`inf` for failures).
    pub distances: Vec<f64>,
    pub threshold: f64,
}

/// Rejection ABC: simulate `budget` prior draws and keep the `accept_quantile`
/// fraction closest to `x_o` in Euclidean distance after scaling each output
/// coordinate by its standard deviation across the simulations.
pub fn run_rejection_abc(
    prior: &PriorSpec,
    simulator: &dyn Simulator,
    x_o: &[f64],
    budget: usize,
    accept_quantile: f64,
    seed: u64,
    workers: usize,
) -> Result<AbcOutput> {
    if budget == 0 {
        return Err(Error::InvalidInput("ABC budget must be at least 1".into()));
    }
    if !(accept_quantile > 0.0 && accept_quantile <= 1.0) {
        return Err(Error::InvalidInput(format!("accept_quantile {accept_quantile} outside (0, 1]")));
    }
    check_dim("observation", simulator.x_dim(), x_o.len())?;
    let mut rng = seed::rng_from(seed::derive(seed, 0));
    let thetas = prior.sample_n(budget, &mut rng);
    let seeds: Vec<u64> = (0..budget as u64).map(|i| seed::derive(seed::derive(seed, 1), i)).collect();
    let outputs: Vec<Option<Vec<f64>>> = simulator
        .simulate_batch(&thetas, &seeds, workers)
        .into_iter()
        .map(|r| r.ok().filter(|x| x.len() == x_o.len() && x.iter().all(|v| v.is_finite())))
        .collect();
    let ok: Vec<&Vec<f64>> = outputs.iter().flatten().collect();
    if ok.is_empty() {
        return Err(Error::InvalidInput("every ABC simulation failed".into()));
    }
    let scale: Vec<f64> = (0..x_o.len())
        .map(|k| {
            let n = ok.len() as f64;
            let m = ok.iter().map(|x| x[k]).sum::<f64>() / n;
            let sd = (ok.iter().map(|x| (x[k] - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
            if sd > 0.0 { sd } else { 1.0 }
        })
        .collect();
    let distances: Vec<f64> = outputs
        .iter()
        .map(|o| match o {
            Some(x) => x
                .iter()
                .zip(x_o)
                .zip(&scale)
                .map(|((a, b), s)| ((a - b) / s).powi(2))
                .sum::<f64>()
                .sqrt(),
            None => f64::INFINITY,
        })
        .collect();
    let keep = ((accept_quantile * ok.len() as f64).ceil() as usize).clamp(1, ok.len());
    let mut order: Vec<usize> = (0..budget).filter(|&i| outputs[i].is_some()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    let mut accepted = order[..keep].to_vec();
    let threshold = distances[accepted[keep - 1]];
    accepted.sort_unstable();
    Ok(AbcOutput {
        samples: accepted.iter().map(|&i| thetas[i].clone()).collect(),
        accepted,
        thetas,
        outputs,
        distances,
        threshold,
    })
}

/// Gain sequences `a_k = a / (k + 1 + A)^α` and `c_k = c / (k + 1)^γ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpsaGains {
    pub a: f64,
    pub c: f64,
    pub big_a: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for SpsaGains {
    fn default() -> Self {
        SpsaGains {
            a: 1.0,
            c: 0.1,
            big_a: 0.0,
            alpha: 0.602,
            gamma: 0.101,
        }
    }
}

impl SpsaGains {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.a) || !ok(self.c) {
            return Err(Error::InvalidConfig(format!(
                "SPSA gains a and c must be positive (a = {}, c = {})",
                self.a, self.c
            )));
        }
        if !(self.big_a >= 0.0) || !(self.alpha >= 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::InvalidConfig("SPSA A, alpha and gamma must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn a_k(&self, k: usize) -> f64 {
        self.a / (k as f64 + 1.0 + self.big_a).powf(self.alpha)
    }

    pub fn c_k(&self, k: usize) -> f64 {
        self.c / (k as f64 + 1.0).powf(self.gamma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpsaStep {
    pub iteration: usize,
    /// Iterate before the update.
    pub theta: Vec<f64>,
    pub f_plus: f64,
    pub f_minus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpsaEvaluation {
    pub theta: Vec<f64>,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpsaOutput {
    pub steps: Vec<SpsaStep>,
    /// Every objective evaluation in call order.
    pub evaluations: Vec<SpsaEvaluation>,
    pub final_theta: Vec<f64>,
    pub failed_iterations: usize,
}

impl SpsaOutput {
    pub fn calls(&self) -> usize {
        self.evaluations.len()
    }
}

/// Simultaneous perturbation stochastic approximation with Rademacher
/// perturbations, two evaluations per iteration. A failed evaluation retries
/// the iteration once with a fresh perturbation, then skips it.
pub fn spsa_minimize<F>(
    mut f: F,
    start: &[f64],
    iterations: usize,
    gains: &SpsaGains,
    project_nonnegative: bool,
    rng: &mut Rng,
) -> Result<SpsaOutput>
where
    F: FnMut(&[f64]) -> std::result::Result<f64, SimulationError>,
{
    gains.validate()?;
    let project = |v: &mut Vec<f64>| {
        if project_nonnegative {
            v.iter_mut().for_each(|x| *x = x.max(0.0));
        }
    };
    let mut theta = start.to_vec();
    project(&mut theta);
    let mut steps = Vec::with_capacity(iterations);
    let mut evaluations = Vec::with_capacity(2 * iterations);
    let mut failed_iterations = 0;
    for k in 0..iterations {
        let ck = gains.c_k(k);
        let mut done = false;
        for _attempt in 0..2 {
            let delta: Vec<f64> = (0..theta.len())
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            let mut plus: Vec<f64> = theta.iter().zip(&delta).map(|(t, d)| t + ck * d).collect();
            let mut minus: Vec<f64> = theta.iter().zip(&delta).map(|(t, d)| t - ck * d).collect();
            project(&mut plus);
            project(&mut minus);
            let fp = f(&plus).ok().filter(|v| v.is_finite());
            evaluations.push(SpsaEvaluation { theta: plus, value: fp });
            let fm = f(&minus).ok().filter(|v| v.is_finite());
            evaluations.push(SpsaEvaluation { theta: minus, value: fm });
            let (Some(fp), Some(fm)) = (fp, fm) else { continue };
            steps.push(SpsaStep {
                iteration: k,
                theta: theta.clone(),
                f_plus: fp,
                f_minus: fm,
            });
            let ak = gains.a_k(k);
            for (t, d) in theta.iter_mut().zip(&delta) {
                *t -= ak * (fp - fm) / (2.0 * ck * d);
            }
            project(&mut theta);
            done = true;
            break;
        }
        if !done {
            failed_iterations += 1;
        }
    }
    Ok(SpsaOutput {
        steps,
        evaluations,
        final_theta: theta,
        failed_iterations,
    })
}

/// SPSA on the RMSNE between one simulation at θ and `x_o`.
pub fn run_spsa(
    simulator: &dyn Simulator,
    x_o: &[f64],
    start: &[f64],
    iterations: usize,
    gains: &SpsaGains,
    project_nonnegative: bool,
    seed: u64,
) -> Result<SpsaOutput> {
    check_dim("start", simulator.theta_dim(), start.len())?;
    check_dim("observation", simulator.x_dim(), x_o.len())?;
    rmsne(x_o, x_o)?;
    let sim_seed = seed::derive(seed, 1);
    let mut call = 0u64;
    let objective = |theta: &[f64]| {
        let x = simulator.simulate(theta, seed::derive(sim_seed, call));
        call += 1;
        let x = x?;
        rmsne(&x, x_o).map_err(|e| SimulationError::Malformed(e.to_string()))
    };
    let mut rng = seed::rng_from(seed::derive(seed, 0));
    spsa_minimize(objective, start, iterations, gains, project_nonnegative, &mut rng)
}
