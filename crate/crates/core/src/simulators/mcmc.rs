//! Random-walk Metropolis for reference posteriors of tractable tasks.
//!
//! A few pilot runs estimate the posterior covariance and tune the proposal
//! scale until the acceptance rate sits in `[0.2, 0.5]`. The main run then uses
//! several chains from the same start; the split-R̂ statistic over chain halves
//! flags poor mixing.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetropolisConfig {
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub pilot_rounds: usize,
    pub pilot_steps: usize,
    /// Proposal standard deviation per coordinate before adaptation.
    pub initial_scale: f64,
    pub rhat_threshold: f64,
}

impl Default for MetropolisConfig {
    fn default() -> Self {
        MetropolisConfig {
            burn_in: 10_000,
            thin: 10,
            chains: 2,
            pilot_rounds: 10,
            pilot_steps: 2_000,
            initial_scale: 0.1,
            rhat_threshold: 1.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetropolisOutput {
    pub samples: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
    /// Acceptance rate of the last pilot run, which set the proposal.
    pub pilot_acceptance_rate: f64,
    pub split_rhat: Vec<f64>,
    pub warning: Option<String>,
}

struct Chain<'a, F> {
    log_target: &'a F,
    state: Vec<f64>,
    log_p: f64,
    accepted: usize,
    steps: usize,
}

impl<F: Fn(&[f64]) -> f64> Chain<'_, F> {
    fn step(&mut self, chol: &DMatrix<f64>, rng: &mut Rng) {
        let d = self.state.len();
        let eps = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let delta = chol * eps;
        let proposal: Vec<f64> = self.state.iter().zip(delta.iter()).map(|(s, e)| s + e).collect();
        let lp = (self.log_target)(&proposal);
        self.steps += 1;
        if lp.is_finite() && (lp - self.log_p >= 0.0 || rng.random::<f64>().ln() < lp - self.log_p) {
            self.state = proposal;
            self.log_p = lp;
            self.accepted += 1;
        }
    }

    fn rate(&self) -> f64 {
        self.accepted as f64 / self.steps.max(1) as f64
    }
}

fn covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        for i in 0..d {
            for j in 0..=i {
                cov[(i, j)] += (r[i] - mean[i]) * (r[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    cov
}

fn cholesky_or_diagonal(cov: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let d = cov.nrows();
    let jitter = 1e-10 * (0..d).map(|i| cov[(i, i)]).fold(0.0, f64::max).max(1e-12);
    let reg = cov + DMatrix::identity(d, d) * jitter;
    match reg.clone().cholesky() {
        Some(c) => c.l() * scale,
        None => DMatrix::from_diagonal(&DVector::from_iterator(
            d,
            (0..d).map(|i| reg[(i, i)].max(1e-12).sqrt() * scale),
        )),
    }
}

/// Gelman–Rubin R̂ on the halves of every chain.
pub fn split_rhat(chains: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let halves: Vec<&[Vec<f64>]> = chains
        .iter()
        .flat_map(|c| {
            let h = c.len() / 2;
            [&c[..h], &c[h..2 * h]]
        })
        .filter(|h| h.len() >= 2)
        .collect();
    let Some(first) = halves.first() else {
        return Vec::new();
    };
    let d = first[0].len();
    let n = halves.iter().map(|h| h.len()).min().unwrap_or(0) as f64;
    let m = halves.len() as f64;
    (0..d)
        .map(|j| {
            let means: Vec<f64> = halves
                .iter()
                .map(|h| h[..n as usize].iter().map(|r| r[j]).sum::<f64>() / n)
                .collect();
            let vars: Vec<f64> = halves
                .iter()
                .zip(&means)
                .map(|(h, mu)| h[..n as usize].iter().map(|r| (r[j] - mu).powi(2)).sum::<f64>() / (n - 1.0))
                .collect();
            let grand = means.iter().sum::<f64>() / m;
            let b = n / (m - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
            let w = vars.iter().sum::<f64>() / m;
            if w <= 0.0 {
                return 1.0;
            }
            let var_plus = (n - 1.0) / n * w + b / n;
            (var_plus / w).sqrt()
        })
        .collect()
}

/// Draw `n` thinned samples from `exp(log_target)` starting at `init`.
pub fn metropolis<F>(log_target: &F, init: &[f64], n: usize, config: &MetropolisConfig, seed: u64) -> MetropolisOutput
where
    F: Fn(&[f64]) -> f64,
{
    metropolis_with_covariance(log_target, init, None, n, config, seed)
}

/// As [`metropolis`], with an initial proposal covariance (e.g. a Laplace approximation).
pub fn metropolis_with_covariance<F>(
    log_target: &F,
    init: &[f64],
    initial_cov: Option<&DMatrix<f64>>,
    n: usize,
    config: &MetropolisConfig,
    seed: u64,
) -> MetropolisOutput
where
    F: Fn(&[f64]) -> f64,
{
    let d = init.len();
    let mut rng = seed::rng_from(seed);
    let start_lp = log_target(init);
    assert!(start_lp.is_finite(), "Metropolis start point has zero target density");

    // Pilot adaptation.
    let (mut cov, mut scale) = match initial_cov {
        Some(c) => (c.clone(), 2.38 / (d as f64).sqrt()),
        None => (DMatrix::identity(d, d) * config.initial_scale.powi(2), 1.0),
    };
    let mut state = init.to_vec();
    let mut pilot_rate = 0.0;
    for round in 0..config.pilot_rounds {
        let chol = cholesky_or_diagonal(&cov, scale);
        let mut chain = Chain {
            log_target,
            log_p: log_target(&state),
            state: state.clone(),
            accepted: 0,
            steps: 0,
        };
        let mut trace = Vec::with_capacity(config.pilot_steps);
        for _ in 0..config.pilot_steps {
            chain.step(&chol, &mut rng);
            trace.push(chain.state.clone());
        }
        pilot_rate = chain.rate();
        state = chain.state;
        let tuned = (0.2..=0.5).contains(&pilot_rate);
        if tuned && round + 1 >= config.pilot_rounds.min(3) {
            break;
        }
        if round < config.pilot_rounds / 2 && pilot_rate > 0.05 && chain.accepted > 2 * d {
            let est = covariance(&trace);
            if (0..d).all(|i| est[(i, i)] > 0.0) {
                cov = est;
                scale = 2.38 / (d as f64).sqrt();
                continue;
            }
        }
        if !tuned {
            scale *= if pilot_rate < 0.2 { 0.6 } else { 1.6 };
        }
    }
    let chol = cholesky_or_diagonal(&cov, scale);

    let chains = config.chains.max(1);
    let mut traces = Vec::with_capacity(chains);
    let (mut accepted, mut steps) = (0, 0);
    for c in 0..chains {
        let want = n / chains + usize::from(c < n % chains);
        let mut crng = seed::rng_from(seed::derive(seed, c as u64 + 1));
        let mut chain = Chain {
            log_target,
            log_p: log_target(&state),
            state: state.clone(),
            accepted: 0,
            steps: 0,
        };
        for _ in 0..config.burn_in {
            chain.step(&chol, &mut crng);
        }
        chain.accepted = 0;
        chain.steps = 0;
        let mut trace = Vec::with_capacity(want);
        for _ in 0..want {
            for _ in 0..config.thin.max(1) {
                chain.step(&chol, &mut crng);
            }
            trace.push(chain.state.clone());
        }
        accepted += chain.accepted;
        steps += chain.steps;
        traces.push(trace);
    }
    let rhat = split_rhat(&traces);
    let worst = rhat.iter().copied().fold(1.0, f64::max);
    let warning = (worst > config.rhat_threshold)
        .then(|| format!("split R-hat {worst:.3} exceeds {}", config.rhat_threshold));
    if let Some(w) = &warning {
        log::warn!("reference MCMC: {w}");
    }
    MetropolisOutput {
        samples: traces.into_iter().flatten().collect(),
        acceptance_rate: accepted as f64 / steps.max(1) as f64,
        pilot_acceptance_rate: pilot_rate,
        split_rhat: rhat,
        warning,
    }
}
