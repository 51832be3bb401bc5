//! Evaluation metrics: RMSNE, C2ST, MMD, median predictive distance and
//! normalized posterior mean error.

mod classifier;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::seed;
use crate::simulators::Simulator;

/// One metric value with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub standard_error: Option<f64>,
    pub sample_sizes: Vec<usize>,
    pub config_digest: String,
}

/// Root mean squared normalized error, `√(n Σᵢ (x̂ᵢ − xᵢ)²) / Σᵢ xᵢ`.
///
/// Note the normalization: the whole residual norm is divided by the total
/// observed count, not element by element.
pub fn rmsne(x_hat: &[f64], x_o: &[f64]) -> Result<f64> {
    check_dim("simulated output", x_o.len(), x_hat.len())?;
    if x_o.is_empty() {
        return Err(Error::InvalidInput("rmsne of empty vectors".into()));
    }
    let total: f64 = x_o.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput(format!(
            "rmsne is undefined when the observation sums to {total}"
        )));
    }
    let sq: f64 = x_hat.iter().zip(x_o).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((x_o.len() as f64 * sq).sqrt() / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct C2stConfig {
    pub folds: usize,
    pub hidden_units: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for C2stConfig {
    fn default() -> Self {
        C2stConfig {
            folds: 5,
            hidden_units: 32,
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
        }
    }
}

/// z-score the pooled sample, dropping constant columns.
fn zscore_pooled(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = p[0].len();
    if p.iter().chain(q).any(|s| s.len() != d) {
        return Err(Error::InvalidInput("samples have mixed dimensions".into()));
    }
    let n = (p.len() + q.len()) as f64;
    let mut keep = Vec::new();
    let mut stats = Vec::new();
    for k in 0..d {
        let mean = p.iter().chain(q).map(|s| s[k]).sum::<f64>() / n;
        let var = p.iter().chain(q).map(|s| (s[k] - mean).powi(2)).sum::<f64>() / n;
        if var > 1e-24 * mean.abs().max(1.0).powi(2) {
            keep.push(k);
            stats.push((mean, var.sqrt()));
        } else {
            warn!("c2st: dropping constant feature {k}");
        }
    }
    if keep.is_empty() {
        return Err(Error::InvalidInput("c2st: every feature is constant".into()));
    }
    Ok(p.iter()
        .chain(q)
        .map(|s| keep.iter().zip(&stats).map(|(&k, (m, sd))| (s[k] - m) / sd).collect())
        .collect())
}

/// Cross-validated accuracy of a classifier separating `samples_p` from
/// `samples_q`; 0.5 means indistinguishable.
pub fn c2st(samples_p: &[Vec<f64>], samples_q: &[Vec<f64>], config: &C2stConfig, seed: u64) -> Result<f64> {
    if samples_p.len() < 2 || samples_q.len() < 2 {
        return Err(Error::InvalidInput("c2st needs at least two samples per side".into()));
    }
    if samples_p.len() < 100 || samples_q.len() < 100 {
        warn!("c2st with fewer than 100 samples per side is noisy");
    }
    let folds = config.folds.max(2);
    if folds > samples_p.len().min(samples_q.len()) {
        return Err(Error::InvalidInput(format!("{folds} folds exceed the sample size")));
    }
    let inputs = zscore_pooled(samples_p, samples_q)?;
    let labels: Vec<f64> = (0..inputs.len()).map(|i| f64::from(i >= samples_p.len())).collect();
    // Stratified folds: each class is shuffled and dealt round-robin.
    let mut rng = seed::rng_from(seed::derive(seed, 0));
    let mut fold_of = vec![0usize; inputs.len()];
    for range in [0..samples_p.len(), samples_p.len()..inputs.len()] {
        let mut idx: Vec<usize> = range.collect();
        idx.shuffle(&mut rng);
        for (pos, i) in idx.into_iter().enumerate() {
            fold_of[i] = pos % folds;
        }
    }
    let cfg = classifier::ClassifierConfig {
        hidden: config.hidden_units,
        epochs: config.epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        ..Default::default()
    };
    let correct: Vec<usize> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..folds)
            .map(|f| {
                let (inputs, labels, fold_of, cfg) = (&inputs, &labels, &fold_of, &cfg);
                scope.spawn(move || {
                    let train: Vec<usize> = (0..inputs.len()).filter(|&i| fold_of[i] != f).collect();
                    let x: Vec<Vec<f64>> = train.iter().map(|&i| inputs[i].clone()).collect();
                    let y: Vec<f64> = train.iter().map(|&i| labels[i]).collect();
                    let mut rng = seed::rng_from(seed::derive(seed, 1 + f as u64));
                    let model = classifier::train(&x, &y, cfg, &mut rng);
                    (0..inputs.len())
                        .filter(|&i| fold_of[i] == f)
                        .filter(|&i| (model.logit(&inputs[i]) > 0.0) == (labels[i] == 1.0))
                        .count()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("c2st fold panicked")).collect()
    });
    Ok(correct.iter().sum::<usize>() as f64 / inputs.len() as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median Euclidean distance over all pairs of the pooled sample.
pub fn median_pairwise_distance(points: &[&[f64]]) -> f64 {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(sq_dist(points[i], points[j]));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *m;
    if d.len() % 2 == 1 {
        upper.sqrt()
    } else {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower.sqrt() + upper.sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmdEstimate {
    /// Unbiased estimate of MMD², possibly slightly negative.
    pub value: f64,
    pub bandwidth: f64,
    /// Spread of the per-point contributions, `2·sd(h̄ᵢ)/√n`; a rough scale
    /// for the estimator's noise.
    pub standard_error: f64,
}

/// Unbiased squared MMD with a Gaussian kernel whose bandwidth is the median
/// pairwise distance of the pooled sample (1 if that median is zero).
pub fn mmd(samples_p: &[Vec<f64>], samples_q: &[Vec<f64>]) -> Result<MmdEstimate> {
    let (m, n) = (samples_p.len(), samples_q.len());
    if m < 2 || n < 2 {
        return Err(Error::InvalidInput("mmd needs at least two samples per side".into()));
    }
    if m < 50 || n < 50 {
        warn!("mmd with fewer than 50 samples per side is noisy");
    }
    let d = samples_p[0].len();
    if samples_p.iter().chain(samples_q).any(|s| s.len() != d) {
        return Err(Error::InvalidInput("samples have mixed dimensions".into()));
    }
    let pooled: Vec<&[f64]> = samples_p.iter().chain(samples_q).map(Vec::as_slice).collect();
    let mut bandwidth = median_pairwise_distance(&pooled);
    if !(bandwidth > 0.0) {
        bandwidth = 1.0;
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |a: &[f64], b: &[f64]| (-gamma * sq_dist(a, b)).exp();
    // Per-point sums, so the standard error can be formed from them.
    let mut row_p = vec![0.0; m];
    let mut row_q = vec![0.0; n];
    let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
    for i in 0..m {
        for j in i + 1..m {
            let v = k(&samples_p[i], &samples_p[j]);
            kxx += 2.0 * v;
            row_p[i] += v / (m - 1) as f64;
            row_p[j] += v / (m - 1) as f64;
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            let v = k(&samples_q[i], &samples_q[j]);
            kyy += 2.0 * v;
            row_q[i] += v / (n - 1) as f64;
            row_q[j] += v / (n - 1) as f64;
        }
    }
    for i in 0..m {
        for j in 0..n {
            let v = k(&samples_p[i], &samples_q[j]);
            kxy += v;
            row_p[i] -= v / n as f64;
            row_q[j] -= v / m as f64;
        }
    }
    let value = kxx / (m * (m - 1)) as f64 + kyy / (n * (n - 1)) as f64 - 2.0 * kxy / (m * n) as f64;
    let spread = |rows: &[f64]| {
        let mu = rows.iter().sum::<f64>() / rows.len() as f64;
        rows.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / (rows.len() - 1) as f64
    };
    let standard_error = 2.0 * (spread(&row_p) / m as f64 + spread(&row_q) / n as f64).sqrt();
    Ok(MmdEstimate {
        value,
        bandwidth,
        standard_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MedianDistance {
    pub value: f64,
    pub failures: usize,
}

/// Simulate each posterior draw once and take the median of `‖xᵢ − x_o‖₂`.
/// Failed simulations are excluded and counted.
pub fn median_distance(
    posterior_samples: &[Vec<f64>],
    simulator: &dyn Simulator,
    x_o: &[f64],
    seed: u64,
    workers: usize,
) -> Result<MedianDistance> {
    if posterior_samples.is_empty() {
        return Err(Error::InvalidInput("median_distance needs at least one sample".into()));
    }
    check_dim("observation", simulator.x_dim(), x_o.len())?;
    let seeds: Vec<u64> = (0..posterior_samples.len() as u64).map(|i| seed::derive(seed, i)).collect();
    let results = simulator.simulate_batch(posterior_samples, &seeds, workers);
    let outputs: Vec<&[f64]> = results.iter().filter_map(|r| r.as_deref().ok()).collect();
    let failures = results.len() - outputs.len();
    let value = median_l2_distance(&outputs, x_o)?;
    Ok(MedianDistance { value, failures })
}

/// Median Euclidean distance from simulated outputs to `x_o`.
pub fn median_l2_distance(outputs: &[&[f64]], x_o: &[f64]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::InvalidInput("every posterior predictive simulation failed".into()));
    }
    let mut dists: Vec<f64> = outputs.iter().map(|x| sq_dist(x, x_o).sqrt()).collect();
    dists.sort_by(f64::total_cmp);
    let k = dists.len();
    Ok(if k % 2 == 1 {
        dists[k / 2]
    } else {
        0.5 * (dists[k / 2 - 1] + dists[k / 2])
    })
}

/// Mean over dimensions of `|mean(approx) − true_mean| / normalizer`.
/// Dimensions with a zero normalizer are skipped.
pub fn posterior_mean_error(approx_samples: &[Vec<f64>], true_mean: &[f64], normalizer: &[f64]) -> Result<f64> {
    if approx_samples.is_empty() {
        return Err(Error::InvalidInput("posterior_mean_error needs samples".into()));
    }
    check_dim("normalizer", true_mean.len(), normalizer.len())?;
    for s in approx_samples {
        check_dim("posterior sample", true_mean.len(), s.len())?;
    }
    let mean = crate::simulators::column_mean(approx_samples);
    let mut total = 0.0;
    let mut used = 0;
    for k in 0..true_mean.len() {
        if normalizer[k] == 0.0 {
            warn!("posterior_mean_error: zero normalizer in dimension {k}, skipped");
            continue;
        }
        if !(normalizer[k] > 0.0) {
            return Err(Error::InvalidInput(format!("normalizer {} is not positive", normalizer[k])));
        }
        total += (mean[k] - true_mean[k]).abs() / normalizer[k];
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidInput("every normalizer component is zero".into()));
    }
    Ok(total / used as f64)
}

#[cfg(test)]
mod tests;
