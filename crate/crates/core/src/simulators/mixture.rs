use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{check_theta, ReferenceKind, ReferenceOracle, ReferenceSamples, SimResult, Simulator};
use crate::error::{check_dim, Result};
use crate::prior::PriorSpec;
use crate::seed;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// θ ~ U([-10, 10]²), x ~ ½ N(θ, I) + ½ N(θ, 0.01 I).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub bound: f64,
    /// Grid spacing for the reference posterior.
    pub grid_step: f64,
    /// Half-width of the grid window around `x_o`; beyond it the likelihood is below e^-24.
    pub grid_radius: f64,
}

impl Default for GaussianMixture {
    fn default() -> Self {
        GaussianMixture {
            bound: 10.0,
            grid_step: 0.01,
            grid_radius: 7.0,
        }
    }
}

/// Normalized posterior weights on a regular grid of cell centers.
#[derive(Debug, Clone)]
pub struct GridPosterior {
    pub axes: [Vec<f64>; 2],
    pub step: f64,
    /// Row-major over `axes[0] × axes[1]`, summing to 1.
    pub weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn prior(&self) -> PriorSpec {
        PriorSpec::uniform_box(&[-self.bound; 2], &[self.bound; 2])
    }

    pub fn log_likelihood(&self, theta: &[f64], x: &[f64]) -> f64 {
        let sq: f64 = theta.iter().zip(x).map(|(t, v)| (t - v) * (t - v)).sum();
        let wide = -0.5 * sq - LN_2PI;
        // Covariance 0.01 I in two dimensions: log det = 2 ln 0.01.
        let narrow = -0.5 * sq / 0.01 - LN_2PI - 0.01_f64.ln();
        let m = wide.max(narrow);
        m + (0.5 * (wide - m).exp() + 0.5 * (narrow - m).exp()).ln()
    }

    pub fn grid_posterior(&self, x_o: &[f64]) -> Result<GridPosterior> {
        check_dim("observation", 2, x_o.len())?;
        let h = self.grid_step;
        let axis = |c: f64| -> Vec<f64> {
            let lo = (c - self.grid_radius).max(-self.bound);
            let hi = (c + self.grid_radius).min(self.bound);
            let cells = ((hi - lo) / h).ceil().max(1.0) as usize;
            let step = (hi - lo) / cells as f64;
            (0..cells).map(|i| lo + (i as f64 + 0.5) * step).collect()
        };
        let axes = [axis(x_o[0]), axis(x_o[1])];
        let mut weights = Vec::with_capacity(axes[0].len() * axes[1].len());
        for &a in &axes[0] {
            for &b in &axes[1] {
                weights.push(self.log_likelihood(&[a, b], x_o));
            }
        }
        let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for w in weights.iter_mut() {
            *w = (*w - max).exp();
            total += *w;
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(GridPosterior { axes, step: h, weights })
    }
}

impl Simulator for GaussianMixture {
    fn theta_dim(&self) -> usize {
        2
    }

    fn x_dim(&self) -> usize {
        2
    }

    fn simulate(&self, theta: &[f64], seed: u64) -> SimResult {
        check_theta(theta, 2)?;
        let mut rng = seed::rng_from(seed);
        let sd = if rng.random::<bool>() { 1.0 } else { 0.1 };
        Ok(theta
            .iter()
            .map(|t| t + sd * rng.sample::<f64, _>(StandardNormal))
            .collect())
    }
}

impl ReferenceOracle for GaussianMixture {
    fn kind(&self) -> ReferenceKind {
        ReferenceKind::GridImportance
    }

    fn sample_posterior(&self, x_o: &[f64], n: usize, seed: u64) -> Result<ReferenceSamples> {
        let grid = self.grid_posterior(x_o)?;
        let mut cdf = Vec::with_capacity(grid.weights.len());
        let mut acc = 0.0;
        for w in &grid.weights {
            acc += w;
            cdf.push(acc);
        }
        let ncol = grid.axes[1].len();
        let half = |axis: &[f64]| {
            if axis.len() > 1 {
                0.5 * (axis[1] - axis[0])
            } else {
                0.5 * grid.step
            }
        };
        let (ha, hb) = (half(&grid.axes[0]), half(&grid.axes[1]));
        let mut rng = seed::rng_from(seed);
        let samples = (0..n)
            .map(|_| {
                let u = rng.random::<f64>() * acc;
                let cell = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
                let (i, j) = (cell / ncol, cell % ncol);
                vec![
                    grid.axes[0][i] + rng.random_range(-ha..ha),
                    grid.axes[1][j] + rng.random_range(-hb..hb),
                ]
            })
            .collect();
        Ok(ReferenceSamples {
            samples,
            kind: ReferenceKind::GridImportance,
            warning: None,
            acceptance_rate: None,
        })
    }
}
