//! Prior distributions over simulator parameters.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{check_dim, Error, Result};
use crate::seed::Rng;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// One independent coordinate of a factorized prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Marginal {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, sd: f64 },
    /// Normal restricted to `[lower, upper]`; either bound may be infinite.
    TruncatedNormal {
        mean: f64,
        sd: f64,
        lower: f64,
        upper: f64,
    },
}

fn std_normal() -> Normal {
    Normal::standard()
}

impl Marginal {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Marginal::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
            Marginal::Normal { mean, sd } => mean.is_finite() && sd > 0.0,
            Marginal::TruncatedNormal {
                mean,
                sd,
                lower,
                upper,
            } => mean.is_finite() && sd > 0.0 && lower < upper,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid prior marginal {self:?}")))
        }
    }

    pub fn in_support(&self, v: f64) -> bool {
        match *self {
            Marginal::Uniform { low, high } => v >= low && v <= high,
            Marginal::Normal { .. } => v.is_finite(),
            Marginal::TruncatedNormal { lower, upper, .. } => v >= lower && v <= upper,
        }
    }

    /// Probability mass of `[lower, upper]` under the untruncated normal.
    fn truncation_mass(mean: f64, sd: f64, lower: f64, upper: f64) -> f64 {
        let n = std_normal();
        n.cdf((upper - mean) / sd) - n.cdf((lower - mean) / sd)
    }

    pub fn log_density(&self, v: f64) -> f64 {
        if !self.in_support(v) {
            return f64::NEG_INFINITY;
        }
        match *self {
            Marginal::Uniform { low, high } => -(high - low).ln(),
            Marginal::Normal { mean, sd } => {
                let z = (v - mean) / sd;
                -0.5 * z * z - sd.ln() - HALF_LN_2PI
            }
            Marginal::TruncatedNormal {
                mean,
                sd,
                lower,
                upper,
            } => {
                let z = (v - mean) / sd;
                -0.5 * z * z
                    - sd.ln()
                    - HALF_LN_2PI
                    - Self::truncation_mass(mean, sd, lower, upper).ln()
            }
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            Marginal::Uniform { low, high } => rng.random_range(low..high),
            Marginal::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            Marginal::TruncatedNormal {
                mean,
                sd,
                lower,
                upper,
            } => {
                let n = std_normal();
                let a = n.cdf((lower - mean) / sd);
                let b = n.cdf((upper - mean) / sd);
                if b - a > 0.05 {
                    // Plain rejection is cheap when the window holds enough mass.
                    loop {
                        let v = mean + sd * rng.sample::<f64, _>(StandardNormal);
                        if v >= lower && v <= upper {
                            return v;
                        }
                    }
                }
                // In the upper tail the cdf rounds to 1; work with the mirrored
                // lower tail instead, where small probabilities stay representable.
                let (lo_z, hi_z) = ((lower - mean) / sd, (upper - mean) / sd);
                let mirrored = lo_z > 0.0;
                let (a, b) = if mirrored { (n.cdf(-hi_z), n.cdf(-lo_z)) } else { (a, b) };
                if a >= b {
                    // No representable mass at all: the bound nearest the mean.
                    return if mirrored { lower } else { upper };
                }
                let z = n.inverse_cdf(rng.random_range(a..b));
                (mean + sd * if mirrored { -z } else { z }).clamp(lower, upper)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Marginal::Uniform { low, high } => 0.5 * (low + high),
            Marginal::Normal { mean, .. } => mean,
            Marginal::TruncatedNormal {
                mean,
                sd,
                lower,
                upper,
            } => {
                let n = std_normal();
                let (a, b) = ((lower - mean) / sd, (upper - mean) / sd);
                let pdf = |x: f64| {
                    if x.is_finite() {
                        (-0.5 * x * x - HALF_LN_2PI).exp()
                    } else {
                        0.0
                    }
                };
                mean + sd * (pdf(a) - pdf(b)) / (n.cdf(b) - n.cdf(a))
            }
        }
    }
}

/// Prior `p(θ)`: either a product of independent marginals or a correlated Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    Factorized { marginals: Vec<Marginal> },
    /// `N(mean, cov)`, parameterized by the lower Cholesky factor of `cov` (row-major).
    Gaussian { mean: Vec<f64>, cov_cholesky: Vec<f64> },
}

impl PriorSpec {
    pub fn uniform_box(low: &[f64], high: &[f64]) -> Self {
        PriorSpec::Factorized {
            marginals: low
                .iter()
                .zip(high)
                .map(|(&low, &high)| Marginal::Uniform { low, high })
                .collect(),
        }
    }

    pub fn standard_normal(d: usize) -> Self {
        PriorSpec::Factorized {
            marginals: vec![Marginal::Normal { mean: 0.0, sd: 1.0 }; d],
        }
    }

    /// Independent normals truncated to `[lower, ∞)`.
    pub fn truncated_normal(mean: &[f64], sd: &[f64], lower: f64) -> Self {
        PriorSpec::Factorized {
            marginals: mean
                .iter()
                .zip(sd)
                .map(|(&mean, &sd)| Marginal::TruncatedNormal {
                    mean,
                    sd,
                    lower,
                    upper: f64::INFINITY,
                })
                .collect(),
        }
    }

    /// Correlated Gaussian from a precision matrix (row-major, `d × d`).
    pub fn gaussian_from_precision(mean: Vec<f64>, precision: &[f64]) -> Result<Self> {
        let d = mean.len();
        check_dim("precision matrix", d * d, precision.len())?;
        let prec = DMatrix::from_row_slice(d, d, precision);
        let cov = prec
            .try_inverse()
            .ok_or_else(|| Error::InvalidConfig("singular prior precision".into()))?;
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::InvalidConfig("prior covariance not positive definite".into()))?;
        let l = chol.l();
        let cov_cholesky = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| l[(i, j)]).collect();
        Ok(PriorSpec::Gaussian { mean, cov_cholesky })
    }

    pub fn dim(&self) -> usize {
        match self {
            PriorSpec::Factorized { marginals } => marginals.len(),
            PriorSpec::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PriorSpec::Factorized { marginals } => {
                if marginals.is_empty() {
                    return Err(Error::InvalidConfig("prior has no dimensions".into()));
                }
                marginals.iter().try_for_each(Marginal::validate)
            }
            PriorSpec::Gaussian { mean, cov_cholesky } => {
                check_dim("prior cholesky", mean.len() * mean.len(), cov_cholesky.len())?;
                let d = mean.len();
                if (0..d).any(|i| cov_cholesky[i * d + i] <= 0.0) {
                    return Err(Error::InvalidConfig("prior cholesky diagonal must be positive".into()));
                }
                Ok(())
            }
        }
    }

    pub fn in_support(&self, theta: &[f64]) -> bool {
        if theta.len() != self.dim() {
            return false;
        }
        match self {
            PriorSpec::Factorized { marginals } => {
                marginals.iter().zip(theta).all(|(m, &v)| m.in_support(v))
            }
            PriorSpec::Gaussian { .. } => theta.iter().all(|v| v.is_finite()),
        }
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        if !self.in_support(theta) {
            return f64::NEG_INFINITY;
        }
        match self {
            PriorSpec::Factorized { marginals } => {
                marginals.iter().zip(theta).map(|(m, &v)| m.log_density(v)).sum()
            }
            PriorSpec::Gaussian { mean, cov_cholesky } => {
                let d = mean.len();
                let l = DMatrix::from_row_slice(d, d, cov_cholesky);
                let r = DVector::from_iterator(d, theta.iter().zip(mean).map(|(t, m)| t - m));
                let w = l
                    .solve_lower_triangular(&r)
                    .expect("cholesky factor has positive diagonal");
                let log_det: f64 = (0..d).map(|i| l[(i, i)].ln()).sum();
                -0.5 * w.norm_squared() - log_det - d as f64 * HALF_LN_2PI
            }
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        match self {
            PriorSpec::Factorized { marginals } => marginals.iter().map(|m| m.sample(rng)).collect(),
            PriorSpec::Gaussian { mean, cov_cholesky } => {
                let d = mean.len();
                let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                (0..d)
                    .map(|i| mean[i] + (0..=i).map(|j| cov_cholesky[i * d + j] * eps[j]).sum::<f64>())
                    .collect()
            }
        }
    }

    pub fn sample_n(&self, n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            PriorSpec::Factorized { marginals } => marginals.iter().map(Marginal::mean).collect(),
            PriorSpec::Gaussian { mean, .. } => mean.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn uniform_box_density_integrates_to_one() {
        let prior = PriorSpec::uniform_box(&[-1.0, 0.0], &[1.0, 4.0]);
        assert!((prior.log_density(&[0.0, 1.0]) - (1.0f64 / 8.0).ln()).abs() < 1e-12);
        assert_eq!(prior.log_density(&[2.0, 1.0]), f64::NEG_INFINITY);
        let step = 0.02;
        let mut mass = 0.0;
        for i in 0..150 {
            for j in 0..300 {
                let t = [-1.5 + (i as f64 + 0.5) * step, -0.5 + (j as f64 + 0.5) * step];
                mass += prior.log_density(&t).exp() * step * step;
            }
        }
        assert!((mass - 1.0).abs() < 1e-9, "{mass}");
    }

    #[test]
    fn truncated_normal_integrates_and_samples_in_support() {
        let prior = PriorSpec::truncated_normal(&[1.0, -2.0], &[2.0, 1.0], 0.0);
        let step = 0.01;
        let mut mass = 0.0;
        for i in 0..1500 {
            for j in 0..1000 {
                let t = [(i as f64 + 0.5) * step, (j as f64 + 0.5) * step];
                mass += prior.log_density(&t).exp() * step * step;
            }
        }
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
        let mut rng = seed::rng_from(1);
        let draws = prior.sample_n(20_000, &mut rng);
        assert!(draws.iter().all(|t| prior.in_support(t)));
        let m1 = draws.iter().map(|t| t[1]).sum::<f64>() / draws.len() as f64;
        assert!((m1 - prior.mean()[1]).abs() < 0.02, "{m1} vs {}", prior.mean()[1]);
    }

    #[test]
    fn gaussian_from_precision_matches_density() {
        let prior = PriorSpec::gaussian_from_precision(vec![0.0, 1.0], &[2.0, 0.5, 0.5, 1.0]).unwrap();
        // Density via precision directly.
        let t = [0.3, 0.2];
        let r = [0.3, -0.8];
        let quad = 2.0 * r[0] * r[0] + 2.0 * 0.5 * r[0] * r[1] + r[1] * r[1];
        let det_prec: f64 = 2.0 * 1.0 - 0.25;
        let expected = -0.5 * quad + 0.5 * det_prec.ln() - (2.0 * std::f64::consts::PI).ln();
        assert!((prior.log_density(&t) - expected).abs() < 1e-12);
        let mut rng = seed::rng_from(3);
        let draws = prior.sample_n(40_000, &mut rng);
        let mean1 = draws.iter().map(|t| t[1]).sum::<f64>() / 4e4;
        assert!((mean1 - 1.0).abs() < 0.02);
    }

    #[test]
    fn invalid_marginals_are_rejected() {
        let p = PriorSpec::uniform_box(&[1.0], &[0.0]);
        assert!(p.validate().is_err());
        let p = PriorSpec::Factorized { marginals: vec![] };
        assert!(p.validate().is_err());
    }

    #[test]
    fn far_tail_truncation_uses_inverse_cdf() {
        let m = Marginal::TruncatedNormal {
            mean: -20.0,
            sd: 1.0,
            lower: 0.0,
            upper: f64::INFINITY,
        };
        let mut rng = seed::rng_from(4);
        let draws: Vec<f64> = (0..100).map(|_| m.sample(&mut rng)).collect();
        assert!(draws.iter().all(|v| *v >= 0.0 && v.is_finite()));
        // The conditional law is close to Exp(rate 20) above the bound.
        let mean = draws.iter().sum::<f64>() / 100.0;
        assert!(mean > 0.0 && mean < 0.15, "{mean}");
        let lower_tail = Marginal::TruncatedNormal {
            mean: 20.0,
            sd: 1.0,
            lower: f64::NEG_INFINITY,
            upper: 0.0,
        };
        assert!((0..100).all(|_| {
            let v = lower_tail.sample(&mut rng);
            v <= 0.0 && v.is_finite()
        }));
    }
}
