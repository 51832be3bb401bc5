use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{check_theta, ReferenceKind, ReferenceOracle, ReferenceSamples, SimResult, Simulator};
use crate::error::{Error, Result};
use crate::prior::PriorSpec;
use crate::seed;

/// θ ~ N(0, I), x = θ + ε with ε ~ N(0, 0.25 I). The posterior is
/// N(x / 1.25, 0.2 I).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussian {
    dim: usize,
}

impl LinearGaussian {
    pub const NOISE_VAR: f64 = 0.25;

    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("linear Gaussian task needs d ≥ 1".into()));
        }
        Ok(LinearGaussian { dim })
    }

    pub fn prior(&self) -> PriorSpec {
        PriorSpec::standard_normal(self.dim)
    }

    pub fn posterior_mean(&self, x_o: &[f64]) -> Vec<f64> {
        x_o.iter().map(|x| x / (1.0 + Self::NOISE_VAR)).collect()
    }

    pub fn posterior_var(&self) -> f64 {
        Self::NOISE_VAR / (1.0 + Self::NOISE_VAR)
    }
}

impl Simulator for LinearGaussian {
    fn theta_dim(&self) -> usize {
        self.dim
    }

    fn x_dim(&self) -> usize {
        self.dim
    }

    fn simulate(&self, theta: &[f64], seed: u64) -> SimResult {
        check_theta(theta, self.dim)?;
        let mut rng = seed::rng_from(seed);
        let sd = Self::NOISE_VAR.sqrt();
        Ok(theta
            .iter()
            .map(|t| t + sd * rng.sample::<f64, _>(StandardNormal))
            .collect())
    }
}

impl ReferenceOracle for LinearGaussian {
    fn kind(&self) -> ReferenceKind {
        ReferenceKind::Analytic
    }

    fn sample_posterior(&self, x_o: &[f64], n: usize, seed: u64) -> Result<ReferenceSamples> {
        let mean = self.posterior_mean(x_o);
        let sd = self.posterior_var().sqrt();
        let mut rng = seed::rng_from(seed);
        let samples = (0..n)
            .map(|_| {
                mean.iter()
                    .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Ok(ReferenceSamples {
            samples,
            kind: ReferenceKind::Analytic,
            warning: None,
            acceptance_rate: None,
        })
    }
}
