use rand::Rng as _;
use rand_distr::{StandardNormal, StudentT};

use super::mcmc::{metropolis, MetropolisConfig};
use super::{check_theta, ReferenceKind, ReferenceOracle, ReferenceSamples, SimResult, Simulator};
use crate::error::{check_dim, Result};
use crate::prior::PriorSpec;
use crate::seed;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Simple likelihood, complex posterior: θ ~ U([-3, 3]⁵), four i.i.d. draws from
/// a 2-d Gaussian with mean `(θ₁, θ₂)`, scales `θ₃², θ₄²` and correlation
/// `tanh(θ₅)`, followed by `distractors` coordinates of Student-t (ν = 2) noise
/// that do not depend on θ.
///
/// The likelihood is unchanged by flipping the signs of θ₃ and θ₄, so the
/// posterior has four mirrored modes; the reference sampler runs one chain and
/// applies random sign flips, which is exact under that symmetry.
#[derive(Debug, Clone)]
pub struct Slcp {
    distractors: usize,
    pub mcmc: MetropolisConfig,
    /// Prior draws screened for a Metropolis starting point.
    pub start_candidates: usize,
}

impl Slcp {
    pub const THETA_DIM: usize = 5;
    pub const INFORMATIVE_DIM: usize = 8;
    pub const BOUND: f64 = 3.0;

    pub fn new(distractors: usize) -> Self {
        Slcp {
            distractors,
            mcmc: MetropolisConfig::default(),
            start_candidates: 5_000,
        }
    }

    pub fn prior(&self) -> PriorSpec {
        PriorSpec::uniform_box(&[-Self::BOUND; 5], &[Self::BOUND; 5])
    }

    fn moments(theta: &[f64]) -> ([f64; 2], f64, f64, f64) {
        let s1 = theta[2] * theta[2];
        let s2 = theta[3] * theta[3];
        ([theta[0], theta[1]], s1, s2, theta[4].tanh())
    }

    /// Log-likelihood of the informative coordinates (the distractors are θ-independent).
    pub fn log_likelihood(&self, theta: &[f64], x: &[f64]) -> f64 {
        let (m, s1, s2, rho) = Self::moments(theta);
        let one_m_r2 = 1.0 - rho * rho;
        if s1 <= 0.0 || s2 <= 0.0 || one_m_r2 <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let log_det = 2.0 * (s1.ln() + s2.ln()) + one_m_r2.ln();
        (0..4)
            .map(|k| {
                let a = (x[2 * k] - m[0]) / s1;
                let b = (x[2 * k + 1] - m[1]) / s2;
                let q = (a * a - 2.0 * rho * a * b + b * b) / one_m_r2;
                -0.5 * q - 0.5 * log_det - LN_2PI
            })
            .sum()
    }
}

impl Simulator for Slcp {
    fn theta_dim(&self) -> usize {
        Self::THETA_DIM
    }

    fn x_dim(&self) -> usize {
        Self::INFORMATIVE_DIM + self.distractors
    }

    fn simulate(&self, theta: &[f64], seed: u64) -> SimResult {
        check_theta(theta, Self::THETA_DIM)?;
        let (m, s1, s2, rho) = Self::moments(theta);
        let mut rng = seed::rng_from(seed);
        let mut x = Vec::with_capacity(self.x_dim());
        for _ in 0..4 {
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            x.push(m[0] + s1 * e1);
            x.push(m[1] + s2 * (rho * e1 + (1.0 - rho * rho).sqrt() * e2));
        }
        let t = StudentT::new(2.0).expect("valid degrees of freedom");
        x.extend((0..self.distractors).map(|_| rng.sample(t)));
        Ok(x)
    }
}

impl ReferenceOracle for Slcp {
    fn kind(&self) -> ReferenceKind {
        ReferenceKind::Mcmc
    }

    fn sample_posterior(&self, x_o: &[f64], n: usize, seed: u64) -> Result<ReferenceSamples> {
        check_dim("observation", self.x_dim(), x_o.len())?;
        let prior = self.prior();
        let target = |t: &[f64]| {
            let lp = prior.log_density(t);
            if lp.is_finite() {
                lp + self.log_likelihood(t, x_o)
            } else {
                lp
            }
        };
        let mut rng = seed::rng_from(seed::derive(seed, 0));
        let start = (0..self.start_candidates.max(1))
            .map(|_| prior.sample(&mut rng))
            .map(|t| (target(&t), t))
            .filter(|(lp, _)| lp.is_finite())
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, t)| t)
            .ok_or_else(|| crate::Error::NonFinite("no SLCP start point with finite density".into()))?;
        let out = metropolis(&target, &start, n, &self.mcmc, seed::derive(seed, 1));
        let mut samples = out.samples;
        for s in samples.iter_mut() {
            if rng.random::<bool>() {
                s[2] = -s[2];
            }
            if rng.random::<bool>() {
                s[3] = -s[3];
            }
        }
        Ok(ReferenceSamples {
            samples,
            kind: ReferenceKind::Mcmc,
            warning: out.warning,
            acceptance_rate: Some(out.acceptance_rate),
        })
    }
}
