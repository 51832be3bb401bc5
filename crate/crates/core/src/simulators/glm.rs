use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::mcmc::{metropolis_with_covariance, MetropolisConfig};
use super::{check_theta, ReferenceKind, ReferenceOracle, ReferenceSamples, SimResult, Simulator};
use crate::error::{check_dim, Result};
use crate::prior::PriorSpec;
use crate::seed;

/// Bernoulli GLM with a 9-tap temporal filter plus offset (10 parameters).
///
/// Responses `y_t ~ Bernoulli(σ(β₀ + Σ_j f_j I_{t-j}))` for `t = 0..100` on a
/// fixed white-noise stimulus `I`; the observation is the sufficient statistic
/// `x = Vᵀ y` with `V = [1, lagged stimulus]`. The prior is Gaussian with
/// precision `diag(0.5, FᵀF)`, `F = D² + diag(√(i/9))`, `D` the first-difference
/// matrix, which favours smooth filters. The stimulus is drawn once from
/// N(0, 1) with seed [`BernoulliGlm::STIMULUS_SEED`].
#[derive(Debug, Clone)]
pub struct BernoulliGlm {
    /// `T × 10` design matrix, row-major.
    design: DMatrix<f64>,
    prior_precision: DMatrix<f64>,
    pub mcmc: MetropolisConfig,
}

impl Default for BernoulliGlm {
    fn default() -> Self {
        Self::new()
    }
}

impl BernoulliGlm {
    pub const DIM: usize = 10;
    pub const TIME_STEPS: usize = 100;
    pub const STIMULUS_SEED: u64 = 0x5EED_61AA;

    pub fn new() -> Self {
        let m = Self::DIM - 1;
        let mut rng = seed::rng_from(Self::STIMULUS_SEED);
        let stimulus: Vec<f64> = (0..Self::TIME_STEPS).map(|_| rng.sample(StandardNormal)).collect();
        let mut design = DMatrix::zeros(Self::TIME_STEPS, Self::DIM);
        for t in 0..Self::TIME_STEPS {
            design[(t, 0)] = 1.0;
            for j in 0..m {
                if t >= j {
                    design[(t, j + 1)] = stimulus[t - j];
                }
            }
        }
        let mut diff = DMatrix::<f64>::identity(m, m);
        for i in 1..m {
            diff[(i, i - 1)] = -1.0;
        }
        let mut f = &diff * &diff;
        for i in 0..m {
            f[(i, i)] += (i as f64 / m as f64).sqrt();
        }
        let ftf = f.transpose() * f;
        let mut prior_precision = DMatrix::zeros(Self::DIM, Self::DIM);
        prior_precision[(0, 0)] = 0.5;
        prior_precision.view_mut((1, 1), (m, m)).copy_from(&ftf);
        BernoulliGlm {
            design,
            prior_precision,
            mcmc: MetropolisConfig::default(),
        }
    }

    pub fn prior(&self) -> PriorSpec {
        let prec: Vec<f64> = (0..Self::DIM)
            .flat_map(|i| (0..Self::DIM).map(move |j| (i, j)))
            .map(|(i, j)| self.prior_precision[(i, j)])
            .collect();
        PriorSpec::gaussian_from_precision(vec![0.0; Self::DIM], &prec)
            .expect("GLM prior precision is positive definite")
    }

    pub fn logits(&self, theta: &[f64]) -> DVector<f64> {
        &self.design * DVector::from_column_slice(theta)
    }

    /// `log p(y | θ)` written through the sufficient statistic: `xᵀθ − Σ_t log(1 + e^{ψ_t})`.
    pub fn log_likelihood(&self, theta: &[f64], x: &[f64]) -> f64 {
        let psi = self.logits(theta);
        let dot: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
        dot - psi.iter().map(|&p| softplus(p)).sum::<f64>()
    }

    fn log_posterior(&self, theta: &[f64], x: &[f64]) -> f64 {
        let t = DVector::from_column_slice(theta);
        self.log_likelihood(theta, x) - 0.5 * t.dot(&(&self.prior_precision * &t))
    }

    /// Posterior mode by Newton's method (the log-posterior is concave) and the
    /// inverse negative Hessian there.
    fn laplace(&self, x: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let xv = DVector::from_column_slice(x);
        let mut theta = DVector::zeros(Self::DIM);
        let mut cov = self.prior_precision.clone().try_inverse().expect("invertible prior");
        for _ in 0..50 {
            let psi = &self.design * &theta;
            let p = psi.map(sigmoid);
            let grad = &xv - self.design.transpose() * &p - &self.prior_precision * &theta;
            let w = psi.map(|v| sigmoid(v) * (1.0 - sigmoid(v)));
            let mut h = self.prior_precision.clone();
            for t in 0..Self::TIME_STEPS {
                let row = self.design.row(t);
                h += row.transpose() * row * w[t];
            }
            let Some(inv) = h.try_inverse() else { break };
            let step = &inv * grad;
            theta += &step;
            cov = inv;
            if step.norm() < 1e-10 {
                break;
            }
        }
        (theta.iter().copied().collect(), cov)
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

impl Simulator for BernoulliGlm {
    fn theta_dim(&self) -> usize {
        Self::DIM
    }

    fn x_dim(&self) -> usize {
        Self::DIM
    }

    fn simulate(&self, theta: &[f64], seed: u64) -> SimResult {
        check_theta(theta, Self::DIM)?;
        let mut rng = seed::rng_from(seed);
        let psi = self.logits(theta);
        let mut x = vec![0.0; Self::DIM];
        for t in 0..Self::TIME_STEPS {
            if rng.random::<f64>() < sigmoid(psi[t]) {
                for (j, xj) in x.iter_mut().enumerate() {
                    *xj += self.design[(t, j)];
                }
            }
        }
        Ok(x)
    }
}

impl ReferenceOracle for BernoulliGlm {
    fn kind(&self) -> ReferenceKind {
        ReferenceKind::Mcmc
    }

    fn sample_posterior(&self, x_o: &[f64], n: usize, seed: u64) -> Result<ReferenceSamples> {
        check_dim("observation", Self::DIM, x_o.len())?;
        let (mode, cov) = self.laplace(x_o);
        let target = |t: &[f64]| self.log_posterior(t, x_o);
        let out = metropolis_with_covariance(&target, &mode, Some(&cov), n, &self.mcmc, seed);
        Ok(ReferenceSamples {
            samples: out.samples,
            kind: ReferenceKind::Mcmc,
            warning: out.warning,
            acceptance_rate: Some(out.acceptance_rate),
        })
    }
}
