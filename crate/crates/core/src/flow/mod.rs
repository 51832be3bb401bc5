//! Conditional masked autoregressive flow `q(θ | x)` with consistent MC-dropout.
//!
//! Each transform is an affine MADE block, `z = (u - shift(u_<, x)) · exp(-log_scale(u_<, x))`,
//! with log-scales clamped to `[-7, 7]`. Dropout acts on the hidden units of each
//! block. A [`WeightSample`] pairs a weight snapshot with one frozen dropout mask,
//! so every sampling and density call on it sees the same network and the
//! sample is a proper density over θ for every context.
//!
//! θ and x are z-scored with statistics stored on the flow; densities are
//! reported in the original θ space.

mod checkpoint;
pub mod made;
mod net;

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use checkpoint::{FlowCheckpoint, FLOW_CHECKPOINT_VERSION};
pub use made::{build_masks, BlockMask, LayerMask, MadeMaskSet, PermutationScheme};

use crate::error::{check_dim, Error, Result};
use crate::seed::{self, Rng};
use net::Layout;
pub(crate) use net::{Net, Workspace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub theta_dim: usize,
    pub context_dim: usize,
    pub num_transforms: usize,
    pub hidden_units: usize,
    /// Masked hidden layers per block.
    pub hidden_layers: usize,
    pub dropout_rate: f64,
    pub permutation: PermutationScheme,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            theta_dim: 1,
            context_dim: 1,
            num_transforms: 5,
            hidden_units: 50,
            hidden_layers: 2,
            dropout_rate: 0.25,
            permutation: PermutationScheme::Reverse,
        }
    }
}

impl FlowConfig {
    pub fn new(theta_dim: usize, context_dim: usize) -> Self {
        FlowConfig {
            theta_dim,
            context_dim,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("flow: {msg}")));
        if self.theta_dim == 0 {
            return bad("theta_dim must be at least 1");
        }
        if self.num_transforms == 0 {
            return bad("num_transforms must be at least 1");
        }
        if self.hidden_units == 0 || self.hidden_layers == 0 {
            return bad("hidden_units and hidden_layers must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Binary keep-mask over every maskable hidden unit of the flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutMask {
    pub rate: f64,
    pub seed: u64,
    pub keep: Vec<bool>,
}

impl DropoutMask {
    /// The deterministic network: every unit kept and no rescaling.
    pub fn none(units: usize) -> Self {
        DropoutMask {
            rate: 0.0,
            seed: 0,
            keep: vec![true; units],
        }
    }

    /// Per-unit multipliers: inverted dropout, `1/(1-rate)` for kept units.
    pub fn multipliers(&self) -> Vec<f64> {
        let scale = 1.0 / (1.0 - self.rate);
        self.keep
            .iter()
            .map(|&k| if k { scale } else { 0.0 })
            .collect()
    }

    pub fn dropped_fraction(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        self.keep.iter().filter(|&&k| !k).count() as f64 / self.keep.len() as f64
    }
}

/// Draw a Bernoulli(1 - rate) keep-mask over `units` hidden units.
pub fn sample_weight_mask(rate: f64, units: usize, seed: u64) -> Result<DropoutMask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidInput(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    let mut rng = seed::rng_from(seed);
    let keep = (0..units)
        .map(|_| rate == 0.0 || rng.random::<f64>() >= rate)
        .collect();
    Ok(DropoutMask { rate, seed, keep })
}

/// One concrete network: a weight snapshot with a frozen dropout mask.
#[derive(Debug, Clone)]
pub struct WeightSample {
    pub weights: Arc<Vec<f64>>,
    pub mask: DropoutMask,
    multipliers: Vec<f64>,
}

impl WeightSample {
    pub fn new(weights: Arc<Vec<f64>>, mask: DropoutMask) -> Self {
        let multipliers = mask.multipliers();
        WeightSample {
            weights,
            mask,
            multipliers,
        }
    }

    pub fn mask_seed(&self) -> u64 {
        self.mask.seed
    }
}

/// z-scoring statistics for θ and x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub theta_mean: Vec<f64>,
    pub theta_std: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
}

impl Standardization {
    pub fn identity(d: usize, m: usize) -> Self {
        Standardization {
            theta_mean: vec![0.0; d],
            theta_std: vec![1.0; d],
            x_mean: vec![0.0; m],
            x_std: vec![1.0; m],
        }
    }

    /// Column means and standard deviations; zero spread falls back to 1.
    pub fn fit(thetas: &[Vec<f64>], xs: &[Vec<f64>]) -> Self {
        let (theta_mean, theta_std) = column_moments(thetas);
        let (x_mean, x_std) = column_moments(xs);
        Standardization {
            theta_mean,
            theta_std,
            x_mean,
            x_std,
        }
    }

    fn log_theta_scale(&self) -> f64 {
        self.theta_std.iter().map(|s| s.ln()).sum()
    }
}

fn column_moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in sd.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let sd = sd
        .into_iter()
        .map(|v| {
            let s = v.sqrt();
            if s > 1e-12 && s.is_finite() {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, sd)
}

#[derive(Debug, Clone)]
pub struct Flow {
    config: FlowConfig,
    masks: MadeMaskSet,
    layout: Layout,
    structural: Vec<f64>,
    weights: Arc<Vec<f64>>,
    standardization: Standardization,
    init_seed: u64,
}

impl Flow {
    /// A freshly initialized flow. Output heads start at zero, so the flow is the
    /// identity map and `q(θ|x)` is standard normal (in standardized space).
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let masks = build_masks(&config);
        let layout = Layout::new(&config);
        let structural = layout.structural_mask(&masks);
        let mut rng = seed::rng_from(seed);
        let mut weights = vec![0.0; layout.total];
        for block in &layout.blocks {
            let hidden = &block[..block.len() - 1];
            for lay in hidden {
                let bound = 1.0 / (lay.cols as f64).sqrt();
                for i in 0..lay.rows * lay.cols {
                    let w = rng.random_range(-bound..bound);
                    weights[lay.w + i] = w * structural[lay.w + i];
                }
            }
        }
        let standardization = Standardization::identity(config.theta_dim, config.context_dim);
        Ok(Flow {
            config,
            masks,
            layout,
            structural,
            weights: Arc::new(weights),
            standardization,
            init_seed: seed,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn masks(&self) -> &MadeMaskSet {
        &self.masks
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn num_maskable_units(&self) -> usize {
        self.layout.num_units()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// 1.0 for trainable entries, 0.0 for entries removed by the MADE masks.
    pub fn structural_mask(&self) -> &[f64] {
        &self.structural
    }

    /// Replace the weights; entries outside the MADE connectivity are forced to zero.
    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        check_dim("flow weights", self.layout.total, weights.len())?;
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("flow weights".into()));
        }
        let masked = weights
            .iter()
            .zip(&self.structural)
            .map(|(w, m)| w * m)
            .collect();
        self.weights = Arc::new(masked);
        Ok(())
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    pub fn set_standardization(&mut self, s: Standardization) -> Result<()> {
        check_dim("theta standardization", self.config.theta_dim, s.theta_mean.len())?;
        check_dim("theta standardization", self.config.theta_dim, s.theta_std.len())?;
        check_dim("x standardization", self.config.context_dim, s.x_mean.len())?;
        check_dim("x standardization", self.config.context_dim, s.x_std.len())?;
        self.standardization = s;
        Ok(())
    }

    /// Draw a dropout mask at the configured rate.
    pub fn sample_weight_mask(&self, seed: u64) -> Result<DropoutMask> {
        sample_weight_mask(self.config.dropout_rate, self.num_maskable_units(), seed)
    }

    /// Current weights with the given mask.
    pub fn weight_sample(&self, mask: DropoutMask) -> Result<WeightSample> {
        check_dim("dropout mask", self.num_maskable_units(), mask.keep.len())?;
        Ok(WeightSample::new(Arc::clone(&self.weights), mask))
    }

    /// Current weights with a fresh mask drawn from `seed`.
    pub fn draw_weight_sample(&self, seed: u64) -> Result<WeightSample> {
        self.weight_sample(self.sample_weight_mask(seed)?)
    }

    /// Current weights without dropout (the averaged network).
    pub fn mean_weights(&self) -> WeightSample {
        WeightSample::new(
            Arc::clone(&self.weights),
            DropoutMask::none(self.num_maskable_units()),
        )
    }

    /// `count` weight samples with seeds derived from `seed`.
    pub fn weight_samples(&self, count: usize, seed: u64) -> Result<Vec<WeightSample>> {
        (0..count)
            .map(|s| self.draw_weight_sample(seed::derive(seed, s as u64)))
            .collect()
    }

    fn net<'a>(&'a self, phi: &'a WeightSample) -> Result<Net<'a>> {
        check_dim("weight sample", self.layout.total, phi.weights.len())?;
        check_dim("dropout mask", self.layout.num_units(), phi.multipliers.len())?;
        Ok(Net {
            layout: &self.layout,
            masks: &self.masks,
            weights: &phi.weights,
            units: &phi.multipliers,
        })
    }

    pub(crate) fn standardize_theta(&self, theta: &[f64]) -> Vec<f64> {
        let s = &self.standardization;
        theta
            .iter()
            .zip(&s.theta_mean)
            .zip(&s.theta_std)
            .map(|((t, m), sd)| (t - m) / sd)
            .collect()
    }

    pub(crate) fn standardize_x(&self, x: &[f64]) -> Vec<f64> {
        let s = &self.standardization;
        x.iter()
            .zip(&s.x_mean)
            .zip(&s.x_std)
            .map(|((t, m), sd)| (t - m) / sd)
            .collect()
    }

    fn unstandardize_theta(&self, u: &[f64]) -> Vec<f64> {
        let s = &self.standardization;
        u.iter()
            .zip(&s.theta_mean)
            .zip(&s.theta_std)
            .map(|((v, m), sd)| v * sd + m)
            .collect()
    }

    fn check_inputs(&self, theta: &[f64], x: &[f64]) -> Result<()> {
        check_dim("theta", self.config.theta_dim, theta.len())?;
        check_dim("context", self.config.context_dim, x.len())
    }

    /// Exact log-density `log q(θ | x)` under the weight sample `phi`.
    pub fn log_prob(&self, theta: &[f64], x: &[f64], phi: &WeightSample) -> Result<f64> {
        self.check_inputs(theta, x)?;
        let net = self.net(phi)?;
        let mut ws = Workspace::new(&self.layout);
        let lp = net.forward(&self.standardize_theta(theta), &self.standardize_x(x), &mut ws)
            - self.standardization.log_theta_scale();
        finite(lp, "log_prob")
    }

    /// Log-densities of many θ under one context and one weight sample.
    pub fn log_prob_batch(
        &self,
        thetas: &[Vec<f64>],
        x: &[f64],
        phi: &WeightSample,
    ) -> Result<Vec<f64>> {
        check_dim("context", self.config.context_dim, x.len())?;
        let net = self.net(phi)?;
        let c = self.standardize_x(x);
        let shift = self.standardization.log_theta_scale();
        let mut ws = Workspace::new(&self.layout);
        thetas
            .iter()
            .map(|t| {
                check_dim("theta", self.config.theta_dim, t.len())?;
                let lp = net.forward(&self.standardize_theta(t), &c, &mut ws) - shift;
                finite(lp, "log_prob")
            })
            .collect()
    }

    /// Like [`Flow::log_prob_batch`] but maps non-finite values to `-inf`
    /// instead of failing.
    pub fn log_prob_each(&self, thetas: &[Vec<f64>], x: &[f64], phi: &WeightSample) -> Result<Vec<f64>> {
        check_dim("context", self.config.context_dim, x.len())?;
        let net = self.net(phi)?;
        let c = self.standardize_x(x);
        let shift = self.standardization.log_theta_scale();
        let mut ws = Workspace::new(&self.layout);
        thetas
            .iter()
            .map(|t| {
                check_dim("theta", self.config.theta_dim, t.len())?;
                let lp = net.forward(&self.standardize_theta(t), &c, &mut ws) - shift;
                Ok(if lp.is_nan() { f64::NEG_INFINITY } else { lp.min(f64::MAX) })
            })
            .collect()
    }

    /// Latent `z(θ, x)` in standardized coordinates.
    pub fn forward_transform(&self, theta: &[f64], x: &[f64], phi: &WeightSample) -> Result<Vec<f64>> {
        self.check_inputs(theta, x)?;
        let net = self.net(phi)?;
        let mut ws = Workspace::new(&self.layout);
        net.forward(&self.standardize_theta(theta), &self.standardize_x(x), &mut ws);
        Ok(ws.latent().to_vec())
    }

    /// θ from a latent `z` (inverse of [`Flow::forward_transform`]).
    pub fn inverse_transform(&self, z: &[f64], x: &[f64], phi: &WeightSample) -> Result<Vec<f64>> {
        check_dim("latent", self.config.theta_dim, z.len())?;
        check_dim("context", self.config.context_dim, x.len())?;
        let net = self.net(phi)?;
        let mut ws = Workspace::new(&self.layout);
        let u = net.inverse(z, &self.standardize_x(x), &mut ws);
        Ok(self.unstandardize_theta(&u))
    }

    /// Draw `n` parameter vectors from `q(θ | x)` under `phi`.
    pub fn sample(&self, n: usize, x: &[f64], phi: &WeightSample, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        check_dim("context", self.config.context_dim, x.len())?;
        let net = self.net(phi)?;
        let c = self.standardize_x(x);
        let mut ws = Workspace::new(&self.layout);
        let d = self.config.theta_dim;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            out.push(self.unstandardize_theta(&net.inverse(&z, &c, &mut ws)));
        }
        Ok(out)
    }

    /// `log (1/S Σ_s q(θ | x, φ_s))`, computed with a max shift.
    pub fn marginal_log_prob(&self, theta: &[f64], x: &[f64], phis: &[WeightSample]) -> Result<f64> {
        if phis.is_empty() {
            return Err(Error::InvalidInput("marginal_log_prob needs at least one weight sample".into()));
        }
        let logs: Vec<f64> = phis
            .iter()
            .map(|phi| self.log_prob(theta, x, phi).unwrap_or(f64::NEG_INFINITY))
            .collect();
        log_mean_exp(&logs).ok_or_else(|| Error::NonFinite("marginal_log_prob: every component failed".into()))
    }

    /// `(log q(θ|x), ∂ log q / ∂ weights)` by reverse-mode differentiation.
    /// Entries outside the MADE connectivity and weights of dropped units get zero.
    pub fn grad_log_prob(&self, theta: &[f64], x: &[f64], phi: &WeightSample) -> Result<(f64, Vec<f64>)> {
        self.check_inputs(theta, x)?;
        let mut grad = vec![0.0; self.layout.total];
        let mut ws = Workspace::new(&self.layout);
        let lp = self.accumulate_grad(
            &self.standardize_theta(theta),
            &self.standardize_x(x),
            phi,
            1.0,
            &mut ws,
            &mut grad,
        )?;
        self.apply_structural_mask(&mut grad);
        Ok((lp, grad))
    }

    /// Network view over arbitrary weights and per-unit dropout multipliers.
    pub(crate) fn raw_net<'a>(&'a self, weights: &'a [f64], units: &'a [f64]) -> Net<'a> {
        Net {
            layout: &self.layout,
            masks: &self.masks,
            weights,
            units,
        }
    }

    pub(crate) fn log_theta_scale(&self) -> f64 {
        self.standardization.log_theta_scale()
    }

    pub(crate) fn new_workspace(&self) -> Workspace {
        Workspace::new(&self.layout)
    }

    /// Standardized-input log-density (original θ-space units) with caches kept in `ws`.
    pub(crate) fn forward_std(&self, u: &[f64], c: &[f64], phi: &WeightSample, ws: &mut Workspace) -> Result<f64> {
        let net = self.net(phi)?;
        let lp = net.forward(u, c, ws) - self.standardization.log_theta_scale();
        finite(lp, "log_prob")
    }

    /// Backward pass for the last `forward_std` call held in `ws`.
    pub(crate) fn backward_std(&self, phi: &WeightSample, coef: f64, ws: &mut Workspace, grad: &mut [f64]) -> Result<()> {
        let net = self.net(phi)?;
        net.backward(coef, ws, grad);
        Ok(())
    }

    fn accumulate_grad(
        &self,
        u: &[f64],
        c: &[f64],
        phi: &WeightSample,
        coef: f64,
        ws: &mut Workspace,
        grad: &mut [f64],
    ) -> Result<f64> {
        let lp = self.forward_std(u, c, phi, ws)?;
        self.backward_std(phi, coef, ws, grad)?;
        Ok(lp)
    }

    pub(crate) fn apply_structural_mask(&self, grad: &mut [f64]) {
        for (g, m) in grad.iter_mut().zip(&self.structural) {
            *g *= m;
        }
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `log(mean(exp(values)))` with a max shift; `None` if every value is non-finite.
pub fn log_mean_exp(values: &[f64]) -> Option<f64> {
    let max = values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let sum: f64 = values
        .iter()
        .filter(|v| v.is_finite())
        .map(|v| (v - max).exp())
        .sum();
    Some(max + (sum / values.len() as f64).ln())
}

#[cfg(test)]
mod tests;
