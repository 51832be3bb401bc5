//! Proposal-corrected training of the flow on the accumulated simulation data.
//!
//! The atomic loss for a pair `(θ_i, x_i)` contrasts `θ_i` against `M - 1` other
//! parameters from the same minibatch:
//!
//! ```text
//! logit_k = log q(θ_k | x_i) - log p(θ_k)
//! loss_i  = -logit_i + log Σ_k exp(logit_k)
//! ```
//!
//! so the flow is fitted to the posterior whatever proposal produced the data.

use std::path::Path;

use log::{debug, warn};
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Flow, Workspace};
use crate::seed::{self, Rng};

/// One simulated pair with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub theta: Vec<f64>,
    pub x: Vec<f64>,
    pub round: usize,
    pub prior_log_density: f64,
    pub proposal_log_density: f64,
}

/// All pairs simulated so far, in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundDataset {
    pairs: Vec<Pair>,
}

impl RoundDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, pair: Pair) -> Result<()> {
        if !pair.prior_log_density.is_finite() {
            return Err(Error::OutsideSupport(format!(
                "θ = {:?} has zero prior density",
                pair.theta
            )));
        }
        if let Some(last) = self.pairs.last() {
            if pair.round < last.round {
                return Err(Error::InvalidInput(format!(
                    "round {} appended after round {}",
                    pair.round, last.round
                )));
            }
            if pair.theta.len() != last.theta.len() || pair.x.len() != last.x.len() {
                return Err(Error::DimensionMismatch {
                    what: "dataset pair",
                    expected: last.theta.len() + last.x.len(),
                    got: pair.theta.len() + pair.x.len(),
                });
            }
        }
        if pair.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("simulator output".into()));
        }
        self.pairs.push(pair);
        Ok(())
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn thetas(&self) -> Vec<Vec<f64>> {
        self.pairs.iter().map(|p| p.theta.clone()).collect()
    }

    pub fn xs(&self) -> Vec<Vec<f64>> {
        self.pairs.iter().map(|p| p.x.clone()).collect()
    }

    /// Number of pairs contributed by each round, indexed by round.
    pub fn round_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        for p in &self.pairs {
            if sizes.len() <= p.round {
                sizes.resize(p.round + 1, 0);
            }
            sizes[p.round] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Contrastive softmax over atoms; valid for any proposal.
    Atomic,
    /// Plain `-log q(θ|x)`; only valid when every θ came from the prior.
    MaximumLikelihood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub atoms: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub validation_fraction: f64,
    pub patience: usize,
    /// Rescale the gradient when its Euclidean norm exceeds this value.
    pub clip_grad_norm: Option<f64>,
    /// Loss used while every pair in the dataset was drawn from the prior.
    pub prior_only_loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            atoms: 10,
            batch_size: 50,
            learning_rate: 5e-4,
            max_epochs: 2000,
            validation_fraction: 0.1,
            patience: 20,
            clip_grad_norm: Some(5.0),
            prior_only_loss: LossKind::MaximumLikelihood,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("train: {msg}")));
        if self.atoms == 0 {
            return bad("atoms must be at least 1");
        }
        if self.atoms > self.batch_size {
            return bad("atoms must not exceed batch_size");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return bad("validation_fraction must lie in (0, 0.5]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if matches!(self.clip_grad_norm, Some(c) if c <= 0.0 || c.is_nan()) {
            return bad("clip_grad_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub loss: LossKind,
    /// Validation loss of the weights before the first update.
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose weights were restored; `None` if no epoch beat the initial weights.
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::csvio::write_rows(
            path,
            "training_log",
            1,
            &["epoch", "train_loss", "val_loss", "learning_rate"],
            &self.epochs,
        )
    }
}

/// Inputs of one training run already mapped to the flow's standardized space.
struct Standardized {
    u: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    prior: Vec<f64>,
}

impl Standardized {
    fn new(flow: &Flow, pairs: &[Pair]) -> Self {
        Standardized {
            u: pairs.iter().map(|p| flow.standardize_theta(&p.theta)).collect(),
            c: pairs.iter().map(|p| flow.standardize_x(&p.x)).collect(),
            prior: pairs.iter().map(|p| p.prior_log_density).collect(),
        }
    }
}

/// Scratch state reused across minibatches.
struct Scratch {
    workspaces: Vec<Workspace>,
    units: Vec<f64>,
    logits: Vec<f64>,
    atoms: Vec<usize>,
}

impl Scratch {
    fn new(flow: &Flow, atoms: usize) -> Self {
        Scratch {
            workspaces: (0..atoms.max(1)).map(|_| flow.new_workspace()).collect(),
            units: vec![1.0; flow.num_maskable_units()],
            logits: vec![0.0; atoms.max(1)],
            atoms: Vec::with_capacity(atoms),
        }
    }
}

/// Mean loss over `batch` (indices into `data`), accumulating its weight gradient.
/// With `dropout`, each example gets its own freshly drawn unit mask.
#[allow(clippy::too_many_arguments)]
fn batch_loss(
    flow: &Flow,
    weights: &[f64],
    data: &Standardized,
    batch: &[usize],
    kind: LossKind,
    atoms: usize,
    dropout: Option<f64>,
    rng: &mut Rng,
    scratch: &mut Scratch,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    let n = batch.len();
    let m = match kind {
        LossKind::Atomic => atoms.min(n),
        LossKind::MaximumLikelihood => 1,
    };
    let mut total = 0.0;
    for (pos, &i) in batch.iter().enumerate() {
        if let Some(rate) = dropout {
            let scale = 1.0 / (1.0 - rate);
            for v in scratch.units.iter_mut() {
                *v = if rng.random::<f64>() >= rate { scale } else { 0.0 };
            }
        }
        let net = flow.raw_net(weights, &scratch.units);
        let shift = flow.log_theta_scale();
        scratch.atoms.clear();
        scratch.atoms.push(i);
        if m > 1 {
            // m - 1 distinct partners from the rest of the batch.
            for j in index::sample(rng, n - 1, m - 1) {
                let j = if j >= pos { j + 1 } else { j };
                scratch.atoms.push(batch[j]);
            }
        }
        for (k, &a) in scratch.atoms.iter().enumerate() {
            let lq = net.forward(&data.u[a], &data.c[i], &mut scratch.workspaces[k]) - shift;
            if !lq.is_finite() {
                return Err(Error::NonFinite("log density during training".into()));
            }
            scratch.logits[k] = match kind {
                LossKind::Atomic => lq - data.prior[a],
                LossKind::MaximumLikelihood => lq,
            };
        }
        let logits = &scratch.logits[..m];
        let loss = if m == 1 && kind == LossKind::Atomic {
            0.0
        } else if kind == LossKind::MaximumLikelihood {
            -logits[0]
        } else {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            lse - logits[0]
        };
        total += loss;
        if let Some(g) = grad.as_deref_mut() {
            match kind {
                LossKind::MaximumLikelihood => {
                    net.backward(-1.0 / n as f64, &mut scratch.workspaces[0], g);
                }
                LossKind::Atomic if m > 1 => {
                    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                    for k in 0..m {
                        let softmax = (scratch.logits[k] - max).exp() / z;
                        let coef = (softmax - if k == 0 { 1.0 } else { 0.0 }) / n as f64;
                        net.backward(coef, &mut scratch.workspaces[k], g);
                    }
                }
                LossKind::Atomic => {}
            }
        }
    }
    Ok(total / n as f64)
}

/// Loss and gradient of `flow`'s current weights without dropout.
#[derive(Debug, Clone)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Atomic loss over `batch` with the deterministic (no-dropout) network. Atoms
/// for each example are drawn without replacement from the rest of the batch.
pub fn apt_loss(flow: &Flow, batch: &[Pair], atoms: usize, rng: &mut Rng) -> Result<LossAndGrad> {
    loss_with_kind(flow, batch, LossKind::Atomic, atoms, rng)
}

/// Mean loss of the requested kind with its weight gradient.
pub fn loss_with_kind(
    flow: &Flow,
    batch: &[Pair],
    kind: LossKind,
    atoms: usize,
    rng: &mut Rng,
) -> Result<LossAndGrad> {
    if batch.is_empty() || atoms == 0 || (kind == LossKind::Atomic && atoms > batch.len()) {
        return Err(Error::InvalidInput(format!(
            "need batch size ≥ atoms ≥ 1, got batch {} and atoms {atoms}",
            batch.len()
        )));
    }
    for p in batch {
        crate::error::check_dim("theta", flow.config().theta_dim, p.theta.len())?;
        crate::error::check_dim("x", flow.config().context_dim, p.x.len())?;
    }
    let data = Standardized::new(flow, batch);
    let idx: Vec<usize> = (0..batch.len()).collect();
    let mut scratch = Scratch::new(flow, atoms);
    let mut grad = vec![0.0; flow.num_params()];
    let loss = batch_loss(
        flow,
        flow.weights(),
        &data,
        &idx,
        kind,
        atoms,
        None,
        rng,
        &mut scratch,
        Some(&mut grad),
    )?;
    flow.apply_structural_mask(&mut grad);
    Ok(LossAndGrad { loss, grad })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, weights: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for ((w, g), (m, v)) in weights
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Train `flow` in place on `data` and return the per-epoch log.
///
/// The flow's standardization is used as is; fit it before the first round.
/// Validation uses the no-dropout network and a fixed atom draw so epochs are
/// comparable. The weights with the lowest validation loss (including the
/// starting weights) are restored at the end.
pub fn train_round(flow: &mut Flow, data: &RoundDataset, config: &TrainConfig) -> Result<TrainingLog> {
    config.validate()?;
    let kind = if data.pairs.iter().all(|p| p.round == 0) {
        config.prior_only_loss
    } else {
        LossKind::Atomic
    };
    let n = data.len();
    let min_pairs = if kind == LossKind::Atomic { config.atoms.max(2) } else { 2 };
    if n < min_pairs {
        return Err(Error::InvalidInput(format!(
            "dataset has {n} pairs, training needs at least {min_pairs}"
        )));
    }
    for p in &data.pairs {
        crate::error::check_dim("theta", flow.config().theta_dim, p.theta.len())?;
        crate::error::check_dim("x", flow.config().context_dim, p.x.len())?;
    }
    let mut rng = seed::rng_from(config.seed);
    let std_data = Standardized::new(flow, &data.pairs);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((config.validation_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_seed = rng.random::<u64>();

    let dropout = (flow.config().dropout_rate > 0.0).then_some(flow.config().dropout_rate);
    let mut scratch = Scratch::new(flow, config.atoms);
    let mut weights = flow.weights().to_vec();
    let mut grad = vec![0.0; weights.len()];
    let mut adam = Adam::new(weights.len());
    let mut lr = config.learning_rate;
    let mut halved = false;

    let val_loss = |w: &[f64], scratch: &mut Scratch| -> Result<f64> {
        scratch.units.iter_mut().for_each(|u| *u = 1.0);
        let mut vrng = seed::rng_from(val_seed);
        batch_loss(flow, w, &std_data, val_idx, kind, config.atoms, None, &mut vrng, scratch, None)
    };
    let initial_val_loss = val_loss(&weights, &mut scratch)?;
    let mut best_val = initial_val_loss;
    let mut best_weights = weights.clone();
    let mut best_epoch = None;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for batch in train_idx.chunks(config.batch_size) {
            loop {
                grad.iter_mut().for_each(|g| *g = 0.0);
                let result = batch_loss(
                    flow,
                    &weights,
                    &std_data,
                    batch,
                    kind,
                    config.atoms,
                    dropout,
                    &mut rng,
                    &mut scratch,
                    Some(&mut grad),
                );
                let loss = match result {
                    Ok(l) if l.is_finite() && grad.iter().all(|g| g.is_finite()) => l,
                    _ if !halved => {
                        halved = true;
                        lr *= 0.5;
                        warn!("non-finite loss at epoch {epoch}; halving learning rate to {lr}");
                        continue;
                    }
                    Ok(_) | Err(Error::NonFinite(_)) => {
                        return Err(Error::TrainingAborted(format!(
                            "non-finite loss at epoch {epoch} after halving the learning rate"
                        )))
                    }
                    Err(e) => return Err(e),
                };
                flow.apply_structural_mask(&mut grad);
                if let Some(max_norm) = config.clip_grad_norm {
                    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                    if norm > max_norm {
                        let s = max_norm / norm;
                        grad.iter_mut().for_each(|g| *g *= s);
                    }
                }
                adam.step(&mut weights, &grad, lr);
                sum += loss * batch.len() as f64;
                count += batch.len();
                break;
            }
        }
        let vl = match val_loss(&weights, &mut scratch) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        epochs.push(EpochLog {
            epoch,
            train_loss: sum / count.max(1) as f64,
            val_loss: vl,
            learning_rate: lr,
        });
        if vl < best_val {
            best_val = vl;
            best_weights.copy_from_slice(&weights);
            best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    debug!(
        "trained {} epochs ({kind:?}), best validation loss {best_val:.4} at {best_epoch:?}",
        epochs.len()
    );
    flow.set_weights(best_weights)?;
    Ok(TrainingLog {
        loss: kind,
        initial_val_loss,
        epochs,
        best_epoch,
        best_val_loss: best_val,
        stopped_early,
    })
}

/// Write rows of a serializable table as CSV with the given header.
#[cfg(test)]
mod tests;
