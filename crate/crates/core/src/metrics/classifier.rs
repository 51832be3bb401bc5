//! Two-hidden-layer ReLU network for binary classification, trained with Adam
//! on the logistic loss.

use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;

use crate::seed::Rng;

#[derive(Debug, Clone)]
pub(crate) struct ClassifierConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 32,
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
        }
    }
}

/// Parameter layout: W1 (h×d), b1 (h), W2 (h×h), b2 (h), w3 (h), b3.
pub(crate) struct Mlp {
    d: usize,
    h: usize,
    params: Vec<f64>,
}

struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

impl Mlp {
    fn offsets(&self) -> Offsets {
        let (d, h) = (self.d, self.h);
        let w1 = 0;
        let b1 = w1 + h * d;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + h;
        Offsets { w1, b1, w2, b2, w3, b3 }
    }

    fn new(d: usize, h: usize, rng: &mut Rng) -> Self {
        let mut mlp = Mlp {
            d,
            h,
            params: vec![0.0; h * d + h + h * h + h + h + 1],
        };
        let o = mlp.offsets();
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        for i in 0..h * d {
            mlp.params[o.w1 + i] = he(d) * rng.sample::<f64, _>(StandardNormal);
        }
        for i in 0..h * h {
            mlp.params[o.w2 + i] = he(h) * rng.sample::<f64, _>(StandardNormal);
        }
        for i in 0..h {
            mlp.params[o.w3 + i] = (1.0 / h as f64).sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        mlp
    }

    /// Logit plus the hidden activations needed for the backward pass.
    fn forward(&self, x: &[f64], a1: &mut [f64], a2: &mut [f64]) -> f64 {
        let (d, h) = (self.d, self.h);
        let o = self.offsets();
        let p = &self.params;
        for j in 0..h {
            let row = &p[o.w1 + j * d..o.w1 + (j + 1) * d];
            let s: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + p[o.b1 + j];
            a1[j] = s.max(0.0);
        }
        for j in 0..h {
            let row = &p[o.w2 + j * h..o.w2 + (j + 1) * h];
            let s: f64 = row.iter().zip(a1.iter()).map(|(w, v)| w * v).sum::<f64>() + p[o.b2 + j];
            a2[j] = s.max(0.0);
        }
        p[o.w3..o.w3 + h].iter().zip(a2.iter()).map(|(w, v)| w * v).sum::<f64>() + p[o.b3]
    }

    pub(crate) fn logit(&self, x: &[f64]) -> f64 {
        let mut a1 = vec![0.0; self.h];
        let mut a2 = vec![0.0; self.h];
        self.forward(x, &mut a1, &mut a2)
    }

    /// Accumulate the gradient of the logistic loss for one example.
    fn backward(&self, x: &[f64], label: f64, a1: &mut [f64], a2: &mut [f64], d1: &mut [f64], grad: &mut [f64]) {
        let (d, h) = (self.d, self.h);
        let o = self.offsets();
        let p = &self.params;
        let logit = self.forward(x, a1, a2);
        let g = 1.0 / (1.0 + (-logit).exp()) - label;
        grad[o.b3] += g;
        for j in 0..h {
            grad[o.w3 + j] += g * a2[j];
        }
        for v in d1.iter_mut() {
            *v = 0.0;
        }
        for j in 0..h {
            if a2[j] <= 0.0 {
                continue;
            }
            let g2 = g * p[o.w3 + j];
            grad[o.b2 + j] += g2;
            for k in 0..h {
                grad[o.w2 + j * h + k] += g2 * a1[k];
                d1[k] += g2 * p[o.w2 + j * h + k];
            }
        }
        for k in 0..h {
            if a1[k] <= 0.0 {
                continue;
            }
            grad[o.b1 + k] += d1[k];
            for i in 0..d {
                grad[o.w1 + k * d + i] += d1[k] * x[i];
            }
        }
    }
}

/// Fit a classifier on `(inputs, labels)` with labels in {0, 1}.
pub(crate) fn train(inputs: &[Vec<f64>], labels: &[f64], config: &ClassifierConfig, rng: &mut Rng) -> Mlp {
    let d = inputs.first().map_or(0, Vec::len);
    let h = config.hidden;
    let mut mlp = Mlp::new(d, h, rng);
    let n_params = mlp.params.len();
    let (mut m, mut v) = (vec![0.0; n_params], vec![0.0; n_params]);
    let mut grad = vec![0.0; n_params];
    let (mut a1, mut a2, mut d1) = (vec![0.0; h], vec![0.0; h], vec![0.0; h]);
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut step = 0i32;
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for batch in order.chunks(config.batch_size.max(1)) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                mlp.backward(&inputs[i], labels[i], &mut a1, &mut a2, &mut d1, &mut grad);
            }
            step += 1;
            let scale = 1.0 / batch.len() as f64;
            let (c1, c2) = (1.0 - beta1.powi(step), 1.0 - beta2.powi(step));
            for k in 0..n_params {
                let g = grad[k] * scale + config.weight_decay * mlp.params[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                mlp.params[k] -= config.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
    }
    mlp
}
