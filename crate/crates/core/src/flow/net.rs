//! Dense MADE blocks over a flat parameter vector, with forward, inverse and
//! reverse-mode gradient passes. Everything here works in standardized space.

use super::made::MadeMaskSet;
use super::FlowConfig;

pub(crate) const LOG_SCALE_BOUND: f64 = 7.0;
pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerLayout {
    pub w: usize,
    pub b: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub blocks: Vec<Vec<LayerLayout>>,
    pub total: usize,
    pub d: usize,
    pub m: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl Layout {
    pub fn new(config: &FlowConfig) -> Self {
        let (d, m, h) = (config.theta_dim, config.context_dim, config.hidden_units);
        let mut offset = 0;
        let mut blocks = Vec::with_capacity(config.num_transforms);
        for _ in 0..config.num_transforms {
            let mut layers = Vec::with_capacity(config.hidden_layers + 1);
            let mut cols = d + m;
            let shapes = (0..config.hidden_layers)
                .map(|_| h)
                .chain(std::iter::once(2 * d));
            for rows in shapes {
                let w = offset;
                offset += rows * cols;
                let b = offset;
                offset += rows;
                layers.push(LayerLayout { w, b, rows, cols });
                cols = rows;
            }
            blocks.push(layers);
        }
        Layout {
            blocks,
            total: offset,
            d,
            m,
            hidden: h,
            hidden_layers: config.hidden_layers,
        }
    }

    pub fn num_units(&self) -> usize {
        self.blocks.len() * self.hidden_layers * self.hidden
    }

    pub fn unit_offset(&self, block: usize, layer: usize) -> usize {
        (block * self.hidden_layers + layer) * self.hidden
    }

    /// 1.0 where a weight is structurally allowed by the MADE masks, 0.0 elsewhere.
    /// Biases are always allowed.
    pub fn structural_mask(&self, masks: &MadeMaskSet) -> Vec<f64> {
        let mut out = vec![1.0; self.total];
        for (layers, block) in self.blocks.iter().zip(&masks.blocks) {
            for (lay, mask) in layers.iter().zip(&block.layers) {
                for (i, &ok) in mask.allowed.iter().enumerate() {
                    if !ok {
                        out[lay.w + i] = 0.0;
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    /// `[u (d), context (m)]`
    input: Vec<f64>,
    /// tanh outputs per hidden layer, before the dropout multiplier.
    tanh: Vec<Vec<f64>>,
    /// tanh outputs after the dropout multiplier (inputs to the next layer).
    hidden: Vec<Vec<f64>>,
    raw: Vec<f64>,
    log_scale: Vec<f64>,
    z: Vec<f64>,
}

/// Reusable buffers for one forward/backward evaluation.
#[derive(Debug, Clone)]
pub(crate) struct Workspace {
    blocks: Vec<BlockCache>,
    grad_a: Vec<f64>,
    grad_next: Vec<f64>,
    grad_u: Vec<f64>,
    grad_out: Vec<f64>,
}

impl Workspace {
    pub fn new(layout: &Layout) -> Self {
        let (d, m, h) = (layout.d, layout.m, layout.hidden);
        Workspace {
            blocks: (0..layout.blocks.len())
                .map(|_| BlockCache {
                    input: vec![0.0; d + m],
                    tanh: vec![vec![0.0; h]; layout.hidden_layers],
                    hidden: vec![vec![0.0; h]; layout.hidden_layers],
                    raw: vec![0.0; 2 * d],
                    log_scale: vec![0.0; d],
                    z: vec![0.0; d],
                })
                .collect(),
            grad_a: vec![0.0; h.max(2 * d)],
            grad_next: vec![0.0; h.max(d + m)],
            grad_u: vec![0.0; d],
            grad_out: vec![0.0; 2 * d],
        }
    }

    pub fn latent(&self) -> &[f64] {
        &self.blocks.last().expect("at least one transform").z
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociation flags.
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..n {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn clamp_log_scale(raw: f64) -> f64 {
    raw.clamp(-LOG_SCALE_BOUND, LOG_SCALE_BOUND)
}

/// Borrowed view of weights plus per-unit dropout multipliers.
pub(crate) struct Net<'a> {
    pub layout: &'a Layout,
    pub masks: &'a MadeMaskSet,
    pub weights: &'a [f64],
    pub units: &'a [f64],
}

impl Net<'_> {
    /// MLP pass of block `k` on `cache.input`; fills hidden caches and raw outputs.
    fn block_mlp(&self, k: usize, cache: &mut BlockCache) {
        let layers = &self.layout.blocks[k];
        let hl = self.layout.hidden_layers;
        for (l, lay) in layers.iter().enumerate() {
            let w = &self.weights[lay.w..lay.w + lay.rows * lay.cols];
            let b = &self.weights[lay.b..lay.b + lay.rows];
            let (done, rest) = cache.hidden.split_at_mut(l.min(hl));
            let input: &[f64] = if l == 0 { &cache.input } else { &done[l - 1] };
            if l < hl {
                let units = &self.units[self.layout.unit_offset(k, l)..][..lay.rows];
                let t = &mut cache.tanh[l];
                let hid = &mut rest[0];
                for r in 0..lay.rows {
                    let v = (b[r] + dot(&w[r * lay.cols..(r + 1) * lay.cols], input)).tanh();
                    t[r] = v;
                    hid[r] = v * units[r];
                }
            } else {
                for r in 0..lay.rows {
                    cache.raw[r] = b[r] + dot(&w[r * lay.cols..(r + 1) * lay.cols], input);
                }
            }
        }
    }

    /// Standardized log-density `log N(z) + log|det ∂z/∂u|`, leaving caches for `backward`.
    pub fn forward(&self, u: &[f64], context: &[f64], ws: &mut Workspace) -> f64 {
        let d = self.layout.d;
        let mut log_det = 0.0;
        for k in 0..self.layout.blocks.len() {
            let (prev, cur) = ws.blocks.split_at_mut(k);
            let cache = &mut cur[0];
            let src: &[f64] = if k == 0 { u } else { &prev[k - 1].z };
            cache.input[..d].copy_from_slice(src);
            cache.input[d..].copy_from_slice(context);
            self.block_mlp(k, cache);
            for p in 0..d {
                let ls = clamp_log_scale(cache.raw[d + p]);
                cache.log_scale[p] = ls;
                cache.z[p] = (cache.input[p] - cache.raw[p]) * (-ls).exp();
                log_det -= ls;
            }
        }
        let z = ws.latent();
        let sq: f64 = z.iter().map(|v| v * v).sum();
        -0.5 * sq - d as f64 * HALF_LN_2PI + log_det
    }

    /// Map a latent `z` back to standardized θ, one degree at a time per block.
    pub fn inverse(&self, z: &[f64], context: &[f64], ws: &mut Workspace) -> Vec<f64> {
        let d = self.layout.d;
        let mut target = z.to_vec();
        for k in (0..self.layout.blocks.len()).rev() {
            let order = &self.masks.blocks[k].order;
            let cache = &mut ws.blocks[k];
            cache.input[..d].iter_mut().for_each(|v| *v = 0.0);
            cache.input[d..].copy_from_slice(context);
            for &p in order {
                self.block_mlp(k, cache);
                let ls = clamp_log_scale(cache.raw[d + p]);
                cache.input[p] = target[p] * ls.exp() + cache.raw[p];
            }
            target.copy_from_slice(&cache.input[..d]);
        }
        target
    }

    /// Accumulate `coef · ∂(log-density)/∂weights` into `grad` using the caches
    /// of the last `forward` call. Structurally masked entries are not zeroed here.
    pub fn backward(&self, coef: f64, ws: &mut Workspace, grad: &mut [f64]) {
        let d = self.layout.d;
        let hl = self.layout.hidden_layers;
        let nblocks = self.layout.blocks.len();
        {
            let z = &ws.blocks[nblocks - 1].z;
            for p in 0..d {
                ws.grad_u[p] = -z[p] * coef;
            }
        }
        for k in (0..nblocks).rev() {
            let cache = &ws.blocks[k];
            let layers = &self.layout.blocks[k];
            // Affine coupling: z = (u - s) e^{-ls}, log-det contribution -ls.
            for p in 0..d {
                let gz = ws.grad_u[p];
                let e = (-cache.log_scale[p]).exp();
                ws.grad_out[p] = -gz * e;
                let raw = cache.raw[d + p];
                ws.grad_out[d + p] = if raw > -LOG_SCALE_BOUND && raw < LOG_SCALE_BOUND {
                    -gz * cache.z[p] - coef
                } else {
                    0.0
                };
                ws.grad_u[p] = gz * e;
            }
            // Output layer, then hidden layers in reverse.
            let mut upstream_len = 2 * d;
            ws.grad_a[..upstream_len].copy_from_slice(&ws.grad_out);
            for l in (0..=hl).rev() {
                let lay = layers[l];
                let input: &[f64] = if l == 0 {
                    &cache.input
                } else {
                    &cache.hidden[l - 1]
                };
                let w = &self.weights[lay.w..lay.w + lay.rows * lay.cols];
                let gw = &mut grad[lay.w..lay.w + lay.rows * lay.cols];
                ws.grad_next[..lay.cols].iter_mut().for_each(|v| *v = 0.0);
                for r in 0..upstream_len {
                    let g = ws.grad_a[r];
                    if g == 0.0 {
                        continue;
                    }
                    let row = r * lay.cols;
                    for c in 0..lay.cols {
                        gw[row + c] += g * input[c];
                        ws.grad_next[c] += g * w[row + c];
                    }
                }
                let gb = &mut grad[lay.b..lay.b + lay.rows];
                for r in 0..upstream_len {
                    gb[r] += ws.grad_a[r];
                }
                if l > 0 {
                    let units = &self.units[self.layout.unit_offset(k, l - 1)..][..lay.cols];
                    let t = &cache.tanh[l - 1];
                    for c in 0..lay.cols {
                        ws.grad_a[c] = ws.grad_next[c] * units[c] * (1.0 - t[c] * t[c]);
                    }
                    upstream_len = lay.cols;
                } else {
                    for p in 0..d {
                        ws.grad_u[p] += ws.grad_next[p];
                    }
                }
            }
        }
    }
}
