//! MADE connectivity masks.
//!
//! Each transform block reads θ in its own degree order: coordinate `p` gets
//! degree `degree[p] ∈ 1..=d`. Hidden units carry degrees in `0..d`; a degree-0
//! unit sees only the context. Connections are allowed when
//!
//! - θ input → first hidden layer: `hidden ≥ degree[p]`
//! - hidden → hidden: `out ≥ in`
//! - hidden → output for coordinate `p`: `degree[p] > hidden`
//!
//! so the shift/log-scale for coordinate `p` depends only on coordinates of
//! strictly smaller degree, plus the context which is unrestricted.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::FlowConfig;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PermutationScheme {
    /// Alternate natural and reversed degree order between transforms.
    #[default]
    Reverse,
    /// Independent seeded random order per transform.
    Random { seed: u64 },
}

/// Row-major boolean connectivity for one dense layer, `rows` outputs by `cols` inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl LayerMask {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    /// Degree of each θ coordinate for this block, a permutation of `1..=d`.
    pub theta_degrees: Vec<usize>,
    /// Degree of each hidden unit, per hidden layer.
    pub hidden_degrees: Vec<Vec<usize>>,
    /// Hidden layers followed by the output layer. The first layer's inputs are
    /// `[θ (d), context (m)]`; the output layer has `2d` rows (shifts then log-scales).
    pub layers: Vec<LayerMask>,
    /// `order[t]` is the coordinate with degree `t + 1`.
    pub order: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MadeMaskSet {
    pub blocks: Vec<BlockMask>,
}

fn degree_orders(config: &FlowConfig) -> Vec<Vec<usize>> {
    let d = config.theta_dim;
    let natural: Vec<usize> = (1..=d).collect();
    match config.permutation {
        PermutationScheme::Reverse => (0..config.num_transforms)
            .map(|k| {
                if k % 2 == 0 {
                    natural.clone()
                } else {
                    natural.iter().rev().copied().collect()
                }
            })
            .collect(),
        PermutationScheme::Random { seed: s } => (0..config.num_transforms)
            .map(|k| {
                let mut degrees = natural.clone();
                degrees.shuffle(&mut seed::rng_from(seed::derive(s, k as u64)));
                degrees
            })
            .collect(),
    }
}

fn block_mask(config: &FlowConfig, theta_degrees: Vec<usize>) -> BlockMask {
    let d = config.theta_dim;
    let m = config.context_dim;
    let h = config.hidden_units;
    let hidden: Vec<usize> = (0..h).map(|u| u % d).collect();
    let hidden_degrees = vec![hidden.clone(); config.hidden_layers];

    let mut layers = Vec::with_capacity(config.hidden_layers + 1);
    let cols = d + m;
    let mut first = Vec::with_capacity(h * cols);
    for &hd in &hidden {
        first.extend(theta_degrees.iter().map(|&deg| hd >= deg));
        first.extend(std::iter::repeat_n(true, m));
    }
    layers.push(LayerMask {
        rows: h,
        cols,
        allowed: first,
    });
    for _ in 1..config.hidden_layers {
        let mut allowed = Vec::with_capacity(h * h);
        for &out in &hidden {
            allowed.extend(hidden.iter().map(|&inp| out >= inp));
        }
        layers.push(LayerMask {
            rows: h,
            cols: h,
            allowed,
        });
    }
    let mut out = Vec::with_capacity(2 * d * h);
    for _head in 0..2 {
        for &deg in &theta_degrees {
            out.extend(hidden.iter().map(|&hd| deg > hd));
        }
    }
    layers.push(LayerMask {
        rows: 2 * d,
        cols: h,
        allowed: out,
    });

    let mut order = vec![0; d];
    for (p, &deg) in theta_degrees.iter().enumerate() {
        order[deg - 1] = p;
    }
    BlockMask {
        theta_degrees,
        hidden_degrees,
        layers,
        order,
    }
}

/// Build the per-block MADE masks for `config`. Deterministic given the config.
pub fn build_masks(config: &FlowConfig) -> MadeMaskSet {
    MadeMaskSet {
        blocks: degree_orders(config)
            .into_iter()
            .map(|deg| block_mask(config, deg))
            .collect(),
    }
}

impl BlockMask {
    /// `dep[p][q]` is true when block output `p` can depend on θ input `q`,
    /// obtained by boolean propagation through the layer masks.
    pub fn dependencies(&self) -> Vec<Vec<bool>> {
        let d = self.theta_degrees.len();
        // reach[u][q]: unit u of the current layer is reachable from θ_q.
        let first = &self.layers[0];
        let mut reach: Vec<Vec<bool>> = (0..first.rows)
            .map(|r| (0..d).map(|q| first.get(r, q)).collect())
            .collect();
        for layer in &self.layers[1..] {
            reach = (0..layer.rows)
                .map(|r| {
                    (0..d)
                        .map(|q| (0..layer.cols).any(|c| layer.get(r, c) && reach[c][q]))
                        .collect()
                })
                .collect();
        }
        // Output rows: shifts then log-scales; a coordinate depends on the union.
        (0..d)
            .map(|p| (0..d).map(|q| reach[p][q] || reach[d + p][q]).collect())
            .collect()
    }
}

impl MadeMaskSet {
    /// Dependency of the final latent on θ through all blocks. Each block's
    /// output coordinate `p` also depends on its own input `p` (the affine map).
    pub fn composite_dependencies(&self) -> Vec<Vec<bool>> {
        let d = self.blocks.first().map_or(0, |b| b.theta_degrees.len());
        let mut total: Vec<Vec<bool>> = (0..d).map(|p| (0..d).map(|q| p == q).collect()).collect();
        for block in &self.blocks {
            let mut local = block.dependencies();
            for (p, row) in local.iter_mut().enumerate() {
                row[p] = true;
            }
            total = (0..d)
                .map(|p| {
                    (0..d)
                        .map(|q| (0..d).any(|r| local[p][r] && total[r][q]))
                        .collect()
                })
                .collect();
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(d: usize, h: usize, transforms: usize) -> FlowConfig {
        FlowConfig {
            theta_dim: d,
            context_dim: 2,
            num_transforms: transforms,
            hidden_units: h,
            hidden_layers: 2,
            dropout_rate: 0.0,
            permutation: PermutationScheme::Reverse,
        }
    }

    #[test]
    fn outputs_depend_only_on_lower_degrees() {
        for d in 1..6 {
            let masks = build_masks(&config(d, 7, 3));
            for block in &masks.blocks {
                let dep = block.dependencies();
                for p in 0..d {
                    for q in 0..d {
                        if dep[p][q] {
                            assert!(block.theta_degrees[q] < block.theta_degrees[p]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_dimension_has_no_theta_path() {
        let masks = build_masks(&config(1, 1, 1));
        let block = &masks.blocks[0];
        assert!(!block.layers[0].get(0, 0));
        assert!(block.layers[0].get(0, 1));
        assert!(block.layers.last().unwrap().get(0, 0));
    }

    #[test]
    fn reverse_order_alternates() {
        let masks = build_masks(&config(3, 4, 2));
        assert_eq!(masks.blocks[0].theta_degrees, vec![1, 2, 3]);
        assert_eq!(masks.blocks[1].theta_degrees, vec![3, 2, 1]);
        assert_eq!(masks.blocks[1].order, vec![2, 1, 0]);
    }

    #[test]
    fn two_reversed_transforms_connect_every_pair() {
        let masks = build_masks(&config(3, 6, 2));
        let dep = masks.composite_dependencies();
        assert!(dep.iter().all(|row| row.iter().all(|&b| b)));
        // A single transform is strictly triangular plus diagonal.
        let single = build_masks(&config(3, 6, 1)).composite_dependencies();
        assert!(!single[0][2]);
    }

    #[test]
    fn random_permutation_is_seeded() {
        let mut cfg = config(5, 8, 4);
        cfg.permutation = PermutationScheme::Random { seed: 11 };
        assert_eq!(build_masks(&cfg), build_masks(&cfg));
        cfg.permutation = PermutationScheme::Random { seed: 12 };
        let other = build_masks(&cfg);
        cfg.permutation = PermutationScheme::Random { seed: 11 };
        assert_ne!(build_masks(&cfg), other);
    }
}
