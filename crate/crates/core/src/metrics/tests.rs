use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::*;
use crate::simulators::{SimResult, SimulationError};

fn gaussian(n: usize, mean: &[f64], sd: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng_from(seed);
    (0..n)
        .map(|_| mean.iter().map(|m| m + sd * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

#[test]
fn rmsne_examples() {
    assert_eq!(rmsne(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
    let v = rmsne(&[2.0, 1.0], &[1.0, 1.0]).unwrap();
    assert!((v - 0.5f64.sqrt()).abs() < 1e-12);
    assert!((v - 0.7071).abs() < 1e-4);
    assert!(rmsne(&[1.0, 1.0], &[1.0, -1.0]).is_err());
    assert!(rmsne(&[1.0], &[1.0, 1.0]).is_err());
}

proptest! {
    #[test]
    fn rmsne_is_scale_invariant(
        pairs in prop::collection::vec((0.1f64..100.0, 0.0f64..100.0), 1..20),
        c in 0.01f64..100.0,
    ) {
        let x_o: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let x: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let a = rmsne(&x, &x_o).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
        let os: Vec<f64> = x_o.iter().map(|v| v * c).collect();
        let b = rmsne(&xs, &os).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn mmd_is_symmetric(seed in 0u64..1000, shift in 0.0f64..2.0) {
        let p = gaussian(60, &[0.0, 0.0], 1.0, seed);
        let q = gaussian(70, &[shift, 0.0], 1.0, seed + 1);
        let a = mmd(&p, &q).unwrap();
        let b = mmd(&q, &p).unwrap();
        prop_assert!((a.value - b.value).abs() < 1e-12);
        prop_assert_eq!(a.bandwidth, b.bandwidth);
    }
}

#[test]
fn rmsne_shifts_with_translation() {
    let x_o = [5.0, 5.0, 5.0];
    assert!(rmsne(&[6.0, 6.0, 6.0], &x_o).unwrap() > 0.0);
}

#[test]
fn c2st_same_distribution_is_chance() {
    let p = gaussian(500, &[0.0, 0.0], 1.0, 1);
    let q = gaussian(500, &[0.0, 0.0], 1.0, 2);
    let acc = c2st(&p, &q, &C2stConfig::default(), 3).unwrap();
    assert!((acc - 0.5).abs() < 0.05, "{acc}");
    assert_eq!(acc, c2st(&p, &q, &C2stConfig::default(), 3).unwrap());
}

#[test]
fn c2st_separates_disjoint_supports() {
    let p = gaussian(200, &[0.0], 0.1, 4);
    let q = gaussian(200, &[10.0], 0.1, 5);
    assert!(c2st(&p, &q, &C2stConfig::default(), 0).unwrap() > 0.99);
}

#[test]
fn c2st_detects_a_shift_and_drops_constant_features() {
    let with_const = |s: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        s.into_iter().map(|mut v| {
            v.push(7.0);
            v
        }).collect()
    };
    let p = with_const(gaussian(300, &[0.0, 0.0], 1.0, 6));
    let q = with_const(gaussian(300, &[1.5, 0.0], 1.0, 7));
    let acc = c2st(&p, &q, &C2stConfig::default(), 1).unwrap();
    // Bayes accuracy for a 1.5-sd shift is Φ(0.75) ≈ 0.773.
    assert!((acc - 0.773).abs() < 0.06, "{acc}");
    let flat = vec![vec![1.0]; 150];
    assert!(c2st(&flat, &flat, &C2stConfig::default(), 0).is_err());
}

#[test]
fn mmd_matches_population_value_for_shifted_gaussians() {
    let p = gaussian(500, &[0.0], 1.0, 8);
    let q = gaussian(500, &[3.0], 1.0, 9);
    let est = mmd(&p, &q).unwrap();
    assert!(est.value > 0.5, "{est:?}");
    // E k(x, x') for a Gaussian kernel of width σ and x − x' ~ N(Δ, 2).
    let s2 = est.bandwidth * est.bandwidth;
    let expect = |delta: f64| (s2 / (s2 + 2.0)).sqrt() * (-delta * delta / (2.0 * (s2 + 2.0))).exp();
    let population = 2.0 * expect(0.0) - 2.0 * expect(3.0);
    assert!((est.value - population).abs() < 4.0 * est.standard_error, "{} vs {population}", est.value);
}

#[test]
fn mmd_is_unbiased_under_the_null() {
    let trials = 200;
    let values: Vec<f64> = (0..trials)
        .map(|t| {
            let pooled = gaussian(100, &[0.0, 0.0], 1.0, 1000 + t);
            let (a, b) = pooled.split_at(50);
            mmd(a, b).unwrap().value
        })
        .collect();
    let n = trials as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 3.0 * sd / n.sqrt(), "mean {mean}, se {}", sd / n.sqrt());
    assert!(values.iter().any(|&v| v < 0.0));
}

#[test]
fn mmd_falls_back_to_unit_bandwidth() {
    let p = vec![vec![1.0, 2.0]; 60];
    let est = mmd(&p, &p).unwrap();
    assert_eq!(est.bandwidth, 1.0);
    assert!(est.value.abs() < 1e-12);
}

#[test]
fn median_pairwise_distance_small_cases() {
    let pts: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0], vec![3.0]];
    let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
    // Pairwise distances 1, 3, 2.
    assert_eq!(median_pairwise_distance(&refs), 2.0);
    let pts: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0], vec![3.0], vec![6.0]];
    let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
    // 1, 3, 6, 2, 5, 3 → median of sorted [1,2,3,3,5,6] is 3.
    assert_eq!(median_pairwise_distance(&refs), 3.0);
}

/// Returns θ unchanged; fails on θ₀ < 0.
struct Identity;

impl Simulator for Identity {
    fn theta_dim(&self) -> usize {
        2
    }
    fn x_dim(&self) -> usize {
        2
    }
    fn simulate(&self, theta: &[f64], _seed: u64) -> SimResult {
        if theta[0] < 0.0 {
            Err(SimulationError::Failed("negative".into()))
        } else {
            Ok(theta.to_vec())
        }
    }
}

#[test]
fn median_distance_examples() {
    let x_o = [1.0, 1.0];
    let same = vec![x_o.to_vec(); 5];
    assert_eq!(median_distance(&same, &Identity, &x_o, 0, 2).unwrap().value, 0.0);
    let spread = vec![vec![2.0, 1.0], vec![1.0, 3.0], vec![4.0, 1.0], vec![-1.0, 0.0]];
    let md = median_distance(&spread, &Identity, &x_o, 0, 2).unwrap();
    assert_eq!(md.value, 2.0);
    assert_eq!(md.failures, 1);
    assert!(median_distance(&[vec![-1.0, 0.0]], &Identity, &x_o, 0, 1).is_err());
}

#[test]
fn posterior_mean_error_examples() {
    let samples = vec![vec![1.0, 2.0], vec![3.0, 2.0]];
    assert_eq!(posterior_mean_error(&samples, &[2.0, 2.0], &[1.0, 1.0]).unwrap(), 0.0);
    let one = vec![vec![1.0], vec![2.0]];
    assert_eq!(posterior_mean_error(&one, &[1.0], &[0.5]).unwrap(), 1.0);
    // Zero normalizer components are skipped.
    assert_eq!(posterior_mean_error(&samples, &[2.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    assert!(posterior_mean_error(&samples, &[2.0, 2.0], &[0.0, 0.0]).is_err());
    assert!(posterior_mean_error(&samples, &[2.0], &[1.0]).is_err());
}
