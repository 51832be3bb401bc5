use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::*;

fn config(d: usize, m: usize, transforms: usize, hidden: usize) -> FlowConfig {
    FlowConfig {
        theta_dim: d,
        context_dim: m,
        num_transforms: transforms,
        hidden_units: hidden,
        hidden_layers: 2,
        dropout_rate: 0.25,
        permutation: PermutationScheme::Reverse,
    }
}

/// A flow whose every allowed weight (heads included) is drawn at `scale`.
fn random_flow(cfg: FlowConfig, seed: u64, scale: f64) -> Flow {
    let mut flow = Flow::new(cfg, seed).unwrap();
    let mut rng = seed::rng_from(seed ^ 0xABCD);
    let w: Vec<f64> = (0..flow.num_params())
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    flow.set_weights(w).unwrap();
    flow
}

fn random_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn fd_jacobian(flow: &Flow, theta: &[f64], x: &[f64], phi: &WeightSample, h: f64) -> DMatrix<f64> {
    let d = theta.len();
    let mut jac = DMatrix::zeros(d, d);
    for q in 0..d {
        let mut plus = theta.to_vec();
        let mut minus = theta.to_vec();
        plus[q] += h;
        minus[q] -= h;
        let zp = flow.forward_transform(&plus, x, phi).unwrap();
        let zm = flow.forward_transform(&minus, x, phi).unwrap();
        for p in 0..d {
            jac[(p, q)] = (zp[p] - zm[p]) / (2.0 * h);
        }
    }
    jac
}

fn standard_normal_log_density(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - z.len() as f64 * net::HALF_LN_2PI
}

#[test]
fn identity_flow_is_standard_normal() {
    let flow = Flow::new(config(2, 3, 5, 16), 1).unwrap();
    let lp = flow
        .log_prob(&[0.0, 0.0], &[0.3, -1.0, 2.0], &flow.mean_weights())
        .unwrap();
    assert!((lp - (-(2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
    assert!((lp + 1.8379).abs() < 1e-4);
    // Dropout cannot move an identity flow: heads are zero.
    let phi = flow.draw_weight_sample(3).unwrap();
    let lp2 = flow.log_prob(&[0.0, 0.0], &[0.3, -1.0, 2.0], &phi).unwrap();
    assert_eq!(lp, lp2);
}

#[test]
fn single_dimension_is_affine_in_theta() {
    let flow = random_flow(config(1, 2, 1, 1), 5, 0.5);
    let phi = flow.mean_weights();
    let x = [0.4, -0.2];
    let z = |t: f64| flow.forward_transform(&[t], &x, &phi).unwrap()[0];
    let (a, b, c) = (z(-1.0), z(0.0), z(1.0));
    assert!((a + c - 2.0 * b).abs() < 1e-12);
    // Context changes the affine parameters.
    let other = flow.forward_transform(&[1.0], &[2.0, 1.0], &phi).unwrap()[0];
    assert!((other - c).abs() > 1e-6);
}

#[test]
fn single_transform_jacobian_is_triangular() {
    let mut rng = seed::rng_from(9);
    for (d, perm) in [
        (2, PermutationScheme::Reverse),
        (3, PermutationScheme::Reverse),
        (4, PermutationScheme::Random { seed: 4 }),
    ] {
        let mut cfg = config(d, 2, 1, 4);
        cfg.permutation = perm;
        let flow = random_flow(cfg, 21, 0.4);
        let degrees = &flow.masks().blocks[0].theta_degrees;
        let phi = flow.draw_weight_sample(2).unwrap();
        for _ in 0..10 {
            let theta = random_vec(&mut rng, d);
            let x = random_vec(&mut rng, 2);
            let jac = fd_jacobian(&flow, &theta, &x, &phi, 1e-5);
            for p in 0..d {
                for q in 0..d {
                    if degrees[q] > degrees[p] {
                        assert!(jac[(p, q)].abs() < 1e-8, "d={d} ({p},{q}) = {}", jac[(p, q)]);
                    }
                }
            }
        }
    }
}

#[test]
fn second_block_is_triangular_in_reversed_order() {
    let cfg = config(3, 1, 2, 6);
    let mut flow = random_flow(cfg, 8, 0.4);
    // Zero the first block so the composite equals the second block.
    let mut w = flow.weights().to_vec();
    let first_block_end = flow.layout.blocks[1][0].w;
    w[..first_block_end].iter_mut().for_each(|v| *v = 0.0);
    flow.set_weights(w).unwrap();
    let phi = flow.mean_weights();
    let jac = fd_jacobian(&flow, &[0.2, -0.5, 0.9], &[0.1], &phi, 1e-5);
    // Reverse order: coordinate 2 has degree 1, so z_2 depends on θ_2 only.
    assert!(jac[(2, 0)].abs() < 1e-8 && jac[(2, 1)].abs() < 1e-8);
    assert!(jac[(1, 0)].abs() < 1e-8);
    assert!(jac[(0, 1)].abs() > 1e-8 || jac[(0, 2)].abs() > 1e-8);
}

#[test]
fn log_det_matches_finite_difference_jacobian() {
    let mut rng = seed::rng_from(17);
    for d in [1, 2, 3, 5] {
        let flow = random_flow(config(d, 2, 3, 8), 40 + d as u64, 0.3);
        let phi = flow.draw_weight_sample(7).unwrap();
        for _ in 0..5 {
            let theta = random_vec(&mut rng, d);
            let x = random_vec(&mut rng, 2);
            let lp = flow.log_prob(&theta, &x, &phi).unwrap();
            let z = flow.forward_transform(&theta, &x, &phi).unwrap();
            let log_det = lp - standard_normal_log_density(&z);
            let fd = fd_jacobian(&flow, &theta, &x, &phi, 1e-5).determinant().abs().ln();
            let rel = (log_det - fd).abs() / log_det.abs().max(1.0);
            assert!(rel < 1e-4, "d={d}: analytic {log_det} vs fd {fd}");
        }
    }
}

#[test]
fn density_integrates_to_one_on_a_grid() {
    for seed in 0..5u64 {
        let flow = random_flow(config(2, 1, 3, 8), 100 + seed, 0.25);
        let phi = flow.draw_weight_sample(seed).unwrap();
        let x = [0.5];
        let (lo, hi, step) = (-9.0, 9.0, 0.05);
        let n = ((hi - lo) / step) as usize;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let t = [lo + (i as f64 + 0.5) * step, lo + (j as f64 + 0.5) * step];
                total += flow.log_prob(&t, &x, &phi).unwrap().exp();
            }
        }
        total *= step * step;
        assert!((0.95..=1.05).contains(&total), "seed {seed}: mass {total}");
    }
    let flow = random_flow(config(1, 1, 3, 8), 7, 0.3);
    let phi = flow.mean_weights();
    let step = 0.01;
    let mass: f64 = (0..2000)
        .map(|i| {
            let t = -10.0 + (i as f64 + 0.5) * step;
            flow.log_prob(&[t], &[-0.3], &phi).unwrap().exp() * step
        })
        .sum();
    assert!((mass - 1.0).abs() < 0.05, "d=1 mass {mass}");
}

#[test]
fn sample_round_trips_through_forward_transform() {
    let mut flow = random_flow(config(3, 2, 5, 10), 3, 0.3);
    flow.set_standardization(Standardization {
        theta_mean: vec![1.0, -2.0, 0.5],
        theta_std: vec![2.0, 0.5, 3.0],
        x_mean: vec![0.0, 1.0],
        x_std: vec![1.0, 4.0],
    })
    .unwrap();
    let phi = flow.draw_weight_sample(11).unwrap();
    let x = [0.3, 2.0];
    let mut rng = seed::rng_from(5);
    for _ in 0..50 {
        let z = random_vec(&mut rng, 3);
        let theta = flow.inverse_transform(&z, &x, &phi).unwrap();
        let back = flow.forward_transform(&theta, &x, &phi).unwrap();
        for (a, b) in z.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(flow.log_prob(&theta, &x, &phi).unwrap().is_finite());
    }
}

#[test]
fn interleaved_calls_do_not_rerandomize() {
    let flow = random_flow(config(2, 1, 3, 8), 12, 0.3);
    let phi = flow.draw_weight_sample(4).unwrap();
    let x = [0.7];
    let a = flow.log_prob(&[0.1, 0.2], &x, &phi).unwrap();
    let s1 = flow.sample(5, &x, &phi, &mut seed::rng_from(1)).unwrap();
    let b = flow.log_prob(&[0.1, 0.2], &x, &phi).unwrap();
    let s2 = flow.sample(5, &x, &phi, &mut seed::rng_from(1)).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(s1, s2);
}

#[test]
fn identity_flow_samples_are_centered() {
    let flow = Flow::new(config(2, 1, 5, 8), 0).unwrap();
    let phi = flow.mean_weights();
    let draws = flow.sample(100_000, &[0.0], &phi, &mut seed::rng_from(3)).unwrap();
    for p in 0..2 {
        let mean = draws.iter().map(|t| t[p]).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.02, "coordinate {p} mean {mean}");
    }
}

#[test]
fn own_samples_respect_gaussian_entropy_bound() {
    // For any density with covariance Σ, E[-log q] ≤ h(N(μ, Σ)); so the mean
    // log-density of its own samples is at least the negated Gaussian entropy.
    let flow = random_flow(config(2, 1, 3, 8), 31, 0.3);
    let phi = flow.draw_weight_sample(9).unwrap();
    let x = [0.2];
    let draws = flow.sample(10_000, &x, &phi, &mut seed::rng_from(8)).unwrap();
    let mean_lp = flow.log_prob_batch(&draws, &x, &phi).unwrap().iter().sum::<f64>() / 1e4;
    let n = draws.len() as f64;
    let mu: Vec<f64> = (0..2).map(|p| draws.iter().map(|t| t[p]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::<f64>::zeros(2, 2);
    for t in &draws {
        for i in 0..2 {
            for j in 0..2 {
                cov[(i, j)] += (t[i] - mu[i]) * (t[j] - mu[j]) / n;
            }
        }
    }
    let entropy = 0.5 * (cov.determinant().ln() + 2.0 * (1.0 + (2.0 * std::f64::consts::PI).ln()));
    assert!(mean_lp >= -entropy - 0.5, "mean log q {mean_lp}, gaussian bound {}", -entropy);
}

#[test]
fn marginal_log_prob_is_log_mean_of_densities() {
    let flow = random_flow(config(2, 1, 2, 6), 2, 0.4);
    let phis = flow.weight_samples(4, 77).unwrap();
    let theta = [0.3, -0.4];
    let x = [1.0];
    let single = flow.marginal_log_prob(&theta, &x, &phis[..1]).unwrap();
    assert!((single - flow.log_prob(&theta, &x, &phis[0]).unwrap()).abs() < 1e-12);
    let comps: Vec<f64> = phis.iter().map(|p| flow.log_prob(&theta, &x, p).unwrap()).collect();
    let m = flow.marginal_log_prob(&theta, &x, &phis).unwrap();
    let lo = comps.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = comps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
    let direct = (comps.iter().map(|c| c.exp()).sum::<f64>() / 4.0).ln();
    assert!((m - direct).abs() < 1e-12);
    assert!((log_mean_exp(&[0.2f64.ln(), 0.4f64.ln()]).unwrap() - 0.3f64.ln()).abs() < 1e-12);
    assert!(flow.marginal_log_prob(&theta, &x, &[]).is_err());
    assert!(log_mean_exp(&[f64::NEG_INFINITY, f64::NAN]).is_none());
}

#[test]
fn gradient_matches_central_differences() {
    let mut cfg = config(2, 2, 2, 5);
    cfg.dropout_rate = 0.3;
    let mut flow = random_flow(cfg, 13, 0.4);
    flow.set_standardization(Standardization {
        theta_mean: vec![0.5, -1.0],
        theta_std: vec![1.5, 0.7],
        x_mean: vec![0.0, 0.0],
        x_std: vec![1.0, 2.0],
    })
    .unwrap();
    let phi = flow.draw_weight_sample(5).unwrap();
    let theta = [0.7, -0.9];
    let x = [0.3, 1.2];
    let (lp, grad) = flow.grad_log_prob(&theta, &x, &phi).unwrap();
    assert!((lp - flow.log_prob(&theta, &x, &phi).unwrap()).abs() < 1e-12);
    let h = 1e-5;
    let base = flow.weights().to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        if flow.structural_mask()[i] == 0.0 {
            assert_eq!(grad[i], 0.0);
            continue;
        }
        let eval = |delta: f64| {
            let mut w = base.clone();
            w[i] += delta;
            let mut f = flow.clone();
            f.set_weights(w).unwrap();
            let phi = f.weight_sample(phi.mask.clone()).unwrap();
            f.log_prob(&theta, &x, &phi).unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn dropped_units_get_zero_gradient() {
    let mut cfg = config(3, 1, 2, 6);
    cfg.dropout_rate = 0.5;
    let flow = random_flow(cfg, 4, 0.4);
    let phi = flow.draw_weight_sample(19).unwrap();
    let (_, grad) = flow.grad_log_prob(&[0.1, 0.2, 0.3], &[0.5], &phi).unwrap();
    let layout = &flow.layout;
    let mut checked = 0;
    for (k, layers) in layout.blocks.iter().enumerate() {
        for l in 0..layout.hidden_layers {
            let lay = layers[l];
            for unit in 0..lay.rows {
                if phi.mask.keep[layout.unit_offset(k, l) + unit] {
                    continue;
                }
                // Incoming weights and bias of the dropped unit.
                for c in 0..lay.cols {
                    assert_eq!(grad[lay.w + unit * lay.cols + c], 0.0);
                }
                assert_eq!(grad[lay.b + unit], 0.0);
                // Outgoing weights from the dropped unit.
                let next = layers[l + 1];
                for r in 0..next.rows {
                    assert_eq!(grad[next.w + r * next.cols + unit], 0.0);
                }
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn gradient_is_linear_over_a_batch() {
    let flow = random_flow(config(2, 1, 2, 6), 6, 0.3);
    let phi = flow.draw_weight_sample(1).unwrap();
    let pts = [([0.1, 0.2], [0.3]), ([-1.0, 0.5], [1.1]), ([0.4, -0.4], [-0.6])];
    let mut summed = vec![0.0; flow.num_params()];
    let mut ws = flow.new_workspace();
    for (t, x) in &pts {
        let u = flow.standardize_theta(t);
        let c = flow.standardize_x(x);
        flow.accumulate_grad(&u, &c, &phi, 1.0, &mut ws, &mut summed).unwrap();
    }
    flow.apply_structural_mask(&mut summed);
    let mut separate = vec![0.0; flow.num_params()];
    for (t, x) in &pts {
        let (_, g) = flow.grad_log_prob(t, x, &phi).unwrap();
        for (s, v) in separate.iter_mut().zip(g) {
            *s += v;
        }
    }
    for (a, b) in summed.iter().zip(&separate) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn weight_mask_statistics_and_determinism() {
    let zero = sample_weight_mask(0.0, 100, 3).unwrap();
    assert!(zero.keep.iter().all(|&k| k));
    let m = sample_weight_mask(0.25, 10_000, 42).unwrap();
    let frac = m.dropped_fraction();
    assert!((0.24..=0.26).contains(&frac), "fraction {frac}");
    assert_eq!(m, sample_weight_mask(0.25, 10_000, 42).unwrap());
    assert!(sample_weight_mask(1.0, 10, 0).is_err());
    assert!(sample_weight_mask(-0.1, 10, 0).is_err());
}

#[test]
fn config_validation() {
    assert!(Flow::new(config(0, 1, 1, 1), 0).is_err());
    let mut c = config(1, 0, 1, 1);
    assert!(Flow::new(c.clone(), 0).is_ok());
    c.dropout_rate = 1.0;
    assert!(Flow::new(c, 0).is_err());
}

#[test]
fn dimension_mismatch_is_reported() {
    let flow = Flow::new(config(2, 1, 1, 4), 0).unwrap();
    let phi = flow.mean_weights();
    assert!(matches!(
        flow.log_prob(&[0.0], &[0.0], &phi),
        Err(Error::DimensionMismatch { .. })
    ));
}

#[test]
fn overflowing_flow_reports_non_finite() {
    let flow = random_flow(config(2, 1, 1, 4), 0, 1.0);
    let phi = flow.mean_weights();
    assert!(matches!(
        flow.log_prob(&[1e300, 1e300], &[0.0], &phi),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn determinism_bit_identical() {
    let a = random_flow(config(3, 2, 3, 8), 9, 0.3);
    let b = random_flow(config(3, 2, 3, 8), 9, 0.3);
    assert_eq!(a.weights(), b.weights());
    let pa = a.draw_weight_sample(1).unwrap();
    let pb = b.draw_weight_sample(1).unwrap();
    let la = a.log_prob(&[0.1, 0.2, 0.3], &[1.0, 2.0], &pa).unwrap();
    let lb = b.log_prob(&[0.1, 0.2, 0.3], &[1.0, 2.0], &pb).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut flow = random_flow(config(3, 2, 2, 7), 33, 0.37);
    flow.set_standardization(Standardization {
        theta_mean: vec![0.1 / 3.0, 1e-17, -7.25],
        theta_std: vec![std::f64::consts::PI, 1.0, 0.3],
        x_mean: vec![1.0 / 7.0, 2.0],
        x_std: vec![1.0, 1e10 / 3.0],
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flow.json");
    flow.save(&path).unwrap();
    let back = Flow::load(&path).unwrap();
    assert_eq!(
        flow.weights().iter().map(|w| w.to_bits()).collect::<Vec<_>>(),
        back.weights().iter().map(|w| w.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(flow.standardization(), back.standardization());
    let mut ck = FlowCheckpoint::from_flow(&flow);
    ck.schema_version = 99;
    assert!(matches!(ck.into_flow(), Err(Error::SchemaVersion { .. })));
}
