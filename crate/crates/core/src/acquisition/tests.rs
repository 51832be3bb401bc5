use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::*;
use crate::flow::FlowConfig;
use crate::seed;

fn random_flow(dropout: f64, seed: u64) -> Flow {
    let cfg = FlowConfig {
        num_transforms: 2,
        hidden_units: 12,
        dropout_rate: dropout,
        ..FlowConfig::new(2, 2)
    };
    let mut flow = Flow::new(cfg, seed).unwrap();
    let mut rng = seed::rng_from(seed ^ 77);
    let w: Vec<f64> = (0..flow.num_params())
        .map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    flow.set_weights(w).unwrap();
    flow
}

fn candidates_with_scores(scores: &[f64]) -> Vec<ScoredCandidate> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &s)| ScoredCandidate {
            index: i,
            theta: vec![i as f64],
            proposal_density: 1.0,
            component_densities: vec![],
            marginal_density: 0.0,
            variance: s,
            score: s,
            log_score: s.ln(),
            degenerate: false,
        })
        .collect()
}

#[test]
fn hand_computed_score() {
    let s = acquisition_score(&[0.2, 0.4], 0.5, 1.0);
    assert!((s - 0.005).abs() < 1e-12, "{s}");
}

#[test]
fn identical_components_score_zero() {
    assert_eq!(acquisition_score(&[0.1; 100], 3.0, 1.0), 0.0);
    assert_eq!(mean_and_variance(&[0.1; 100]), (0.1, 0.0));
}

#[test]
fn level_set_at_unit_lambda() {
    let comps = [0.3, 0.9, 0.5, 0.1];
    let n = 7.0_f64;
    let shrunk: Vec<f64> = comps.iter().map(|c| c / n.sqrt()).collect();
    let a = acquisition_score(&comps, 0.2, 1.0);
    let b = acquisition_score(&shrunk, 0.2 * n, 1.0);
    assert!((a - b).abs() < 1e-14 * a.max(1.0), "{a} vs {b}");
}

#[test]
fn top_b_follows_scores_then_draw_order() {
    let c = candidates_with_scores(&[3.0, 1.0, 2.0]);
    assert_eq!(select_top_b(&c, 2).unwrap(), vec![0, 2]);
    assert_eq!(select_top_b(&c, 3).unwrap(), vec![0, 2, 1]);
    assert!(select_top_b(&c, 4).is_err());
    let ties = candidates_with_scores(&[0.0; 6]);
    assert_eq!(select_top_b(&ties, 3).unwrap(), vec![0, 1, 2]);
}

#[test]
fn zero_dropout_components_are_identical() {
    let flow = random_flow(0.0, 1);
    let phis = flow.weight_samples(10, 5).unwrap();
    let thetas: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 * 0.1 - 1.0, 0.3]).collect();
    let comps = component_densities(&flow, &thetas, &[0.2, -0.1], &phis, 0.0).unwrap();
    for row in &comps.densities {
        assert!(row.iter().all(|&c| c == row[0]));
    }
    let config = AcquisitionConfig {
        num_weight_samples: 10,
        ..Default::default()
    };
    let scored = score_candidates(&flow, &thetas, &vec![0.0; 20], &[0.2, -0.1], &phis, &config).unwrap();
    assert!(scored.iter().all(|c| c.score == 0.0));
    assert_eq!(select_top_b(&scored, 5).unwrap(), vec![0, 1, 2, 3, 4]);
}

#[test]
fn single_component_marginal_and_order_invariance() {
    let flow = random_flow(0.25, 2);
    let phis = flow.weight_samples(8, 3).unwrap();
    let thetas: Vec<Vec<f64>> = (0..5).map(|i| vec![0.2 * i as f64, -0.4]).collect();
    let x = [0.5, 0.5];
    let one = component_densities(&flow, &thetas, &x, &phis[..1], 0.0).unwrap();
    for row in &one.densities {
        assert_eq!(mean_and_variance(row).0, row[0]);
    }
    let fwd = component_densities(&flow, &thetas, &x, &phis, 0.0).unwrap();
    let mut rev_phis = phis.clone();
    rev_phis.reverse();
    let rev = component_densities(&flow, &thetas, &x, &rev_phis, 0.0).unwrap();
    assert_eq!(fwd.log_shift, rev.log_shift);
    for (a, b) in fwd.densities.iter().zip(&rev.densities) {
        let mut b = b.clone();
        b.reverse();
        assert_eq!(a, &b);
        let (ma, va) = mean_and_variance(a);
        let (mb, vb) = mean_and_variance(&b);
        assert!((ma - mb).abs() < 1e-14 && (va - vb).abs() < 1e-14);
    }
    // Components are the exponentiated log-densities divided by one shared factor.
    for (i, row) in fwd.densities.iter().enumerate() {
        for (s, &d) in row.iter().enumerate() {
            let direct = flow.log_prob(&thetas[i], &x, &phis[s]).unwrap();
            assert!((d.ln() + fwd.log_shift - direct).abs() < 1e-12);
        }
    }
}

#[test]
fn shared_shift_survives_extreme_log_densities() {
    let logs = vec![vec![-2000.0, -2001.0], vec![-2003.0, f64::NEG_INFINITY]];
    let c = ComponentDensities::from_log(logs, 0.0);
    assert_eq!(c.log_shift, -2000.0);
    assert_eq!(c.densities[0][0], 1.0);
    assert!((c.densities[1][0] - (-3.0f64).exp()).abs() < 1e-15);
    assert_eq!(c.densities[1][1], 0.0);
}

#[test]
fn floored_candidates_are_degenerate_and_rank_last() {
    let logs = vec![vec![-1.0, -2.0], vec![-50.0, -60.0], vec![-3.0, -1.5]];
    let comps = ComponentDensities::from_log(logs, 1e-10);
    assert_eq!(comps.densities[1], vec![0.0, 0.0]);
    let config = AcquisitionConfig {
        num_weight_samples: 2,
        density_floor: 1e-10,
        ..Default::default()
    };
    let thetas = vec![vec![0.0], vec![1.0], vec![2.0]];
    let scored = score_from_components(&thetas, &[0.0, 5.0, 0.0], comps, &config);
    assert!(scored[1].degenerate);
    assert_eq!(scored[1].score, 0.0);
    assert_eq!(ranking(&scored, 3).unwrap()[2], 1);
}

#[test]
fn config_validation() {
    assert!(AcquisitionConfig::default().validate().is_ok());
    let bad = [
        AcquisitionConfig { num_weight_samples: 1, ..Default::default() },
        AcquisitionConfig { lambda: 0.0, ..Default::default() },
        AcquisitionConfig { density_floor: -1.0, ..Default::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
}

#[test]
fn acquisition_dump_marks_selected_rows() {
    let c = candidates_with_scores(&[3.0, 1.0, 2.0]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("acq.csv");
    write_acquisition_csv(&path, &c, &[0, 2]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "#schema=acquisition/1");
    assert_eq!(lines[1], "index,proposal_density,marginal_density,variance,score,selected");
    assert!(lines[2].ends_with("true") && lines[3].ends_with("false") && lines[4].ends_with("true"));
}

struct Gaussians(Vec<f64>);

impl Components for Gaussians {
    fn count(&self) -> usize {
        self.0.len()
    }

    fn log_density(&self, s: usize, theta: &[f64]) -> f64 {
        -0.5 * (theta[0] - self.0[s]).powi(2) - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }

    fn sample(&self, s: usize, rng: &mut seed::Rng) -> Vec<f64> {
        vec![self.0[s] + rng.sample::<f64, _>(StandardNormal)]
    }
}

/// Trapezoid quadrature of both divergence directions for two unit Gaussians.
fn quadrature_divergences(means: &[f64]) -> (f64, f64) {
    let pdf = |t: f64, m: f64| (-0.5 * (t - m).powi(2)).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let (lo, hi, h) = (-15.0, 16.0, 1e-3);
    let n = ((hi - lo) / h) as usize;
    let (mut fwd, mut rev) = (0.0, 0.0);
    for i in 0..=n {
        let t = lo + i as f64 * h;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        let comps: Vec<f64> = means.iter().map(|&m| pdf(t, m)).collect();
        let mix = comps.iter().sum::<f64>() / comps.len() as f64;
        for &c in &comps {
            fwd += w * h * c * (c / mix).ln() / comps.len() as f64;
            rev += w * h * mix * (mix / c).ln() / comps.len() as f64;
        }
    }
    (fwd, rev)
}

#[test]
fn uncertainty_matches_quadrature_for_two_gaussians() {
    let family = Gaussians(vec![0.0, 1.0]);
    let (fwd, rev) = quadrature_divergences(&family.0);
    let mut rng = seed::rng_from(4);
    let est = distributional_uncertainty_of(&family, 200_000, KlDirection::ComponentToMarginal, &mut rng)
        .unwrap()
        .unwrap();
    assert!((est.value - fwd).abs() < 0.05 * fwd, "{} vs {fwd}", est.value);
    let est = distributional_uncertainty_of(&family, 200_000, KlDirection::MarginalToComponent, &mut rng)
        .unwrap()
        .unwrap();
    assert!((est.value - rev).abs() < 0.05 * rev, "{} vs {rev}", est.value);
}

#[test]
fn uncertainty_vanishes_without_dropout_and_is_positive_with_it() {
    let x = [0.1, 0.4];
    let flow = random_flow(0.0, 3);
    let phis = flow.weight_samples(5, 1).unwrap();
    let mut rng = seed::rng_from(1);
    let est = distributional_uncertainty(&flow, &x, &phis, 500, KlDirection::default(), &mut rng)
        .unwrap()
        .unwrap();
    assert!(est.value.abs() <= 3.0 * est.standard_error + 1e-12);

    let flow = random_flow(0.4, 3);
    let phis = flow.weight_samples(20, 1).unwrap();
    for direction in [KlDirection::ComponentToMarginal, KlDirection::MarginalToComponent] {
        let est = distributional_uncertainty(&flow, &x, &phis, 2000, direction, &mut rng)
            .unwrap()
            .unwrap();
        assert!(est.value > -3.0 * est.standard_error, "{direction:?}: {est:?}");
    }
}

#[test]
fn mutual_information_hand_examples() {
    let (mi, kl) = mi_identity_oracle(&[vec![0.4, 0.1], vec![0.1, 0.4]]).unwrap();
    let expected = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
    assert!((mi - expected).abs() < 1e-15 && (kl - expected).abs() < 1e-15);
    assert!((mi - 0.1927).abs() < 1e-4);

    let (mi, kl) = mi_identity_oracle(&[vec![0.06, 0.14], vec![0.24, 0.56]]).unwrap();
    assert!(mi.abs() < 1e-15 && kl.abs() < 1e-15);

    let p = [0.2, 0.3, 0.5];
    let diag: Vec<Vec<f64>> = (0..3)
        .map(|i| (0..3).map(|j| if i == j { p[i] } else { 0.0 }).collect())
        .collect();
    let entropy: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
    let (mi, kl) = mi_identity_oracle(&diag).unwrap();
    assert!((mi - entropy).abs() < 1e-14 && (kl - entropy).abs() < 1e-14);

    assert!(mi_identity_oracle(&[vec![0.5, 0.6]]).is_err());
    assert!(mi_identity_oracle(&[vec![1.5, -0.5]]).is_err());
    assert!(mi_identity_oracle(&[vec![0.5], vec![0.25, 0.25]]).is_err());
}

fn joint_table() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
        prop::collection::vec(prop::collection::vec(0.0f64..1.0, c), r).prop_map(|t| {
            let total: f64 = t.iter().flatten().sum::<f64>().max(1e-300);
            t.into_iter()
                .map(|row| row.into_iter().map(|v| v / total).collect())
                .collect()
        })
    })
}

proptest! {
    #[test]
    fn mutual_information_equals_expected_divergence(joint in joint_table()) {
        prop_assume!((joint.iter().flatten().sum::<f64>() - 1.0).abs() < 1e-12);
        let (mi, kl) = mi_identity_oracle(&joint).unwrap();
        prop_assert!((mi - kl).abs() < 1e-12);
        prop_assert!(mi > -1e-12);
    }

    #[test]
    fn score_scales_quadratically_with_components(
        comps in prop::collection::vec(0.0f64..10.0, 2..20),
        c in 0.01f64..100.0,
        p in 0.01f64..10.0,
    ) {
        let base = acquisition_score(&comps, p, 1.0);
        let scaled: Vec<f64> = comps.iter().map(|v| v * c).collect();
        let s = acquisition_score(&scaled, p, 1.0);
        prop_assert!((s - c * c * base).abs() <= 1e-9 * (c * c * base).max(1e-300));
    }

    #[test]
    fn unweighted_score_equals_unit_proposal(
        logs in prop::collection::vec(prop::collection::vec(-5.0f64..0.0, 3), 1..10),
        lp in prop::collection::vec(-3.0f64..3.0, 10),
        lambda in 0.25f64..3.0,
    ) {
        let n = logs.len();
        let thetas: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        let unweighted = AcquisitionConfig { num_weight_samples: 3, lambda, use_proposal_weight: false, ..Default::default() };
        let weighted = AcquisitionConfig { use_proposal_weight: true, ..unweighted.clone() };
        let a = score_from_components(&thetas, &lp[..n], ComponentDensities::from_log(logs.clone(), 0.0), &unweighted);
        let b = score_from_components(&thetas, &vec![0.0; n], ComponentDensities::from_log(logs, 0.0), &weighted);
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.score, y.score);
        }
    }

    #[test]
    fn lambda_monotonicity(v in 1e-6f64..1e3, l1 in 0.1f64..3.0, dl in 0.01f64..2.0) {
        prop_assume!((v - 1.0).abs() > 1e-6);
        // Two components at ±√v around their mean give variance v.
        let comps = [5.0e3 - v.sqrt(), 5.0e3 + v.sqrt()];
        let (_, var) = mean_and_variance(&comps);
        let lo = acquisition_score(&comps, 1.0, l1);
        let hi = acquisition_score(&comps, 1.0, l1 + dl);
        if var < 1.0 {
            prop_assert!(hi < lo);
        } else if var > 1.0 {
            prop_assert!(hi > lo);
        }
    }

    #[test]
    fn selection_is_invariant_to_candidate_order(
        scores in prop::collection::vec(prop::sample::select(vec![0.0, 0.5, 1.0, 2.0, 3.0]), 1..30),
        seed in any::<u64>(),
        frac in 0.0f64..=1.0,
    ) {
        let b = ((scores.len() as f64) * frac) as usize;
        let cands = candidates_with_scores(&scores);
        let picked: Vec<usize> = select_top_b(&cands, b).unwrap().into_iter().map(|p| cands[p].index).collect();
        let mut shuffled = cands.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut seed::rng_from(seed));
        let again: Vec<usize> = select_top_b(&shuffled, b).unwrap().into_iter().map(|p| shuffled[p].index).collect();
        prop_assert_eq!(picked, again);
    }
}
