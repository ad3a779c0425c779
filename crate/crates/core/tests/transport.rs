mod common;

use adattt::transport::{self, TransportPlan};
use common::rng;
use proptest::prelude::*;
use rand::Rng;

fn lse(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Textbook log-domain Sinkhorn, run for a fixed number of sweeps.
fn reference_plan(cost: &[Vec<f64>], a: &[f64], b: &[f64], eps: f64, sweeps: usize) -> Vec<Vec<f64>> {
    let (n, m) = (a.len(), b.len());
    let (mut f, mut g) = (vec![0.0; n], vec![0.0; m]);
    for _ in 0..sweeps {
        for i in 0..n {
            f[i] = eps * a[i].ln() - eps * lse((0..m).map(|j| (g[j] - cost[i][j]) / eps));
        }
        for j in 0..m {
            g[j] = eps * b[j].ln() - eps * lse((0..n).map(|i| (f[i] - cost[i][j]) / eps));
        }
    }
    (0..n)
        .map(|i| (0..m).map(|j| ((f[i] + g[j] - cost[i][j]) / eps).exp()).collect())
        .collect()
}

fn random_points<R: Rng>(n: usize, d: usize, scale: f64, r: &mut R) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| r.random_range(-scale..scale)).collect()).collect()
}

fn simplex<R: Rng>(n: usize, r: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| r.random_range(0.05..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn residuals(plan: &TransportPlan, a: &[f64], b: &[f64]) -> f64 {
    let (r, c) = plan.marginal_residuals(a, b);
    r.max(c)
}

#[test]
fn agrees_with_plain_log_domain_iteration() {
    let mut r = rng(31);
    for _ in 0..40 {
        let k = r.random_range(2..=6);
        let cost: Vec<Vec<f64>> = (0..k).map(|_| (0..k).map(|_| r.random_range(0.0..2.0)).collect()).collect();
        let (a, b) = (simplex(k, &mut r), simplex(k, &mut r));
        let plan = transport::sinkhorn(&cost, &a, &b, 0.5, 1000, 1e-12).unwrap();
        assert!(plan.converged);
        let oracle = reference_plan(&cost, &a, &b, 0.5, 20_000);
        for (p, q) in plan.gamma.iter().flatten().zip(oracle.iter().flatten()) {
            assert!((p - q).abs() < 1e-9, "{p} vs {q}");
        }
    }
}

#[test]
fn two_by_two_matches_lp_solution() {
    let cost = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
    let u = transport::uniform(2);
    let plan = transport::sinkhorn(&cost, &u, &u, 0.01, 1000, 1e-9).unwrap();
    assert!((plan.gamma[0][0] - 0.5).abs() < 1e-3 && (plan.gamma[1][1] - 0.5).abs() < 1e-3);
    assert!(transport::ot_cost(&plan) < 1e-3);
    assert!(common::lp_uniform_cost(&cost) == 0.0);
}

#[test]
fn cost_is_never_far_below_the_lp_value() {
    let mut r = rng(32);
    let u = transport::uniform(4);
    for _ in 0..200 {
        let cost: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| r.random_range(0.0..5.0)).collect()).collect();
        let exact = common::lp_uniform_cost(&cost);
        for eps in [1.0, 0.1, 0.01] {
            let plan = transport::sinkhorn(&cost, &u, &u, eps, 10_000, 1e-10).unwrap();
            assert!(transport::ot_cost(&plan) >= exact - eps * 16f64.ln() - 1e-9);
        }
    }
}

#[test]
fn cost_decreases_toward_lp_value_as_epsilon_shrinks() {
    let mut r = rng(33);
    let u = transport::uniform(4);
    for _ in 0..100 {
        let pts = random_points(8, 2, 2.0, &mut r);
        let cost = transport::cost_matrix(&pts[..4], &pts[4..]);
        let exact = common::lp_uniform_cost(&cost);
        let costs: Vec<f64> = [1.0, 0.1, 0.01]
            .iter()
            .map(|&eps| {
                let plan = transport::sinkhorn(&cost, &u, &u, eps, 100_000, 1e-12).unwrap();
                assert!(plan.converged);
                transport::ot_cost(&plan)
            })
            .collect();
        assert!(costs[0] >= costs[1] - 1e-9 && costs[1] >= costs[2] - 1e-9, "{costs:?}");
        assert!(costs[2] >= exact - 1e-9);
        assert!(costs[2] - exact <= costs[0] - exact + 1e-9);
    }
}

#[test]
fn augmented_noise_has_prototype_variance() {
    let mut r = rng(34);
    let prototypes = vec![vec![0.0, 1.0, 3.0], vec![2.0, -1.0, 3.0], vec![1.0, 4.0, 3.0], vec![5.0, 0.0, 3.0]];
    let var = transport::prototype_variances(&prototypes);
    assert_eq!(var[2], 0.0);
    let z = vec![0.5, 0.5, 0.5];
    let draws = 10_000;
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut count = 0.0;
    for _ in 0..draws {
        let aug = transport::augment(&z, &prototypes, &mut r).unwrap();
        assert_eq!(aug.rows[0], z);
        for n in &aug.noise[1..] {
            count += 1.0;
            for d in 0..3 {
                sum[d] += n[d];
                sq[d] += n[d] * n[d];
            }
        }
    }
    for d in 0..2 {
        let mean = sum[d] / count;
        let emp = sq[d] / count - mean * mean;
        assert!((emp / var[d] - 1.0).abs() < 0.05, "dim {d}: {emp} vs {}", var[d]);
    }
    assert_eq!(sq[2], 0.0);
}

#[test]
fn seeded_augment_and_plan_are_reproducible() {
    let prototypes = random_points(4, 5, 1.0, &mut rng(35));
    let z = vec![0.3; 5];
    let run = || {
        let aug = transport::augment(&z, &prototypes, &mut rng(36)).unwrap();
        let cost = transport::cost_matrix(&aug.rows, &prototypes);
        let u = transport::uniform(4);
        transport::sinkhorn(&cost, &u, &u, 0.1, 1000, 1e-6).unwrap()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn converged_plans_are_feasible(seed in any::<u64>(), k in 2usize..=8, eps in 0.02f64..2.0) {
        let mut r = rng(seed);
        let rows = random_points(k, 3, 3.0, &mut r);
        let protos = random_points(k, 3, 3.0, &mut r);
        let cost = transport::cost_matrix(&rows, &protos);
        let (a, b) = (simplex(k, &mut r), simplex(k, &mut r));
        let plan = transport::sinkhorn(&cost, &a, &b, eps, 1000, 1e-8).unwrap();
        prop_assert!(plan.converged);
        prop_assert!(residuals(&plan, &a, &b) < 1e-6);
        prop_assert!(plan.gamma.iter().flatten().all(|&g| g >= 0.0 && g.is_finite()));
    }

    #[test]
    fn translation_leaves_cost_and_plan_unchanged(seed in any::<u64>(), shift in prop::collection::vec(-5.0f64..5.0, 3)) {
        let mut r = rng(seed);
        let rows = random_points(4, 3, 2.0, &mut r);
        let protos = random_points(4, 3, 2.0, &mut r);
        let moved = |v: &[Vec<f64>]| -> Vec<Vec<f64>> {
            v.iter().map(|p| p.iter().zip(&shift).map(|(a, s)| a + s).collect()).collect()
        };
        let c0 = transport::cost_matrix(&rows, &protos);
        let c1 = transport::cost_matrix(&moved(&rows), &moved(&protos));
        for (x, y) in c0.iter().flatten().zip(c1.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
        let u = transport::uniform(4);
        let p0 = transport::sinkhorn(&c0, &u, &u, 0.1, 1000, 1e-9).unwrap();
        let p1 = transport::sinkhorn(&c1, &u, &u, 0.1, 1000, 1e-9).unwrap();
        for (x, y) in p0.gamma.iter().flatten().zip(p1.gamma.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-8);
        }
        prop_assert!((transport::ot_cost(&p0) - transport::ot_cost(&p1)).abs() < 1e-8);
    }

    #[test]
    fn variances_ignore_a_common_shift(seed in any::<u64>(), c in -10.0f64..10.0) {
        let protos = random_points(5, 4, 2.0, &mut rng(seed));
        let shifted: Vec<Vec<f64>> = protos.iter().map(|p| p.iter().map(|v| v + c).collect()).collect();
        let (v0, v1) = (transport::prototype_variances(&protos), transport::prototype_variances(&shifted));
        for (a, b) in v0.iter().zip(&v1) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
