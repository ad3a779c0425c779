#![allow(dead_code)]

use adattt::model::{Architecture, FeatureStats, ModelState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central differences of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let fp = f(&p);
            p[i] = x[i] - h;
            let fm = f(&p);
            p[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, 1e-4)`, maximized over coordinates.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

/// Small random network with random prototypes.
pub fn random_model<R: Rng>(rng: &mut R) -> ModelState {
    let d = rng.random_range(3..=8);
    let gated = rng.random_range(0..=d);
    let depth = rng.random_range(0..=2);
    let hidden = (0..depth).map(|_| rng.random_range(2..=8)).collect();
    let arch = Architecture {
        input_dim: d,
        gated_dim: gated,
        hidden,
        embed_dim: rng.random_range(2..=6),
        k: rng.random_range(2..=5),
    };
    let reservoir: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut m = ModelState::new(arch, FeatureStats::identity(d, reservoir), rng).unwrap();
    for r in m.tslm_raw.iter_mut() {
        *r = rng.random_range(-3.0..1.0);
    }
    for l in m.encoder.iter_mut().chain([&mut m.main_head, &mut m.ssl_head]) {
        for b in l.bias.iter_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    for p in m.prototypes.iter_mut() {
        p.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    m
}

pub fn random_input<R: Rng>(m: &ModelState, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let x = (0..m.arch.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let dt = (0..m.arch.gated_dim).map(|_| rng.random_range(0.0..10.0)).collect();
    (x, dt)
}

/// All permutations of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        heap(k - 1, a, out);
        for i in 0..k - 1 {
            if k % 2 == 0 {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
            heap(k - 1, a, out);
        }
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    heap(n, &mut a, &mut out);
    out
}

/// Exact OT cost under uniform marginals: the optimum sits at a vertex of the
/// Birkhoff polytope, i.e. a permutation matrix scaled by 1/n.
pub fn lp_uniform_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    permutations(n)
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>() / n as f64)
        .fold(f64::INFINITY, f64::min)
}

pub fn plan_cost(gamma: &[Vec<f64>], cost: &[Vec<f64>]) -> f64 {
    gamma
        .iter()
        .zip(cost)
        .map(|(g, c)| g.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// Shannon entropy in bits of a nonnegative table, skipping zeros.
pub fn bits(p: impl IntoIterator<Item = f64>) -> f64 {
    p.into_iter().filter(|&v| v > 0.0).map(|v| -v * v.log2()).sum()
}
