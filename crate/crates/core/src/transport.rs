//! Partial transport between a test embedding and the prototypes.
//!
//! The embedding is augmented with `k − 1` noisy duplicates so the problem becomes a
//! balanced `k × k` entropic transport, solved with log-stabilized Sinkhorn iterations.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_MAX_ITER: usize = 1000;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("need at least two prototypes, got {0}")]
    TooFewPrototypes(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("marginals must be strictly positive and sum to 1")]
    InvalidMarginals,
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("non-finite value in sinkhorn iteration {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, TransportError>;

/// The test embedding (row 0) followed by perturbed duplicates.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSet {
    pub rows: Vec<Vec<f64>>,
    /// Noise added to each row; row 0 is all zeros.
    pub noise: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub gamma: Vec<Vec<f64>>,
    pub cost: Vec<Vec<f64>>,
    pub epsilon: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

/// Per-dimension population variance across prototypes (divisor `k`).
pub fn prototype_variances(prototypes: &[Vec<f64>]) -> Vec<f64> {
    let k = prototypes.len();
    if k == 0 {
        return Vec::new();
    }
    let d = prototypes[0].len();
    (0..d)
        .map(|c| {
            let mu = prototypes.iter().map(|p| p[c]).sum::<f64>() / k as f64;
            prototypes.iter().map(|p| (p[c] - mu).powi(2)).sum::<f64>() / k as f64
        })
        .collect()
}

/// `z` plus `k − 1` duplicates with independent `N(0, σ_d²)` noise per dimension.
pub fn augment<R: Rng + ?Sized>(
    z: &[f64],
    prototypes: &[Vec<f64>],
    rng: &mut R,
) -> Result<AugmentedSet> {
    let k = prototypes.len();
    if k < 2 {
        return Err(TransportError::TooFewPrototypes(k));
    }
    if prototypes.iter().any(|p| p.len() != z.len()) {
        return Err(TransportError::Shape(format!(
            "embedding has {} dims, prototypes differ",
            z.len()
        )));
    }
    let sd: Vec<f64> = prototype_variances(prototypes)
        .into_iter()
        .map(f64::sqrt)
        .collect();
    let mut rows = vec![z.to_vec()];
    let mut noise = vec![vec![0.0; z.len()]];
    for _ in 1..k {
        let n: Vec<f64> = sd
            .iter()
            .map(|&s| {
                if s > 0.0 {
                    Normal::new(0.0, s).map(|d| d.sample(rng)).unwrap_or(0.0)
                } else {
                    0.0
                }
            })
            .collect();
        rows.push(z.iter().zip(&n).map(|(a, b)| a + b).collect());
        noise.push(n);
    }
    Ok(AugmentedSet { rows, noise })
}

/// Squared Euclidean distance from every row to every prototype.
pub fn cost_matrix(rows: &[Vec<f64>], prototypes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            prototypes
                .iter()
                .map(|p| r.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect()
        })
        .collect()
}

fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_marginal(v: &[f64]) -> Result<()> {
    let s: f64 = v.iter().sum();
    if v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) || (s - 1.0).abs() > 1e-9 {
        return Err(TransportError::InvalidMarginals);
    }
    Ok(())
}

/// Plain sweeps before each round of Newton steps.
const PLAIN_SWEEPS: usize = 10;
/// Newton gives way to plain sweeps when the line search has to shrink its first
/// trial step by more than this.
const MIN_NEWTON_STEP: f64 = 1.0 / 64.0;
/// Scalings outside `[1/ABSORB, ABSORB]` are folded into the log-domain duals.
const ABSORB: f64 = 1e30;
/// Largest change of any log-scaling on the first trial of a Newton line search.
const MAX_LOG_STEP: f64 = 8.0;

/// Log-stabilized state: the plan is `u_i K_ij v_j` with
/// `K_ij = exp((f_i + g_j − C_ij)/ε)`. The duals `f, g` live in the log domain;
/// `u, v` stay bounded and are absorbed into them before they can overflow, so
/// sweeps cost multiply-adds instead of exponentials. Matrices are row-major.
struct Solver<'a> {
    cost: &'a [Vec<f64>],
    a: &'a [f64],
    b: &'a [f64],
    eps: f64,
    n: usize,
    m: usize,
    f: Vec<f64>,
    g: Vec<f64>,
    kernel: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    // Scratch.
    kv: Vec<f64>,
    ku: Vec<f64>,
    gamma: Vec<f64>,
    hess: Vec<f64>,
    grad: Vec<f64>,
    dir: Vec<f64>,
    support: Vec<usize>,
    u0: Vec<f64>,
    v0: Vec<f64>,
}

impl<'a> Solver<'a> {
    fn new(cost: &'a [Vec<f64>], a: &'a [f64], b: &'a [f64], eps: f64) -> Self {
        let (n, m) = (a.len(), b.len());
        let mut s = Self {
            cost,
            a,
            b,
            eps,
            n,
            m,
            f: vec![0.0; n],
            g: vec![0.0; m],
            kernel: vec![0.0; n * m],
            u: vec![1.0; n],
            v: vec![1.0; m],
            kv: vec![0.0; n],
            ku: vec![0.0; m],
            gamma: vec![0.0; n * m],
            hess: vec![0.0; m * m],
            grad: vec![0.0; m],
            dir: vec![0.0; m],
            support: Vec::with_capacity(m),
            u0: vec![0.0; n],
            v0: vec![0.0; m],
        };
        // Shifting each row by its smallest cost keeps every kernel row from
        // underflowing; sweeps fall back to the log domain if a column does.
        for (f, row) in s.f.iter_mut().zip(cost) {
            *f = row.iter().cloned().fold(f64::INFINITY, f64::min);
        }
        s.rebuild_kernel();
        s
    }

    fn rebuild_kernel(&mut self) {
        for (i, row) in self.kernel.chunks_exact_mut(self.m).enumerate() {
            for (j, k) in row.iter_mut().enumerate() {
                *k = ((self.f[i] + self.g[j] - self.cost[i][j]) / self.eps).exp();
            }
        }
    }

    fn fold_scalings(&mut self) {
        for (f, u) in self.f.iter_mut().zip(self.u.iter_mut()) {
            *f += self.eps * u.ln();
            *u = 1.0;
        }
        for (g, v) in self.g.iter_mut().zip(self.v.iter_mut()) {
            *g += self.eps * v.ln();
            *v = 1.0;
        }
    }

    fn absorb(&mut self) {
        self.fold_scalings();
        self.rebuild_kernel();
    }

    /// One exact row and column update in the log domain; re-anchors the kernel
    /// when the scaled form underflows.
    fn log_sweep(&mut self) {
        self.fold_scalings();
        let (eps, cost) = (self.eps, self.cost);
        for (i, f) in self.f.iter_mut().enumerate() {
            *f = eps * self.a[i].ln() - eps * log_sum_exp(self.g.iter().zip(&cost[i]).map(|(g, c)| (g - c) / eps));
        }
        for (j, g) in self.g.iter_mut().enumerate() {
            *g = eps * self.b[j].ln() - eps * log_sum_exp(self.f.iter().zip(cost).map(|(f, c)| (f - c[j]) / eps));
        }
        self.rebuild_kernel();
    }

    fn out_of_range(&self) -> bool {
        self.u.iter().chain(&self.v).any(|&s| !(1.0 / ABSORB..=ABSORB).contains(&s))
    }

    /// `kv ← K v`; `false` if some entry vanished or overflowed.
    fn kernel_v(&mut self) -> bool {
        for (s, row) in self.kv.iter_mut().zip(self.kernel.chunks_exact(self.m)) {
            *s = row.iter().zip(&self.v).map(|(k, v)| k * v).sum();
        }
        self.kv.iter().all(|s| s.is_normal())
    }

    /// `ku ← Kᵀ u`; `false` if some entry vanished or overflowed.
    fn kernel_t_u(&mut self) -> bool {
        self.ku.iter_mut().for_each(|s| *s = 0.0);
        for (row, u) in self.kernel.chunks_exact(self.m).zip(&self.u) {
            for (s, k) in self.ku.iter_mut().zip(row) {
                *s += k * u;
            }
        }
        self.ku.iter().all(|s| s.is_normal())
    }

    fn set_rows(&mut self) {
        for ((u, a), s) in self.u.iter_mut().zip(self.a).zip(&self.kv) {
            *u = a / s;
        }
    }

    /// Exact row scaling; `false` (scalings untouched) on underflow.
    fn scale_rows(&mut self) -> bool {
        let ok = self.kernel_v();
        if ok {
            self.set_rows();
        }
        ok
    }

    fn col_residual(&mut self) -> f64 {
        if !self.kernel_t_u() {
            return f64::INFINITY;
        }
        self.ku.iter().zip(&self.v).zip(self.b).map(|((s, v), b)| (s * v - b).abs()).sum()
    }

    /// Semi-dual objective, maximized at the optimum when the rows are exact.
    fn semi_dual(&self) -> f64 {
        let eps = self.eps;
        let fa: f64 = self.f.iter().zip(&self.u).zip(self.a).map(|((f, u), a)| (f + eps * u.ln()) * a).sum();
        let gb: f64 = self.g.iter().zip(&self.v).zip(self.b).map(|((g, v), b)| (g + eps * v.ln()) * b).sum();
        fa + gb
    }

    /// Alternating sweeps until both L1 residuals drop below `tol` or `budget`
    /// sweeps are spent. Returns (sweeps, converged).
    fn sweeps(&mut self, budget: usize, tol: f64) -> (usize, bool) {
        if !self.scale_rows() {
            self.log_sweep();
        }
        for it in 1..=budget {
            if !self.kernel_t_u() {
                self.log_sweep();
                continue;
            }
            for ((v, b), s) in self.v.iter_mut().zip(self.b).zip(&self.ku) {
                *v = b / s;
            }
            // Columns are exact now; the next row update gives the row sums for free.
            if !self.kernel_v() {
                self.log_sweep();
                continue;
            }
            let row_res: f64 = self.u.iter().zip(&self.kv).zip(self.a).map(|((u, s), a)| (u * s - a).abs()).sum();
            if row_res < tol && self.col_residual() < tol {
                return (it, true);
            }
            self.set_rows();
            if self.out_of_range() {
                self.absorb();
            }
        }
        (budget, false)
    }

    /// Newton ascent on the semi-dual in `g` with the rows kept exact. Returns
    /// (steps, converged); stops early without convergence if the line search stalls.
    fn newton(&mut self, budget: usize, tol: f64) -> (usize, bool) {
        let (n, m) = (self.n, self.m);
        if !self.scale_rows() {
            return (0, false);
        }
        let mut steps = 0;
        loop {
            for i in 0..n {
                for j in 0..m {
                    self.gamma[i * m + j] = self.u[i] * self.kernel[i * m + j] * self.v[j];
                }
            }
            // ku holds the column sums, dir the gradient b − col.
            self.ku.iter_mut().for_each(|s| *s = 0.0);
            for row in self.gamma.chunks_exact(m) {
                for (s, g) in self.ku.iter_mut().zip(row) {
                    *s += g;
                }
            }
            for ((d, b), c) in self.dir.iter_mut().zip(self.b).zip(&self.ku) {
                *d = b - c;
            }
            let residual: f64 = self.dir.iter().map(|v| v.abs()).sum();
            if !residual.is_finite() {
                return (steps, false);
            }
            if residual < tol {
                return (steps, true);
            }
            if steps == budget {
                return (steps, false);
            }
            steps += 1;
            // −ε·Hessian = diag(col) − Σ_i γ_i γ_iᵀ / a_i; the constant direction is
            // its null space (g and f trade a shift), pinned by adding 11ᵀ/m.
            // Entries that underflow leave near-singular blocks; a tiny ridge keeps
            // the factorization from failing on roundoff. Lower triangle only.
            let ridge = 1e-10 * self.ku.iter().sum::<f64>() / m as f64;
            for j in 0..m {
                for l in 0..=j {
                    self.hess[j * m + l] = 1.0 / m as f64;
                }
                self.hess[j * m + j] += self.ku[j] + ridge;
            }
            // Near-permutation plans leave a few significant entries per row;
            // products with entries below the ridge are dropped.
            for (row, a) in self.gamma.chunks_exact(m).zip(self.a) {
                self.support.clear();
                self.support.extend((0..m).filter(|&j| row[j] >= ridge));
                for (p, &j) in self.support.iter().enumerate() {
                    let w = row[j] / a;
                    for &l in &self.support[..=p] {
                        self.hess[j * m + l] -= w * row[l];
                    }
                }
            }
            self.grad.copy_from_slice(&self.dir);
            if !cholesky_solve(&mut self.hess, m, &mut self.dir) {
                return (steps, false);
            }
            let slope = self.eps * self.grad.iter().zip(&self.dir).map(|(g, d)| g * d).sum::<f64>();
            let start = self.semi_dual();
            self.u0.copy_from_slice(&self.u);
            self.v0.copy_from_slice(&self.v);
            // Far from the optimum the full step can move a dual by many ε; start
            // where no scaling changes by more than a factor exp(MAX_LOG_STEP).
            let longest = self.dir.iter().fold(0.0f64, |m, d| m.max(d.abs()));
            let mut t = (MAX_LOG_STEP / longest).min(1.0);
            let t_min = t * MIN_NEWTON_STEP;
            loop {
                // g moves by ε·t·dir, i.e. v scales by exp(t·dir).
                for ((v, v0), d) in self.v.iter_mut().zip(&self.v0).zip(&self.dir) {
                    *v = v0 * (t * d).exp();
                }
                // Near the optimum the objective gain drops below roundoff; only
                // then does a smaller marginal residual count as progress.
                if self.scale_rows() {
                    let gain = self.semi_dual() - start;
                    let flat = gain.abs() <= 1e-12 * (1.0 + start.abs());
                    if gain >= 1e-4 * t * slope || (flat && self.col_residual() < residual) {
                        break;
                    }
                }
                t *= 0.5;
                if t < t_min {
                    self.u.copy_from_slice(&self.u0);
                    self.v.copy_from_slice(&self.v0);
                    return (steps, false);
                }
            }
            if self.out_of_range() {
                self.absorb();
            }
        }
    }

    fn plan(&self) -> Vec<Vec<f64>> {
        self.kernel
            .chunks_exact(self.m)
            .zip(&self.u)
            .map(|(row, u)| row.iter().zip(&self.v).map(|(k, v)| u * k * v).collect())
            .collect()
    }
}

/// Entropic OT by alternating row/column scaling, stabilized in the log domain.
///
/// A few plain sweeps are followed by Newton steps on the column duals (rows
/// stay exactly scaled), which converge to the same plan quadratically instead
/// of linearly; when Newton stalls, sweeps take over again. Every sweep or
/// Newton step counts toward `max_iter`. Stops once the L1 residuals of both
/// marginals fall below `tol`; non-convergence is reported through
/// `converged`, not as an error.
pub fn sinkhorn(
    cost: &[Vec<f64>],
    a: &[f64],
    b: &[f64],
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<TransportPlan> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(TransportError::InvalidEpsilon(epsilon));
    }
    let (n, m) = (a.len(), b.len());
    if cost.len() != n || cost.iter().any(|r| r.len() != m) {
        return Err(TransportError::Shape(format!("cost is not {n}×{m}")));
    }
    check_marginal(a)?;
    check_marginal(b)?;
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(TransportError::NonFinite(0));
    }

    let mut solver = Solver::new(cost, a, b, epsilon);
    let mut used = 0;
    let mut converged = false;
    while !converged && used < max_iter {
        let (its, conv) = solver.sweeps((max_iter - used).min(PLAIN_SWEEPS), tol);
        used += its;
        converged = conv;
        if converged || used == max_iter {
            break;
        }
        let (its, conv) = solver.newton(max_iter - used, tol);
        used += its;
        converged = conv;
    }

    let gamma = solver.plan();
    if gamma.iter().flatten().any(|v| !v.is_finite()) {
        return Err(TransportError::NonFinite(used));
    }
    Ok(TransportPlan {
        gamma,
        cost: cost.to_vec(),
        epsilon,
        iterations_used: used,
        converged,
    })
}

/// Solves `h x = r` in place (`r` becomes `x`) for a symmetric positive definite
/// row-major `m × m` matrix, reading and overwriting only its lower triangle.
/// Returns `false` if `h` is not positive definite.
fn cholesky_solve(h: &mut [f64], m: usize, r: &mut [f64]) -> bool {
    for i in 0..m {
        let (done, rest) = h.split_at_mut(i * m);
        let row = &mut rest[..m];
        for j in 0..i {
            let lj = &done[j * m..j * m + j + 1];
            let dot: f64 = row[..j].iter().zip(&lj[..j]).map(|(a, b)| a * b).sum();
            row[j] = (row[j] - dot) / lj[j];
        }
        let d = row[i] - row[..i].iter().map(|v| v * v).sum::<f64>();
        if !(d > 0.0) {
            return false;
        }
        row[i] = d.sqrt();
    }
    for i in 0..m {
        for k in 0..i {
            r[i] -= h[i * m + k] * r[k];
        }
        r[i] /= h[i * m + i];
    }
    for i in (0..m).rev() {
        for k in i + 1..m {
            r[i] -= h[k * m + i] * r[k];
        }
        r[i] /= h[i * m + i];
    }
    true
}

pub fn uniform(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

/// `Σ γ_ij C_ij`.
pub fn ot_cost(plan: &TransportPlan) -> f64 {
    plan.gamma
        .iter()
        .zip(&plan.cost)
        .map(|(g, c)| g.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.gamma.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let m = self.gamma.first().map_or(0, Vec::len);
        (0..m).map(|j| self.gamma.iter().map(|r| r[j]).sum()).collect()
    }

    /// L1 residuals of the row and column marginals.
    pub fn marginal_residuals(&self, a: &[f64], b: &[f64]) -> (f64, f64) {
        let r = self.row_sums().iter().zip(a).map(|(x, y)| (x - y).abs()).sum();
        let c = self.col_sums().iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
        (r, c)
    }
}
