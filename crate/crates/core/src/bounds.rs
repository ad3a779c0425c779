//! Entropies, mutual information and Bayes error on small discrete joints over
//! `(Y_s, Z, Y_m)`, plus checkers for the data-processing inequality and the
//! Fano/Hellman error sandwich (binary and multi-class).
//!
//! All information quantities are in bits.

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack for the inequality checks.
pub const CHECK_TOL: f64 = 1e-9;
pub const NORMALIZATION_TOL: f64 = 1e-12;
pub const MARKOV_TOL: f64 = 1e-10;
pub const INVERSE_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error("negative probability mass {0}")]
    NegativeMass(f64),
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("table has {got} cells, expected {expected}")]
    Shape { expected: usize, got: usize },
    #[error("joint does not factor as Y_s -> Z -> Y_m (max deviation {0:e})")]
    NotMarkov(f64),
    #[error("binary check needs 2 outcome classes, got {0}")]
    NotBinary(usize),
    #[error("entropy {0} outside [0, 1] bits")]
    EntropyRange(f64),
    #[error("empty alphabet")]
    EmptyAlphabet,
}

pub type Result<T> = std::result::Result<T, BoundsError>;

pub const YS: u8 = 0b001;
pub const Z: u8 = 0b010;
pub const YM: u8 = 0b100;

/// Joint table `p[ys][z][ym]`, stored flat in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    pub s: usize,
    pub r: usize,
    pub m: usize,
    pub p: Vec<f64>,
    pub markov: bool,
}

impl DiscreteJoint {
    pub fn new(s: usize, r: usize, m: usize, p: Vec<f64>, markov: bool) -> Result<Self> {
        if s == 0 || r == 0 || m == 0 {
            return Err(BoundsError::EmptyAlphabet);
        }
        if p.len() != s * r * m {
            return Err(BoundsError::Shape {
                expected: s * r * m,
                got: p.len(),
            });
        }
        if let Some(&v) = p.iter().find(|v| !(**v >= 0.0)) {
            return Err(BoundsError::NegativeMass(v));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(BoundsError::NotNormalized(total));
        }
        let j = Self { s, r, m, p, markov };
        if markov {
            let dev = j.markov_deviation();
            if dev > MARKOV_TOL {
                return Err(BoundsError::NotMarkov(dev));
            }
        }
        Ok(j)
    }

    /// Builds `p(ys)·p(z|ys)·p(ym|z)`.
    pub fn from_chain(p_ys: &[f64], p_z_given_ys: &[Vec<f64>], p_ym_given_z: &[Vec<f64>]) -> Result<Self> {
        let s = p_ys.len();
        let r = p_z_given_ys.first().map_or(0, Vec::len);
        let m = p_ym_given_z.first().map_or(0, Vec::len);
        if p_z_given_ys.len() != s || p_ym_given_z.len() != r {
            return Err(BoundsError::Shape {
                expected: s * r,
                got: p_z_given_ys.len() * p_ym_given_z.len(),
            });
        }
        let mut p = Vec::with_capacity(s * r * m);
        for a in 0..s {
            for b in 0..r {
                for c in 0..m {
                    p.push(p_ys[a] * p_z_given_ys[a][b] * p_ym_given_z[b][c]);
                }
            }
        }
        Self::new(s, r, m, p, true)
    }

    pub fn at(&self, ys: usize, z: usize, ym: usize) -> f64 {
        self.p[(ys * self.r + z) * self.m + ym]
    }

    /// Largest `|p(ys,z,ym) − p(ys,z)·p(ym|z)|`, which is zero iff the chain factors.
    pub fn markov_deviation(&self) -> f64 {
        let p_z = self.marginal(Z);
        let p_z_ym = self.marginal(Z | YM);
        let p_ys_z = self.marginal(YS | Z);
        let mut dev: f64 = 0.0;
        for a in 0..self.s {
            for b in 0..self.r {
                for c in 0..self.m {
                    let pred = if p_z[b] > 0.0 {
                        p_ys_z[a * self.r + b] * p_z_ym[b * self.m + c] / p_z[b]
                    } else {
                        0.0
                    };
                    dev = dev.max((self.at(a, b, c) - pred).abs());
                }
            }
        }
        dev
    }

    /// Marginal over the variables in `vars`, flattened in `(ys, z, ym)` order.
    pub fn marginal(&self, vars: u8) -> Vec<f64> {
        let dims = [(YS, self.s), (Z, self.r), (YM, self.m)];
        let size: usize = dims
            .iter()
            .filter(|(v, _)| vars & v != 0)
            .map(|(_, n)| n)
            .product();
        let mut out = vec![0.0; size];
        for a in 0..self.s {
            for b in 0..self.r {
                for c in 0..self.m {
                    let mut idx = 0;
                    for ((v, n), x) in dims.iter().zip([a, b, c]) {
                        if vars & v != 0 {
                            idx = idx * n + x;
                        }
                    }
                    out[idx] += self.at(a, b, c);
                }
            }
        }
        out
    }

    /// Joint entropy of the variables in `vars`.
    pub fn h(&self, vars: u8) -> f64 {
        if vars == 0 {
            return 0.0;
        }
        entropy_unchecked(&self.marginal(vars))
    }

    /// `H(target | given)`.
    pub fn cond_entropy(&self, target: u8, given: u8) -> f64 {
        self.h(target | given) - self.h(given)
    }

    /// `I(a; b | given)`; pass `given = 0` for plain mutual information.
    pub fn mutual_info(&self, a: u8, b: u8, given: u8) -> f64 {
        self.h(a | given) + self.h(b | given) - self.h(a | b | given) - self.h(given)
    }

    /// Minimum achievable error predicting `Y_m` from `Z`.
    pub fn bayes_error(&self) -> f64 {
        let pzy = self.marginal(Z | YM);
        let correct: f64 = pzy
            .chunks(self.m)
            .map(|row| row.iter().cloned().fold(0.0, f64::max))
            .sum();
        (1.0 - correct).max(0.0)
    }
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.log2())
        .sum::<f64>()
}

/// Shannon entropy in bits, `0·log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if let Some(&v) = p.iter().find(|v| !(**v >= 0.0)) {
        return Err(BoundsError::NegativeMass(v));
    }
    Ok(entropy_unchecked(p))
}

pub fn binary_entropy(eta: f64) -> f64 {
    entropy_unchecked(&[eta, 1.0 - eta])
}

/// The η ∈ [0, ½] with `H_b(η) = h`, by bisection.
pub fn binary_entropy_inverse(h: f64, tol: f64) -> Result<f64> {
    if !(-CHECK_TOL..=1.0 + CHECK_TOL).contains(&h) {
        return Err(BoundsError::EntropyRange(h));
    }
    // H_b is flat at ½ to within rounding, so the endpoints are handled exactly
    if h >= 1.0 {
        return Ok(0.5);
    }
    if h <= 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if binary_entropy(mid) < h {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub i_z_ym: f64,
    pub i_ys_ym: f64,
    pub markov: bool,
    pub holds: bool,
}

/// `I(Z; Y_m) ≥ I(Y_s; Y_m)`. Evaluated for any joint so non-Markov counterexamples
/// can be detected; the inequality is only guaranteed when `markov` is set.
pub fn check_lemma1(j: &DiscreteJoint) -> Lemma1Report {
    let i_z_ym = j.mutual_info(Z, YM, 0);
    let i_ys_ym = j.mutual_info(YS, YM, 0);
    Lemma1Report {
        i_z_ym,
        i_ys_ym,
        markov: j.markov,
        holds: i_z_ym >= i_ys_ym - CHECK_TOL,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub h_ym_given_ys: f64,
    pub h_ym_given_z: f64,
    pub bayes_error: f64,
    /// Lower bound from `H(Y_m|Y_s)`; only asserted for ideal joints.
    pub lower: f64,
    /// Fano lower bound from `H(Y_m|Z)`, valid for any joint.
    pub lower_vs_z: f64,
    pub upper: f64,
    pub ideal: bool,
    pub lower_holds: bool,
    pub upper_holds: bool,
    pub holds: bool,
}

fn require_markov(j: &DiscreteJoint) -> Result<()> {
    if !j.markov {
        return Err(BoundsError::NotMarkov(j.markov_deviation()));
    }
    Ok(())
}

/// Binary sandwich `H_b⁻¹(H(Y_m|Y_s)) ≤ p(e) ≤ ½·H(Y_m|Y_s)`.
pub fn check_theorem1(j: &DiscreteJoint, ideal: bool) -> Result<Theorem1Report> {
    require_markov(j)?;
    if j.m != 2 {
        return Err(BoundsError::NotBinary(j.m));
    }
    let h_ys = j.cond_entropy(YM, YS);
    let h_z = j.cond_entropy(YM, Z);
    let pe = j.bayes_error();
    let lower = binary_entropy_inverse(h_ys, INVERSE_TOL)?;
    let lower_vs_z = binary_entropy_inverse(h_z, INVERSE_TOL)?;
    let upper = 0.5 * h_ys;
    let upper_holds = pe <= upper + CHECK_TOL;
    let lower_holds = if ideal {
        lower <= pe + CHECK_TOL
    } else {
        lower_vs_z <= pe + CHECK_TOL
    };
    Ok(Theorem1Report {
        h_ym_given_ys: h_ys,
        h_ym_given_z: h_z,
        bayes_error: pe,
        lower,
        lower_vs_z,
        upper,
        ideal,
        lower_holds,
        upper_holds,
        holds: lower_holds && upper_holds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassReport {
    pub k: usize,
    pub h_ym_given_ys: f64,
    pub bayes_error: f64,
    /// `(H(Y_m|Y_s) − 1)/log₂ k`, present only for `k ≥ 4`.
    pub lower: Option<f64>,
    pub upper: f64,
    pub lower_holds: bool,
    pub upper_holds: bool,
    pub holds: bool,
}

/// Multi-class sandwich; for fewer than four classes only the upper bound is checked.
pub fn check_theorem1_multiclass(j: &DiscreteJoint) -> Result<MulticlassReport> {
    require_markov(j)?;
    let k = j.m;
    let h = j.cond_entropy(YM, YS);
    let pe = j.bayes_error();
    let upper = 0.5 * h;
    let lower = (k >= 4).then(|| (h - 1.0) / (k as f64).log2());
    let lower_holds = lower.is_none_or(|l| l <= pe + CHECK_TOL);
    let upper_holds = pe <= upper + CHECK_TOL;
    Ok(MulticlassReport {
        k,
        h_ym_given_ys: h,
        bayes_error: pe,
        lower,
        upper,
        lower_holds,
        upper_holds,
        holds: lower_holds && upper_holds,
    })
}

/// Both sides of the modeling postulate `I(Z;Y_m|Y_s) − I(Z;Y_s|Y_m) ≥ 0`.
pub fn postulate_terms(j: &DiscreteJoint) -> (f64, f64) {
    (j.mutual_info(Z, YM, YS), j.mutual_info(Z, YS, YM))
}

fn dirichlet_flat<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let g: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn renormalize(mut j: DiscreteJoint) -> DiscreteJoint {
    let s: f64 = j.p.iter().sum();
    j.p.iter_mut().for_each(|v| *v /= s);
    j
}

/// Markov chain with every conditional row drawn from a flat Dirichlet.
pub fn random_markov<R: Rng + ?Sized>(s: usize, r: usize, m: usize, rng: &mut R) -> DiscreteJoint {
    let p_ys = dirichlet_flat(s, rng);
    let p_z: Vec<Vec<f64>> = (0..s).map(|_| dirichlet_flat(r, rng)).collect();
    let p_ym: Vec<Vec<f64>> = (0..r).map(|_| dirichlet_flat(m, rng)).collect();
    let j = renormalize(DiscreteJoint {
        s,
        r,
        m,
        p: chain_table(&p_ys, &p_z, &p_ym),
        markov: false,
    });
    DiscreteJoint::new(s, r, m, j.p, true).expect("chain product is Markov")
}

fn chain_table(p_ys: &[f64], p_z: &[Vec<f64>], p_ym: &[Vec<f64>]) -> Vec<f64> {
    let mut p = Vec::new();
    for (a, pa) in p_ys.iter().enumerate() {
        for (b, pzb) in p_z[a].iter().enumerate() {
            for pc in &p_ym[b] {
                p.push(pa * pzb * pc);
            }
        }
    }
    p
}

/// Ideal chain: `Z` is an injective relabeling of `Y_s` into `r ≥ s` symbols, so
/// `H(Y_m|Z) = H(Y_m|Y_s)`.
pub fn random_ideal<R: Rng + ?Sized>(s: usize, r: usize, m: usize, rng: &mut R) -> DiscreteJoint {
    assert!(r >= s, "ideal chain needs r >= s");
    let p_ys = dirichlet_flat(s, rng);
    let mut slots: Vec<usize> = (0..r).collect();
    slots.shuffle(rng);
    let mut p_z = vec![vec![0.0; r]; s];
    for (a, row) in p_z.iter_mut().enumerate() {
        row[slots[a]] = 1.0;
    }
    let p_ym_ys: Vec<Vec<f64>> = (0..s).map(|_| dirichlet_flat(m, rng)).collect();
    // unused z symbols get arbitrary rows; they carry no mass
    let mut p_ym = vec![vec![1.0 / m as f64; m]; r];
    for a in 0..s {
        p_ym[slots[a]] = p_ym_ys[a].clone();
    }
    let p = chain_table(&p_ys, &p_z, &p_ym);
    let j = renormalize(DiscreteJoint {
        s,
        r,
        m,
        p,
        markov: false,
    });
    DiscreteJoint::new(s, r, m, j.p, true).expect("ideal chain is Markov")
}

/// A joint that violates the data-processing inequality: `Y_m = Y_s` and `Z` constant.
pub fn non_markov_counterexample(s: usize) -> DiscreteJoint {
    let mut p = vec![0.0; s * s];
    for a in 0..s {
        // r = 1, m = s
        p[a * s + a] = 1.0 / s as f64;
    }
    DiscreteJoint::new(s, 1, s, p, false).expect("valid table")
}

/// Flip-0.1 channel: uniform binary `Y_s`, `Z = Y_s`, `Y_m` flipped with probability 0.1.
pub fn flip_example(flip: f64) -> DiscreteJoint {
    DiscreteJoint::from_chain(
        &[0.5, 0.5],
        &[vec![1.0, 0.0], vec![0.0, 1.0]],
        &[vec![1.0 - flip, flip], vec![flip, 1.0 - flip]],
    )
    .expect("valid chain")
}

/// Per-joint record as emitted by the bounds command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub kind: String,
    pub index: usize,
    pub h_ym_given_ys: f64,
    pub bayes_error: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub theorem1_checked: usize,
    pub theorem1_violations: usize,
    pub lemma1_checked: usize,
    pub lemma1_violations: usize,
    pub multiclass_checked: usize,
    pub multiclass_violations: usize,
    pub postulate_satisfied: usize,
    pub postulate_checked: usize,
    pub chain_rule_max_error: f64,
    pub non_markov_counterexample: Option<Lemma1Report>,
}

impl SuiteSummary {
    pub fn violations(&self) -> usize {
        self.theorem1_violations + self.lemma1_violations + self.multiclass_violations
    }
}

/// Sample `n` joints of each family and run every check. Sizes: binary ideal chains
/// with `s, r ≤ 4`; general Markov chains with `s, r, m ≤ 4`; multi-class ideal
/// chains with `k ∈ {4, 5, 6}` (`n/2` of them).
pub fn run_suite<R: Rng + ?Sized>(
    n: usize,
    non_markov: bool,
    rng: &mut R,
    mut emit: impl FnMut(BoundRecord),
) -> Result<SuiteSummary> {
    let mut sum = SuiteSummary {
        theorem1_checked: 0,
        theorem1_violations: 0,
        lemma1_checked: 0,
        lemma1_violations: 0,
        multiclass_checked: 0,
        multiclass_violations: 0,
        postulate_satisfied: 0,
        postulate_checked: 0,
        chain_rule_max_error: 0.0,
        non_markov_counterexample: None,
    };
    for i in 0..n {
        let s = rng.random_range(2..=4);
        let r = rng.random_range(s..=4);
        let j = random_ideal(s, r, 2, rng);
        let t = check_theorem1(&j, true)?;
        sum.theorem1_checked += 1;
        sum.theorem1_violations += usize::from(!t.holds);
        emit(BoundRecord {
            kind: "theorem1".into(),
            index: i,
            h_ym_given_ys: t.h_ym_given_ys,
            bayes_error: t.bayes_error,
            lower: Some(t.lower),
            upper: Some(t.upper),
            holds: t.holds,
        });
    }
    for i in 0..n {
        let s = rng.random_range(2..=4);
        let r = rng.random_range(2..=4);
        let m = rng.random_range(2..=4);
        let j = random_markov(s, r, m, rng);
        let l = check_lemma1(&j);
        sum.lemma1_checked += 1;
        sum.lemma1_violations += usize::from(!l.holds);
        let chain = j.mutual_info(Z, YM | YS, 0) - j.mutual_info(Z, YS, 0) - j.mutual_info(Z, YM, YS);
        sum.chain_rule_max_error = sum.chain_rule_max_error.max(chain.abs());
        let (a, b) = postulate_terms(&j);
        sum.postulate_checked += 1;
        sum.postulate_satisfied += usize::from(a - b >= -CHECK_TOL);
        emit(BoundRecord {
            kind: "lemma1".into(),
            index: i,
            h_ym_given_ys: j.cond_entropy(YM, YS),
            bayes_error: j.bayes_error(),
            lower: None,
            upper: None,
            holds: l.holds,
        });
    }
    for i in 0..n / 2 {
        let k = rng.random_range(4..=6);
        let s = rng.random_range(2..=4);
        let r = rng.random_range(s..=4);
        let j = random_ideal(s, r, k, rng);
        let mc = check_theorem1_multiclass(&j)?;
        sum.multiclass_checked += 1;
        sum.multiclass_violations += usize::from(!mc.holds);
        emit(BoundRecord {
            kind: "multiclass".into(),
            index: i,
            h_ym_given_ys: mc.h_ym_given_ys,
            bayes_error: mc.bayes_error,
            lower: mc.lower,
            upper: Some(mc.upper),
            holds: mc.holds,
        });
    }
    if non_markov {
        let rep = check_lemma1(&non_markov_counterexample(2));
        emit(BoundRecord {
            kind: "non_markov".into(),
            index: 0,
            h_ym_given_ys: 0.0,
            bayes_error: non_markov_counterexample(2).bayes_error(),
            lower: None,
            upper: None,
            holds: rep.holds,
        });
        sum.non_markov_counterexample = Some(rep);
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.5, 0.5]).unwrap(), 1.0);
        assert_eq!(entropy(&[1.0, 0.0]).unwrap(), 0.0);
        assert!(entropy(&[-0.1, 1.1]).is_err());
        let indep = DiscreteJoint::from_chain(
            &[0.3, 0.7],
            &[vec![0.4, 0.6], vec![0.4, 0.6]],
            &[vec![0.5, 0.5], vec![0.5, 0.5]],
        )
        .unwrap();
        assert!(indep.mutual_info(YS, Z, 0).abs() < 1e-15);
        let copy = flip_example(0.0);
        assert_eq!(copy.cond_entropy(YM, YS), 0.0);
    }

    #[test]
    fn bayes_error_examples() {
        assert_eq!(flip_example(0.0).bayes_error(), 0.0);
        let indep = DiscreteJoint::from_chain(
            &[0.5, 0.5],
            &[vec![0.5, 0.5], vec![0.5, 0.5]],
            &[vec![0.7, 0.3], vec![0.7, 0.3]],
        )
        .unwrap();
        assert!((indep.bayes_error() - 0.3).abs() < 1e-15);
        assert!((flip_example(0.1).bayes_error() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(binary_entropy_inverse(1.0, INVERSE_TOL).unwrap(), 0.5);
        assert_eq!(binary_entropy_inverse(0.0, INVERSE_TOL).unwrap(), 0.0);
        let h = binary_entropy(0.1);
        assert!((h - 0.46900).abs() < 1e-5);
        assert!((binary_entropy_inverse(h, INVERSE_TOL).unwrap() - 0.1).abs() < 1e-8);
        assert!(binary_entropy_inverse(1.5, INVERSE_TOL).is_err());
    }

    #[test]
    fn lemma1_examples() {
        let l = check_lemma1(&flip_example(0.2));
        assert!((l.i_z_ym - l.i_ys_ym).abs() < 1e-15);
        assert!(l.holds);
        let constant = DiscreteJoint::from_chain(
            &[0.5, 0.5],
            &[vec![1.0], vec![1.0]],
            &[vec![0.4, 0.6]],
        )
        .unwrap();
        let l = check_lemma1(&constant);
        assert!(l.i_z_ym.abs() < 1e-15 && l.i_ys_ym.abs() < 1e-15);
        assert!(l.holds);
        assert!(!check_lemma1(&non_markov_counterexample(2)).holds);
    }

    #[test]
    fn theorem1_examples() {
        let t = check_theorem1(&flip_example(0.1), true).unwrap();
        assert!((t.lower - 0.1).abs() < 1e-9);
        assert!((t.bayes_error - 0.1).abs() < 1e-15);
        assert!((t.upper - 0.2345).abs() < 1e-4);
        assert!(t.holds);

        let fair = DiscreteJoint::from_chain(
            &[0.5, 0.5],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[vec![0.5, 0.5], vec![0.5, 0.5]],
        )
        .unwrap();
        let t = check_theorem1(&fair, true).unwrap();
        assert_eq!((t.lower, t.bayes_error, t.upper), (0.5, 0.5, 0.5));

        let mut nm = flip_example(0.1);
        nm.markov = false;
        assert!(matches!(check_theorem1(&nm, true), Err(BoundsError::NotMarkov(_))));
    }

    #[test]
    fn multiclass_examples() {
        let eye: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let det = DiscreteJoint::from_chain(&[0.25; 4], &eye, &eye).unwrap();
        let mc = check_theorem1_multiclass(&det).unwrap();
        assert_eq!(mc.lower, Some(-0.5));
        assert_eq!(mc.bayes_error, 0.0);
        assert!(mc.holds);

        let unif = DiscreteJoint::from_chain(&[0.25; 4], &eye, &vec![vec![0.25; 4]; 4]).unwrap();
        let mc = check_theorem1_multiclass(&unif).unwrap();
        assert!((mc.h_ym_given_ys - 2.0).abs() < 1e-12);
        assert!((mc.bayes_error - 0.75).abs() < 1e-12);
        assert!((mc.lower.unwrap() - 0.5).abs() < 1e-12);
        assert!(mc.holds);
    }

    #[test]
    fn joint_validation() {
        assert!(matches!(
            DiscreteJoint::new(1, 1, 2, vec![0.5, 0.4], false),
            Err(BoundsError::NotNormalized(_))
        ));
        assert!(matches!(
            DiscreteJoint::new(1, 1, 2, vec![1.5, -0.5], false),
            Err(BoundsError::NegativeMass(_))
        ));
        // Y_s and Y_m coupled directly: not Markov through a constant Z
        let p = vec![0.5, 0.0, 0.0, 0.5];
        assert!(matches!(
            DiscreteJoint::new(2, 1, 2, p, true),
            Err(BoundsError::NotMarkov(_))
        ));
    }

    #[test]
    fn small_suite_runs_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = run_suite(50, true, &mut rng, |_| {}).unwrap();
        assert_eq!(s.violations(), 0);
        assert!(!s.non_markov_counterexample.unwrap().holds);
        assert!(s.chain_rule_max_error < 1e-10);
    }
}
