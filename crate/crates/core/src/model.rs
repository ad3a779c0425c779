//! Y-shaped network: TSLM gate, shared encoder, main head, SSL head, prototypes.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{softplus_scalar, DiffError, Tape, Tensor, Var};

/// Logits are clamped to this range before the sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Reservoir size per feature for masked-value replacement.
pub const RESERVOIR_SIZE: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("prototype set is empty")]
    EmptyPrototypes,
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("snapshot does not match model layout")]
    SnapshotMismatch,
    #[error("feature statistics need at least one training row")]
    NoTrainingData,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Layer widths and sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Total standardized input width.
    pub input_dim: usize,
    /// Leading inputs gated by recency; the remainder pass through untouched.
    pub gated_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Number of prototypes.
    pub k: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, gated_dim: usize) -> Self {
        Self {
            input_dim,
            gated_dim,
            hidden: vec![64, 64],
            embed_dim: 32,
            k: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 {
            return Err(ModelError::InvalidArchitecture("zero width".into()));
        }
        if self.gated_dim > self.input_dim {
            return Err(ModelError::InvalidArchitecture(format!(
                "gated_dim {} exceeds input_dim {}",
                self.gated_dim, self.input_dim
            )));
        }
        if self.k < 2 {
            return Err(ModelError::InvalidArchitecture(format!("k = {} < 2", self.k)));
        }
        if self.hidden.contains(&0) {
            return Err(ModelError::InvalidArchitecture("zero hidden width".into()));
        }
        Ok(())
    }
}

/// Fully connected layer, weight stored row-major as `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    /// Uniform in ±√(6/(fan_in+fan_out)), zero bias.
    pub fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let weight = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            rows,
            cols,
            weight,
            bias: vec![0.0; rows],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut d = Self::zeros(n, n);
        for i in 0..n {
            d.weight[i * n + i] = 1.0;
        }
        d
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Frozen per-feature training statistics that travel with the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Standardized training values per feature, used as masking replacements.
    pub reservoirs: Vec<Vec<f64>>,
}

impl FeatureStats {
    /// Fit mean/std and draw up to [`RESERVOIR_SIZE`] standardized values per feature.
    pub fn fit<R: Rng + ?Sized>(rows: &[Vec<f64>], rng: &mut R) -> Result<Self> {
        let first = rows.first().ok_or(ModelError::NoTrainingData)?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            if r.len() != d {
                return Err(ModelError::DimensionMismatch {
                    what: "training row",
                    expected: d,
                    got: r.len(),
                });
            }
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for j in 0..d {
                var[j] += (r[j] - mean[j]).powi(2);
            }
        }
        let std: Vec<f64> = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-8 {
                    s
                } else {
                    1.0
                }
            })
            .collect();

        let take = rows.len().min(RESERVOIR_SIZE);
        let picks = rand::seq::index::sample(rng, rows.len(), take).into_vec();
        let mut picks = picks;
        picks.sort_unstable();
        let reservoirs = (0..d)
            .map(|j| {
                picks
                    .iter()
                    .map(|&i| (rows[i][j] - mean[j]) / std[j])
                    .collect()
            })
            .collect();
        Ok(Self {
            mean,
            std,
            reservoirs,
        })
    }

    pub fn identity(d: usize, reservoir: Vec<f64>) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
            reservoirs: vec![reservoir; d],
        }
    }

    pub fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// All learnable parameters plus frozen statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub arch: Architecture,
    /// Unconstrained decay parameters; the rate is their softplus.
    pub tslm_raw: Vec<f64>,
    pub encoder: Vec<Dense>,
    pub main_head: Dense,
    pub ssl_head: Dense,
    /// `k × embed_dim`, one row per prototype.
    pub prototypes: Vec<Vec<f64>>,
    pub feature_stats: FeatureStats,
}

/// Encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

/// Copy of every learnable value, taken before adaptation. Feature statistics are
/// frozen after fitting and are not part of it.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    arch: Architecture,
    params: Vec<f64>,
}

/// Offsets of the parameter groups in [`ModelState::flatten`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub tslm: (usize, usize),
    pub encoder: (usize, usize),
    pub main_head: (usize, usize),
    pub ssl_head: (usize, usize),
    pub prototypes: (usize, usize),
}

impl Layout {
    pub fn total(&self) -> usize {
        self.prototypes.1
    }

    /// Parameters updated at test time (TSLM gate plus encoder layers).
    pub fn adaptable(&self) -> std::ops::Range<usize> {
        self.tslm.0..self.encoder.1
    }
}

/// Which parameter groups receive gradients on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    EncoderOnly,
    Nothing,
}

/// Model parameters bound to tape nodes.
#[derive(Debug, Clone)]
pub struct Bound {
    pub tslm: Var,
    pub encoder: Vec<(Var, Var)>,
    pub main_head: (Var, Var),
    pub ssl_head: (Var, Var),
    pub prototypes: Vec<Var>,
}

impl ModelState {
    pub fn new<R: Rng + ?Sized>(
        arch: Architecture,
        feature_stats: FeatureStats,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        if feature_stats.mean.len() != arch.input_dim {
            return Err(ModelError::DimensionMismatch {
                what: "feature stats",
                expected: arch.input_dim,
                got: feature_stats.mean.len(),
            });
        }
        let mut encoder = Vec::new();
        let mut fan_in = arch.input_dim;
        for &h in arch.hidden.iter().chain(std::iter::once(&arch.embed_dim)) {
            encoder.push(Dense::xavier(h, fan_in, rng));
            fan_in = h;
        }
        Ok(Self {
            tslm_raw: vec![-3.0; arch.gated_dim],
            main_head: Dense::xavier(1, arch.embed_dim, rng),
            ssl_head: Dense::xavier(arch.input_dim, arch.embed_dim, rng),
            prototypes: vec![vec![0.0; arch.embed_dim]; arch.k],
            encoder,
            feature_stats,
            arch,
        })
    }

    /// Verify every tensor has the shape `arch` implies; used on deserialized state.
    pub fn check_shapes(&self) -> Result<()> {
        let a = &self.arch;
        a.validate()?;
        let expect = |what: &'static str, expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(ModelError::DimensionMismatch { what, expected, got })
            }
        };
        let dense = |what: &'static str, l: &Dense, rows: usize, cols: usize| {
            expect(what, rows, l.rows)?;
            expect(what, cols, l.cols)?;
            expect(what, rows * cols, l.weight.len())?;
            expect(what, rows, l.bias.len())
        };
        expect("tslm rates", a.gated_dim, self.tslm_raw.len())?;
        expect("encoder depth", a.hidden.len() + 1, self.encoder.len())?;
        let mut fan_in = a.input_dim;
        for (l, &h) in self
            .encoder
            .iter()
            .zip(a.hidden.iter().chain(std::iter::once(&a.embed_dim)))
        {
            dense("encoder layer", l, h, fan_in)?;
            fan_in = h;
        }
        dense("main head", &self.main_head, 1, a.embed_dim)?;
        dense("ssl head", &self.ssl_head, a.input_dim, a.embed_dim)?;
        expect("prototype count", a.k, self.prototypes.len())?;
        for p in &self.prototypes {
            expect("prototype", a.embed_dim, p.len())?;
        }
        let fs = &self.feature_stats;
        expect("feature means", a.input_dim, fs.mean.len())?;
        expect("feature stds", a.input_dim, fs.std.len())?;
        expect("reservoirs", a.input_dim, fs.reservoirs.len())
    }

    pub fn tslm_rates(&self) -> Vec<f64> {
        self.tslm_raw.iter().map(|&r| softplus_scalar(r)).collect()
    }

    pub fn layout(&self) -> Layout {
        let t = self.tslm_raw.len();
        let e = t + self.encoder.iter().map(Dense::param_count).sum::<usize>();
        let m = e + self.main_head.param_count();
        let s = m + self.ssl_head.param_count();
        let p = s + self.prototypes.iter().map(Vec::len).sum::<usize>();
        Layout {
            tslm: (0, t),
            encoder: (t, e),
            main_head: (e, m),
            ssl_head: (m, s),
            prototypes: (s, p),
        }
    }

    /// All learnable values in a fixed order: TSLM, encoder layers (weight then
    /// bias), main head, SSL head, prototype rows.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout().total());
        out.extend_from_slice(&self.tslm_raw);
        for l in self
            .encoder
            .iter()
            .chain([&self.main_head, &self.ssl_head])
        {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        for p in &self.prototypes {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.layout().total();
        if flat.len() != total {
            return Err(ModelError::DimensionMismatch {
                what: "flat parameters",
                expected: total,
                got: flat.len(),
            });
        }
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[off..off + dst.len()]);
            off += dst.len();
        };
        take(&mut self.tslm_raw);
        for l in self.encoder.iter_mut() {
            take(&mut l.weight);
            take(&mut l.bias);
        }
        for l in [&mut self.main_head, &mut self.ssl_head] {
            take(&mut l.weight);
            take(&mut l.bias);
        }
        for p in self.prototypes.iter_mut() {
            take(p);
        }
        Ok(())
    }

    /// Place parameters on the tape; frozen groups become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> Result<Bound> {
        let enc_grad = trainable != Trainable::Nothing;
        let rest_grad = trainable == Trainable::All;
        let put = |tape: &mut Tape, t: Tensor, grad: bool| {
            if grad {
                tape.leaf(t)
            } else {
                tape.constant(t)
            }
        };
        let dense = |tape: &mut Tape, d: &Dense, grad: bool| -> Result<(Var, Var)> {
            let w = Tensor::from_vec(d.rows, d.cols, d.weight.clone())?;
            let w = put(tape, w, grad);
            let b = put(tape, Tensor::vector(d.bias.clone()), grad);
            Ok((w, b))
        };
        let tslm = put(tape, Tensor::vector(self.tslm_raw.clone()), enc_grad);
        let encoder = self
            .encoder
            .iter()
            .map(|l| dense(tape, l, enc_grad))
            .collect::<Result<Vec<_>>>()?;
        let main_head = dense(tape, &self.main_head, rest_grad)?;
        let ssl_head = dense(tape, &self.ssl_head, rest_grad)?;
        let prototypes = self
            .prototypes
            .iter()
            .map(|p| put(tape, Tensor::vector(p.clone()), rest_grad))
            .collect();
        Ok(Bound {
            tslm,
            encoder,
            main_head,
            ssl_head,
            prototypes,
        })
    }

    /// Collect leaf adjoints into [`flatten`](Self::flatten) order; frozen groups are zero.
    pub fn gather_grads(&self, tape: &Tape, b: &Bound) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout().total());
        out.extend_from_slice(tape.adjoint(b.tslm).data());
        for (w, bias) in b.encoder.iter().chain([&b.main_head, &b.ssl_head]) {
            out.extend_from_slice(tape.adjoint(*w).data());
            out.extend_from_slice(tape.adjoint(*bias).data());
        }
        for p in &b.prototypes {
            out.extend_from_slice(tape.adjoint(*p).data());
        }
        out
    }

    fn check_inputs(&self, x: &[f64], dt: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim {
            return Err(ModelError::DimensionMismatch {
                what: "feature vector",
                expected: self.arch.input_dim,
                got: x.len(),
            });
        }
        if dt.len() != self.arch.gated_dim {
            return Err(ModelError::DimensionMismatch {
                what: "recency vector",
                expected: self.arch.gated_dim,
                got: dt.len(),
            });
        }
        Ok(())
    }

    /// Gate, then run the encoder on the tape. `x` must already be standardized.
    pub fn encode_on_tape(&self, tape: &mut Tape, b: &Bound, x: Var, dt: &[f64]) -> Result<Var> {
        let n = tape.value(x).len();
        if n != self.arch.input_dim {
            return Err(ModelError::DimensionMismatch {
                what: "feature vector",
                expected: self.arch.input_dim,
                got: n,
            });
        }
        if dt.len() != self.arch.gated_dim {
            return Err(ModelError::DimensionMismatch {
                what: "recency vector",
                expected: self.arch.gated_dim,
                got: dt.len(),
            });
        }
        let g = self.arch.gated_dim;
        let mut h = if g > 0 {
            let rate = tape.softplus(b.tslm);
            let dynamic = tape.slice(x, 0, g)?;
            let gated = tape.decay(dynamic, rate, dt)?;
            if g < n {
                let statics = tape.slice(x, g, n - g)?;
                tape.concat(&[gated, statics])?
            } else {
                gated
            }
        } else {
            x
        };
        let last = b.encoder.len() - 1;
        for (i, (w, bias)) in b.encoder.iter().enumerate() {
            let a = tape.matvec(*w, h)?;
            h = tape.add(a, *bias)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Clamped positive-class logit.
    pub fn logit_on_tape(&self, tape: &mut Tape, b: &Bound, z: Var) -> Result<Var> {
        let a = tape.matvec(b.main_head.0, z)?;
        let l = tape.add(a, b.main_head.1)?;
        Ok(tape.clamp(l, -LOGIT_CLAMP, LOGIT_CLAMP))
    }

    pub fn ssl_on_tape(&self, tape: &mut Tape, b: &Bound, z: Var) -> Result<Var> {
        let a = tape.matvec(b.ssl_head.0, z)?;
        Ok(tape.add(a, b.ssl_head.1)?)
    }

    pub fn encode(&self, x: &[f64], dt: &[f64]) -> Result<Embedding> {
        self.check_inputs(x, dt)?;
        let mut tape = Tape::with_capacity(32);
        let b = self.bind(&mut tape, Trainable::Nothing)?;
        let xv = tape.constant(Tensor::vector(x.to_vec()));
        let z = self.encode_on_tape(&mut tape, &b, xv, dt)?;
        Ok(Embedding(tape.value(z).data().to_vec()))
    }

    /// Probability and raw (clamped) logit.
    pub fn predict_main(&self, z: &Embedding) -> Result<(f64, f64)> {
        let h = &self.main_head;
        if z.0.len() != h.cols {
            return Err(ModelError::DimensionMismatch {
                what: "embedding",
                expected: h.cols,
                got: z.0.len(),
            });
        }
        let l: f64 = h.weight.iter().zip(&z.0).map(|(w, v)| w * v).sum::<f64>() + h.bias[0];
        let l = l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        Ok((crate::diffcore::sigmoid_scalar(l), l))
    }

    pub fn predict_ssl(&self, z: &Embedding) -> Result<Vec<f64>> {
        let h = &self.ssl_head;
        if z.0.len() != h.cols {
            return Err(ModelError::DimensionMismatch {
                what: "embedding",
                expected: h.cols,
                got: z.0.len(),
            });
        }
        Ok((0..h.rows)
            .map(|r| {
                h.weight[r * h.cols..(r + 1) * h.cols]
                    .iter()
                    .zip(&z.0)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + h.bias[r]
            })
            .collect())
    }

    /// Risk score for a standardized feature vector.
    pub fn risk(&self, x: &[f64], dt: &[f64]) -> Result<f64> {
        let z = self.encode(x, dt)?;
        Ok(self.predict_main(&z)?.0)
    }

    pub fn assign_prototype(&self, z: &[f64]) -> Result<(usize, f64)> {
        nearest(&self.prototypes, z)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            arch: self.arch.clone(),
            params: self.flatten(),
        }
    }

    pub fn restore(&mut self, snap: &Snapshot) -> Result<()> {
        if snap.arch != self.arch || snap.params.len() != self.layout().total() {
            return Err(ModelError::SnapshotMismatch);
        }
        self.unflatten(&snap.params)
    }
}

/// Nearest row in squared Euclidean distance; ties go to the lowest index.
pub fn nearest(prototypes: &[Vec<f64>], z: &[f64]) -> Result<(usize, f64)> {
    if prototypes.is_empty() {
        return Err(ModelError::EmptyPrototypes);
    }
    let mut best = (0, f64::INFINITY);
    for (j, p) in prototypes.iter().enumerate() {
        if p.len() != z.len() {
            return Err(ModelError::DimensionMismatch {
                what: "prototype",
                expected: p.len(),
                got: z.len(),
            });
        }
        let d: f64 = p.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    Ok(best)
}
