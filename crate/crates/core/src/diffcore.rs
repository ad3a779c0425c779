//! Minimal reverse-mode automatic differentiation over dense vectors and matrices.
//!
//! A [`Tape`] records every operation in creation order. Because parents are always
//! pushed before children, the tape is a topological order and the backward pass is a
//! single reverse sweep. Gradients are available for every leaf, inputs included, which
//! is what feature relevance scoring needs.
//!
//! Tensors are rank ≤ 2 and stored row-major. Column vectors have shape `(n, 1)` and
//! scalars `(1, 1)`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput((usize, usize)),
    #[error("backward already ran on this tape; call reset_adjoints first")]
    AlreadyBackpropagated,
    #[error("non-finite value at coordinate {0}")]
    NonFinite(usize),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Dense real tensor of rank at most two.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape(), self.data)
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(DiffError::ShapeMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a scalar tensor (first entry otherwise).
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Producing operation of a node.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    Constant,
    MatVec,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Ln,
    Square,
    SqDiff,
    Clamp(f64, f64),
    Sum,
    Mean,
    /// `x * exp(-rate * dt)` with `dt` held as a constant.
    Decay(Vec<f64>),
    Softmax,
    Slice(usize, usize),
    Concat,
    Gather(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub value: Tensor,
    pub op: Op,
    pub parents: Vec<Var>,
    pub adjoint: Tensor,
    requires_grad: bool,
}

/// Ordered record of a computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    backpropagated: bool,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DiffError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else if v < -30.0 {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    sigmoid(v)
}

pub fn softplus_scalar(v: f64) -> f64 {
    softplus(v)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(n),
            backpropagated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn adjoint(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].adjoint
    }

    fn push(&mut self, value: Tensor, op: Op, parents: Vec<Var>) -> Var {
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        let (r, c) = value.shape();
        self.nodes.push(Node {
            value,
            op,
            parents,
            adjoint: Tensor::zeros(r, c),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (parameter or feature vector).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, Vec::new())
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, Vec::new())
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wt, xt) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        if xt.cols != 1 || wt.cols != xt.rows {
            return Err(DiffError::ShapeMismatch {
                op: "matvec",
                left: wt.shape(),
                right: xt.shape(),
            });
        }
        let mut out = vec![0.0; wt.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &wt.data[r * wt.cols..(r + 1) * wt.cols];
            *o = row.iter().zip(&xt.data).map(|(a, b)| a * b).sum();
        }
        Ok(self.push(Tensor::vector(out), Op::MatVec, vec![w, x]))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (at, bt) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        check_same(op_name, at, bt)?;
        let data = at.data.iter().zip(&bt.data).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor {
            rows: at.rows,
            cols: at.cols,
            data,
        };
        Ok(self.push(t, op, vec![a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sq_diff", a, b, Op::SqDiff, |x, y| (x - y) * (x - y))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.nodes[a.0].value.map(f);
        self.push(t, op, vec![a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(c), |x| x + c)
    }

    /// Rectifier; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid, sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus, softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln, f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square, |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean, vec![a])
    }

    /// `x_j * exp(-rate_j * dt_j)`; `dt` is data, not a differentiable input.
    pub fn decay(&mut self, x: Var, rate: Var, dt: &[f64]) -> Result<Var> {
        let (xt, rt) = (&self.nodes[x.0].value, &self.nodes[rate.0].value);
        check_same("decay", xt, rt)?;
        if dt.len() != xt.len() {
            return Err(DiffError::ShapeMismatch {
                op: "decay",
                left: xt.shape(),
                right: (dt.len(), 1),
            });
        }
        let data = xt
            .data
            .iter()
            .zip(&rt.data)
            .zip(dt)
            .map(|((&v, &s), &d)| v * (-s * d).exp())
            .collect();
        let t = Tensor {
            rows: xt.rows,
            cols: xt.cols,
            data,
        };
        Ok(self.push(t, Op::Decay(dt.to_vec()), vec![x, rate]))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let m = t.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = t.data.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let out = Tensor {
            rows: t.rows,
            cols: t.cols,
            data: e.into_iter().map(|v| v / z).collect(),
        };
        self.push(out, Op::Softmax, vec![a])
    }

    /// Contiguous sub-vector `[start, start + len)`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.cols != 1 || start + len > t.rows {
            return Err(DiffError::IndexOutOfRange {
                index: start + len,
                len: t.rows,
            });
        }
        let out = Tensor::vector(t.data[start..start + len].to_vec());
        Ok(self.push(out, Op::Slice(start, len), vec![a]))
    }

    /// Vertical concatenation of column vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.cols != 1 {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    left: t.shape(),
                    right: (t.rows, 1),
                });
            }
            data.extend_from_slice(&t.data);
        }
        Ok(self.push(Tensor::vector(data), Op::Concat, parts.to_vec()))
    }

    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= t.len() {
                return Err(DiffError::IndexOutOfRange { index: i, len: t.len() });
            }
            data.push(t.data[i]);
        }
        Ok(self.push(Tensor::vector(data), Op::Gather(idx.to_vec()), vec![a]))
    }

    /// Zero every adjoint so that another backward pass may run.
    pub fn reset_adjoints(&mut self) {
        for n in &mut self.nodes {
            n.adjoint.data.iter_mut().for_each(|v| *v = 0.0);
        }
        self.backpropagated = false;
    }

    /// Reverse sweep from a scalar output. Populates adjoints for every node that
    /// depends on a leaf; leaf adjoints are the gradients.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.backpropagated {
            return Err(DiffError::AlreadyBackpropagated);
        }
        let shape = self.nodes[output.0].value.shape();
        if shape != (1, 1) {
            return Err(DiffError::NonScalarOutput(shape));
        }
        self.backpropagated = true;
        self.nodes[output.0].adjoint.data[0] = 1.0;

        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].parents.is_empty() {
                continue;
            }
            // Split so the node can be read while its parents are written.
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if node.adjoint.data.iter().all(|&g| g == 0.0) {
                continue;
            }
            propagate(node, before);
        }
        Ok(())
    }
}

fn accumulate(target: &mut Node, f: impl Fn(usize) -> f64) {
    if !target.requires_grad {
        return;
    }
    for (k, a) in target.adjoint.data.iter_mut().enumerate() {
        *a += f(k);
    }
}

fn propagate(node: &Node, before: &mut [Node]) {
    let g = &node.adjoint.data;
    let y = &node.value.data;
    let p = &node.parents;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::MatVec => {
            let (w, x) = (p[0].0, p[1].0);
            let (rows, cols) = before[w].value.shape();
            if before[w].requires_grad {
                let xv = before[x].value.data.clone();
                let wn = &mut before[w];
                for r in 0..rows {
                    if g[r] == 0.0 {
                        continue;
                    }
                    for c in 0..cols {
                        wn.adjoint.data[r * cols + c] += g[r] * xv[c];
                    }
                }
            }
            if before[x].requires_grad {
                let mut gx = vec![0.0; cols];
                let wv = &before[w].value.data;
                for r in 0..rows {
                    if g[r] == 0.0 {
                        continue;
                    }
                    let row = &wv[r * cols..(r + 1) * cols];
                    for (gxc, wrc) in gx.iter_mut().zip(row) {
                        *gxc += g[r] * wrc;
                    }
                }
                accumulate(&mut before[x], |k| gx[k]);
            }
        }
        Op::Add => {
            accumulate(&mut before[p[0].0], |k| g[k]);
            accumulate(&mut before[p[1].0], |k| g[k]);
        }
        Op::Sub => {
            accumulate(&mut before[p[0].0], |k| g[k]);
            accumulate(&mut before[p[1].0], |k| -g[k]);
        }
        Op::Mul => {
            let av = before[p[0].0].value.data.clone();
            let bv = before[p[1].0].value.data.clone();
            accumulate(&mut before[p[0].0], |k| g[k] * bv[k]);
            accumulate(&mut before[p[1].0], |k| g[k] * av[k]);
        }
        Op::SqDiff => {
            let av = before[p[0].0].value.data.clone();
            let bv = before[p[1].0].value.data.clone();
            accumulate(&mut before[p[0].0], |k| 2.0 * g[k] * (av[k] - bv[k]));
            accumulate(&mut before[p[1].0], |k| -2.0 * g[k] * (av[k] - bv[k]));
        }
        Op::Scale(c) => accumulate(&mut before[p[0].0], |k| c * g[k]),
        Op::AddScalar(_) => accumulate(&mut before[p[0].0], |k| g[k]),
        Op::Relu => accumulate(&mut before[p[0].0], |k| if y[k] > 0.0 { g[k] } else { 0.0 }),
        Op::Sigmoid => accumulate(&mut before[p[0].0], |k| g[k] * y[k] * (1.0 - y[k])),
        Op::Softplus => {
            let xv = before[p[0].0].value.data.clone();
            accumulate(&mut before[p[0].0], |k| g[k] * sigmoid(xv[k]));
        }
        Op::Exp => accumulate(&mut before[p[0].0], |k| g[k] * y[k]),
        Op::Ln => {
            let xv = before[p[0].0].value.data.clone();
            accumulate(&mut before[p[0].0], |k| g[k] / xv[k]);
        }
        Op::Square => {
            let xv = before[p[0].0].value.data.clone();
            accumulate(&mut before[p[0].0], |k| 2.0 * g[k] * xv[k]);
        }
        Op::Clamp(lo, hi) => {
            let xv = before[p[0].0].value.data.clone();
            accumulate(&mut before[p[0].0], |k| {
                if xv[k] > *lo && xv[k] < *hi {
                    g[k]
                } else {
                    0.0
                }
            });
        }
        Op::Sum => accumulate(&mut before[p[0].0], |_| g[0]),
        Op::Mean => {
            let n = before[p[0].0].value.len() as f64;
            accumulate(&mut before[p[0].0], |_| g[0] / n);
        }
        Op::Decay(dt) => {
            let xv = before[p[0].0].value.data.clone();
            let rv = before[p[1].0].value.data.clone();
            let gate: Vec<f64> = rv.iter().zip(dt).map(|(&s, &d)| (-s * d).exp()).collect();
            accumulate(&mut before[p[0].0], |k| g[k] * gate[k]);
            accumulate(&mut before[p[1].0], |k| -g[k] * xv[k] * dt[k] * gate[k]);
        }
        Op::Softmax => {
            let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
            accumulate(&mut before[p[0].0], |k| y[k] * (g[k] - dot));
        }
        Op::Slice(start, _) => {
            let n = before[p[0].0].value.len();
            let mut full = vec![0.0; n];
            full[*start..*start + g.len()].copy_from_slice(g);
            accumulate(&mut before[p[0].0], |k| full[k]);
        }
        Op::Concat => {
            let mut off = 0;
            for v in p {
                let n = before[v.0].value.len();
                accumulate(&mut before[v.0], |k| g[off + k]);
                off += n;
            }
        }
        Op::Gather(idx) => {
            let n = before[p[0].0].value.len();
            let mut full = vec![0.0; n];
            for (gi, &i) in g.iter().zip(idx) {
                full[i] += gi;
            }
            accumulate(&mut before[p[0].0], |k| full[k]);
        }
    }
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    /// Coordinates where one-sided differences disagree like a kink, not a curvature.
    pub kinks: Vec<usize>,
    pub passed: bool,
}

/// Denominator floor for relative error; below it the comparison is effectively absolute.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

fn eval_scalar<F>(f: &F, point: &[f64]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(point.to_vec()));
    let out = f(&mut tape, x)?;
    let t = tape.value(out);
    if !t.is_scalar() {
        return Err(DiffError::NonScalarOutput(t.shape()));
    }
    Ok(t.item())
}

/// Reverse-mode gradient of a scalar function of one vector input.
pub fn gradient<F>(f: &F, point: &[f64]) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(point.to_vec()));
    let out = f(&mut tape, x)?;
    tape.backward(out)?;
    Ok((tape.scalar(out), tape.adjoint(x).data.clone()))
}

/// Compare reverse-mode and central-difference gradients coordinate by coordinate.
///
/// Non-finite values anywhere surface as [`DiffError::NonFinite`] with the coordinate
/// being perturbed (or `0` for the unperturbed evaluation).
pub fn grad_check<F>(f: F, point: &[f64], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if let Some(i) = point.iter().position(|v| !v.is_finite()) {
        return Err(DiffError::NonFinite(i));
    }
    let (f0, analytic) = gradient(&f, point)?;
    if let Some(i) = analytic.iter().position(|v| !v.is_finite()) {
        return Err(DiffError::NonFinite(i));
    }
    if !f0.is_finite() {
        return Err(DiffError::NonFinite(0));
    }

    let mut numeric = Vec::with_capacity(point.len());
    let mut kinks = Vec::new();
    let mut x = point.to_vec();
    for i in 0..point.len() {
        let mut at = |delta: f64| -> Result<f64> {
            x[i] = point[i] + delta;
            let v = eval_scalar(&f, &x)?;
            x[i] = point[i];
            if v.is_finite() {
                Ok(v)
            } else {
                Err(DiffError::NonFinite(i))
            }
        };
        let (fp, fm) = (at(step)?, at(-step)?);
        let (fp2, fm2) = (at(2.0 * step)?, at(-2.0 * step)?);
        numeric.push((fp - fm) / (2.0 * step));

        // Forward minus backward difference scales with h for smooth functions but
        // stays constant across a slope discontinuity.
        let jump1 = (fp - f0) / step - (f0 - fm) / step;
        let jump2 = (fp2 - f0) / (2.0 * step) - (f0 - fm2) / (2.0 * step);
        let scale = 1e-6 * (1.0 + numeric[i].abs());
        if jump1.abs() > scale && (jump2 / jump1 - 2.0).abs() > 0.5 {
            kinks.push(i);
        }
    }

    let (mut worst, mut max_err) = (0, 0.0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(*a, *n);
        if e > max_err {
            max_err = e;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        passed: max_err < tolerance && kinks.is_empty(),
        analytic,
        numeric,
        max_rel_error: max_err,
        worst_coordinate: worst,
        kinks,
    })
}
