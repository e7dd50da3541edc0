//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value and the handles of
//! its inputs. `backward` walks the nodes in exact reverse recording order and
//! accumulates gradients additively, so a value consumed by several operations
//! receives the sum of their contributions.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::error::{GnsnError, Result};
use crate::tensor::matrix::dot;
use crate::tensor::sparse::{spmm, SparsePattern};
use crate::tensor::Matrix;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    idx: usize,
    tape: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM {
        weights: Var,
        pattern: Arc<SparsePattern>,
        dense: Var,
    },
    EdgeScores {
        keys: Var,
        queries: Var,
        pattern: Arc<SparsePattern>,
        scale: f64,
    },
    MaskedSoftmax {
        scores: Var,
        pattern: Arc<SparsePattern>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScalarMul {
        scalar: Var,
        x: Var,
    },
    RowScale {
        scale: Var,
        x: Var,
    },
    AddRowBias {
        x: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    RowNorm(Var),
    RowCosine(Var, Var),
    Concat(Vec<Var>),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ClampMax {
        x: Var,
        bound: f64,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        rows: Vec<usize>,
    },
    Poincare {
        x: Var,
        curvature: f64,
    },
    Lorentz(Var),
    TangentLog(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation; see the module docs.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf that required them.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Matrix>,
    shapes: HashMap<Var, (usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(&v)
    }

    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.grads.get(&v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes.get(&v).copied().unwrap_or((0, 0));
                Matrix::zeros(r, c)
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { idx, tape: self.id }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(GnsnError::Tape(format!(
                "value {} is not recorded on this tape",
                v.idx
            )));
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    /// Records a leaf value.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    /// Forward value of a recorded handle.
    ///
    /// Panics if `v` belongs to another tape or was cleared by `backward`.
    pub fn value(&self, v: Var) -> &Matrix {
        assert!(
            v.tape == self.id && v.idx < self.nodes.len(),
            "stale or foreign tape handle"
        );
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v).is_ok() && self.rg(v)
    }

    /// Copy of a value with no gradient connection to its history.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        self.check(v)?;
        let value = self.nodes[v.idx].value.clone();
        Ok(self.constant(value))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(GnsnError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Sparse times dense: `weights` holds one value per stored entry of
    /// `pattern` as an `nnz x 1` column.
    pub fn spmm(&mut self, weights: Var, pattern: &Arc<SparsePattern>, dense: Var) -> Result<Var> {
        self.check(weights)?;
        self.check(dense)?;
        if self.value(weights).shape() != (pattern.nnz(), 1) {
            return Err(GnsnError::shape(
                "spmm",
                format!(
                    "weights {:?} for {} stored entries",
                    self.value(weights).shape(),
                    pattern.nnz()
                ),
            ));
        }
        let value = spmm(pattern, self.value(weights).as_slice(), self.value(dense))?;
        let rg = self.rg(weights) || self.rg(dense);
        Ok(self.push(
            value,
            Op::SpMM {
                weights,
                pattern: Arc::clone(pattern),
                dense,
            },
            rg,
        ))
    }

    /// `scale * keys[r] . queries[c]` for every stored `(r, c)`.
    pub fn edge_scores(
        &mut self,
        keys: Var,
        queries: Var,
        pattern: &Arc<SparsePattern>,
        scale: f64,
    ) -> Result<Var> {
        self.same_shape("edge_scores", keys, queries)?;
        let (k, q) = (self.value(keys), self.value(queries));
        if k.rows() != pattern.n_rows() || q.rows() != pattern.n_cols() {
            return Err(GnsnError::shape(
                "edge_scores",
                format!(
                    "{} rows for a {}x{} pattern",
                    k.rows(),
                    pattern.n_rows(),
                    pattern.n_cols()
                ),
            ));
        }
        let mut out = Vec::with_capacity(pattern.nnz());
        for r in 0..pattern.n_rows() {
            let kr = k.row(r);
            for &c in pattern.row_cols(r) {
                out.push(scale * dot(kr, q.row(c)));
            }
        }
        let rg = self.rg(keys) || self.rg(queries);
        Ok(self.push(
            Matrix::column(&out),
            Op::EdgeScores {
                keys,
                queries,
                pattern: Arc::clone(pattern),
                scale,
            },
            rg,
        ))
    }

    /// Softmax over the stored entries of each row. Entries outside the
    /// pattern carry zero mass by construction.
    pub fn masked_softmax(&mut self, scores: Var, pattern: &Arc<SparsePattern>) -> Result<Var> {
        self.check(scores)?;
        let s = self.value(scores);
        if s.shape() != (pattern.nnz(), 1) {
            return Err(GnsnError::shape(
                "masked_softmax",
                format!("scores {:?} for {} entries", s.shape(), pattern.nnz()),
            ));
        }
        let s = s.as_slice();
        let mut out = vec![0.0; s.len()];
        for r in 0..pattern.n_rows() {
            let range = pattern.row_range(r);
            if range.is_empty() {
                return Err(GnsnError::Numeric(format!(
                    "softmax over empty row {r}: node has no support entries (self-loops disabled?)"
                )));
            }
            let m = s[range.clone()]
                .iter()
                .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for k in range.clone() {
                let e = (s[k] - m).exp();
                out[k] = e;
                z += e;
            }
            for o in &mut out[range] {
                *o /= z;
            }
        }
        let rg = self.rg(scores);
        Ok(self.push(
            Matrix::column(&out),
            Op::MaskedSoftmax {
                scores,
                pattern: Arc::clone(pattern),
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Multiplication by a fixed real.
    pub fn scale(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).scaled(alpha);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Scale(a, alpha), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        Ok(self.push(value, Op::AddScalar(a), rg))
    }

    /// `scalar * x` with a recorded `1 x 1` scalar.
    pub fn scalar_mul(&mut self, scalar: Var, x: Var) -> Result<Var> {
        self.check(scalar)?;
        self.check(x)?;
        if self.value(scalar).shape() != (1, 1) {
            return Err(GnsnError::shape(
                "scalar_mul",
                format!("scalar has shape {:?}", self.value(scalar).shape()),
            ));
        }
        let s = self.value(scalar).item();
        let value = self.value(x).scaled(s);
        let rg = self.rg(scalar) || self.rg(x);
        Ok(self.push(value, Op::ScalarMul { scalar, x }, rg))
    }

    /// Row `r` of `x` multiplied by `scale[r]` (an `n x 1` column).
    pub fn row_scale(&mut self, scale: Var, x: Var) -> Result<Var> {
        self.check(scale)?;
        self.check(x)?;
        let (s, xv) = (self.value(scale), self.value(x));
        if s.shape() != (xv.rows(), 1) {
            return Err(GnsnError::shape(
                "row_scale",
                format!("scale {:?} for rows of {:?}", s.shape(), xv.shape()),
            ));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            let f = s.as_slice()[r];
            value.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(scale) || self.rg(x);
        Ok(self.push(value, Op::RowScale { scale, x }, rg))
    }

    /// Adds a `1 x d` bias to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (xv, b) = (self.value(x), self.value(bias));
        if b.shape() != (1, xv.cols()) {
            return Err(GnsnError::shape(
                "add_row_bias",
                format!("bias {:?} for {:?}", b.shape(), xv.shape()),
            ));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (v, bb) in value.row_mut(r).iter_mut().zip(b.as_slice()) {
                *v += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRowBias { x, bias }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        Ok(self.push(value, Op::Relu(a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(stable_sigmoid);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Sigmoid(a), rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if let Some(bad) = self.value(a).as_slice().iter().find(|&&v| v <= 0.0) {
            return Err(GnsnError::Numeric(format!("log of non-positive value {bad}")));
        }
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Log(a), rg))
    }

    /// Euclidean norm of each row, as an `n x 1` column.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).row_norms();
        let rg = self.rg(a);
        Ok(self.push(value, Op::RowNorm(a), rg))
    }

    /// Cosine similarity between row `r` of `a` and row `r` of `b`; zero when
    /// either row is zero.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_cosine", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<f64> = (0..av.rows())
            .map(|r| {
                let (x, y) = (av.row(r), bv.row(r));
                let nx = dot(x, x).sqrt();
                let ny = dot(y, y).sqrt();
                if nx == 0.0 || ny == 0.0 {
                    0.0
                } else {
                    dot(x, y) / (nx * ny)
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Matrix::column(&out), Op::RowCosine(a, b), rg))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::hconcat(&mats)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(GnsnError::Config(format!("dropout rate {rate} not in [0,1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.as_slice().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Matrix::from_vec(xv.rows(), xv.cols(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        Ok(self.push(value, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a);
        if v.is_empty() {
            return Err(GnsnError::shape("mean", "empty input"));
        }
        let value = Matrix::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Mean(a), rg))
    }

    /// Rows of `x` selected by index.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.check(x)?;
        let n = self.value(x).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(GnsnError::shape("gather_rows", format!("index {bad} >= {n}")));
        }
        let value = self.value(x).gather_rows(idx);
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// `min(x, bound)` elementwise.
    pub fn clamp_max(&mut self, x: Var, bound: f64) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(|v| v.min(bound));
        let rg = self.rg(x);
        Ok(self.push(value, Op::ClampMax { x, bound }, rg))
    }

    /// Dense row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// Mean over `rows` of `-log softmax(logits[r])[labels[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], rows: &[usize]) -> Result<Var> {
        self.check(logits)?;
        if rows.is_empty() {
            return Err(GnsnError::Config("cross-entropy over an empty node set".into()));
        }
        let l = self.value(logits);
        if labels.len() != l.rows() {
            return Err(GnsnError::shape(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), l.rows()),
            ));
        }
        let mut total = 0.0;
        for &r in rows {
            let row = l.row(r);
            let y = labels[r];
            if y >= row.len() || r >= l.rows() {
                return Err(GnsnError::shape(
                    "cross_entropy",
                    format!("label {y} / row {r} out of range"),
                ));
            }
            total += log_sum_exp(row) - row[y];
        }
        let value = Matrix::scalar(total / rows.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise projection onto the Poincaré ball with curvature `c`:
    /// `x / (|x| (1 + sqrt(1 + c |x|^2)))`, zero rows mapping to zero.
    pub fn poincare(&mut self, x: Var, curvature: f64) -> Result<Var> {
        self.check(x)?;
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = dot(row, row).sqrt();
            let g = poincare_gain(n, curvature);
            row.iter_mut().for_each(|v| *v *= g);
            // rounding can land the norm an ulp past the ball radius
            while dot(row, row) > 0.25 {
                row.iter_mut().for_each(|v| *v *= 1.0 - f64::EPSILON);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::Poincare { x, curvature }, rg))
    }

    /// Row-wise lift onto the unit hyperboloid: `[sqrt(1 + |x|^2) | x]`.
    pub fn lorentz(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let mut value = Matrix::zeros(xv.rows(), xv.cols() + 1);
        for r in 0..xv.rows() {
            let src = xv.row(r);
            let dst = value.row_mut(r);
            dst[0] = (1.0 + dot(src, src)).sqrt();
            dst[1..].copy_from_slice(src);
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::Lorentz(x), rg))
    }

    /// Logarithmic map at the hyperboloid origin, dropping the (zero) time
    /// coordinate. Input rows are `[x0 | xs]` with `x0 >= 1`.
    pub fn tangent_log(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if xv.cols() < 2 {
            return Err(GnsnError::shape("tangent_log", "need at least two columns"));
        }
        let mut value = Matrix::zeros(xv.rows(), xv.cols() - 1);
        for r in 0..xv.rows() {
            let src = xv.row(r);
            let (f, _) = log_gain(src[0]);
            for (d, s) in value.row_mut(r).iter_mut().zip(&src[1..]) {
                *d = f * s;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::TangentLog(x), rg))
    }

    /// Reverse pass from a scalar `loss`. The tape is cleared afterwards and
    /// all previously issued handles become invalid.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).shape() != (1, 1) {
            return Err(GnsnError::Tape(format!(
                "loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let tape = self.id;
        // Handles issued before the reset must not resolve against new nodes.
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);

        let mut out = Gradients::default();
        for (idx, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                out.shapes.insert(Var { idx, tape }, node.value.shape());
            }
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.idx).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                out.grads.insert(Var { idx, tape }, g);
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads)?;
        }
        Ok(out)
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Matrix>], v: Var, contribution: Matrix) {
    if !nodes[v.idx].requires_grad {
        return;
    }
    match &mut grads[v.idx] {
        Some(g) => g.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
    let val = |v: Var| &nodes[v.idx].value;
    let rg = |v: Var| nodes[v.idx].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if rg(*a) {
                accumulate(nodes, grads, *a, g.matmul_nt(val(*b))?);
            }
            if rg(*b) {
                accumulate(nodes, grads, *b, val(*a).matmul_tn(g)?);
            }
        }
        Op::SpMM {
            weights,
            pattern,
            dense,
        } => {
            let w = val(*weights).as_slice();
            let x = val(*dense);
            if rg(*weights) {
                let mut gw = vec![0.0; pattern.nnz()];
                for r in 0..pattern.n_rows() {
                    let gr = g.row(r);
                    for k in pattern.row_range(r) {
                        gw[k] = dot(gr, x.row(pattern.col_indices()[k]));
                    }
                }
                accumulate(nodes, grads, *weights, Matrix::column(&gw));
            }
            if rg(*dense) {
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..pattern.n_rows() {
                    let gr = g.row(r);
                    for k in pattern.row_range(r) {
                        let dst = gx.row_mut(pattern.col_indices()[k]);
                        for (d, s) in dst.iter_mut().zip(gr) {
                            *d += w[k] * s;
                        }
                    }
                }
                accumulate(nodes, grads, *dense, gx);
            }
        }
        Op::EdgeScores {
            keys,
            queries,
            pattern,
            scale,
        } => {
            let (k, q) = (val(*keys), val(*queries));
            let gs = g.as_slice();
            let mut gk = Matrix::zeros(k.rows(), k.cols());
            let mut gq = Matrix::zeros(q.rows(), q.cols());
            for r in 0..pattern.n_rows() {
                for e in pattern.row_range(r) {
                    let c = pattern.col_indices()[e];
                    let f = scale * gs[e];
                    if f == 0.0 {
                        continue;
                    }
                    for (d, s) in gk.row_mut(r).iter_mut().zip(q.row(c)) {
                        *d += f * s;
                    }
                    for (d, s) in gq.row_mut(c).iter_mut().zip(k.row(r)) {
                        *d += f * s;
                    }
                }
            }
            if rg(*keys) {
                accumulate(nodes, grads, *keys, gk);
            }
            if rg(*queries) {
                accumulate(nodes, grads, *queries, gq);
            }
        }
        Op::MaskedSoftmax { scores, pattern } => {
            let p = node.value.as_slice();
            let gs = g.as_slice();
            let mut out = vec![0.0; p.len()];
            for r in 0..pattern.n_rows() {
                let range = pattern.row_range(r);
                let inner: f64 = range.clone().map(|k| p[k] * gs[k]).sum();
                for k in range {
                    out[k] = p[k] * (gs[k] - inner);
                }
            }
            accumulate(nodes, grads, *scores, Matrix::column(&out));
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.scaled(-1.0));
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                accumulate(nodes, grads, *a, g.zip_map(val(*b), |x, y| x * y));
            }
            if rg(*b) {
                accumulate(nodes, grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
        }
        Op::Scale(a, alpha) => accumulate(nodes, grads, *a, g.scaled(*alpha)),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::ScalarMul { scalar, x } => {
            if rg(*scalar) {
                let s: f64 = g
                    .as_slice()
                    .iter()
                    .zip(val(*x).as_slice())
                    .map(|(a, b)| a * b)
                    .sum();
                accumulate(nodes, grads, *scalar, Matrix::scalar(s));
            }
            if rg(*x) {
                accumulate(nodes, grads, *x, g.scaled(val(*scalar).item()));
            }
        }
        Op::RowScale { scale, x } => {
            let (s, xv) = (val(*scale), val(*x));
            if rg(*scale) {
                let gs: Vec<f64> = (0..xv.rows()).map(|r| dot(g.row(r), xv.row(r))).collect();
                accumulate(nodes, grads, *scale, Matrix::column(&gs));
            }
            if rg(*x) {
                let mut gx = g.clone();
                for r in 0..gx.rows() {
                    let f = s.as_slice()[r];
                    gx.row_mut(r).iter_mut().for_each(|v| *v *= f);
                }
                accumulate(nodes, grads, *x, gx);
            }
        }
        Op::AddRowBias { x, bias } => {
            accumulate(nodes, grads, *x, g.clone());
            if rg(*bias) {
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, s) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
                accumulate(nodes, grads, *bias, gb);
            }
        }
        Op::Relu(a) => {
            let gx = g.zip_map(val(*a), |gg, x| if x > 0.0 { gg } else { 0.0 });
            accumulate(nodes, grads, *a, gx);
        }
        Op::Sigmoid(a) => {
            let gx = g.zip_map(&node.value, |gg, y| gg * y * (1.0 - y));
            accumulate(nodes, grads, *a, gx);
        }
        Op::Log(a) => {
            let gx = g.zip_map(val(*a), |gg, x| gg / x);
            accumulate(nodes, grads, *a, gx);
        }
        Op::RowNorm(a) => {
            let xv = val(*a);
            let mut gx = Matrix::zeros(xv.rows(), xv.cols());
            for r in 0..xv.rows() {
                let n = node.value.as_slice()[r];
                if n == 0.0 {
                    continue;
                }
                let f = g.as_slice()[r] / n;
                for (d, s) in gx.row_mut(r).iter_mut().zip(xv.row(r)) {
                    *d = f * s;
                }
            }
            accumulate(nodes, grads, *a, gx);
        }
        Op::RowCosine(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let mut ga = Matrix::zeros(av.rows(), av.cols());
            let mut gb = Matrix::zeros(bv.rows(), bv.cols());
            for r in 0..av.rows() {
                let (x, y) = (av.row(r), bv.row(r));
                let nx = dot(x, x).sqrt();
                let ny = dot(y, y).sqrt();
                if nx == 0.0 || ny == 0.0 {
                    continue;
                }
                let cos = node.value.as_slice()[r];
                let gr = g.as_slice()[r];
                for (k, d) in ga.row_mut(r).iter_mut().enumerate() {
                    *d = gr * (y[k] / (nx * ny) - cos * x[k] / (nx * nx));
                }
                for (k, d) in gb.row_mut(r).iter_mut().enumerate() {
                    *d = gr * (x[k] / (nx * ny) - cos * y[k] / (ny * ny));
                }
            }
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let cols = val(p).cols();
                if rg(p) {
                    let mut gp = Matrix::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    accumulate(nodes, grads, p, gp);
                }
                offset += cols;
            }
        }
        Op::Dropout { x, mask } => {
            let data = g.as_slice().iter().zip(mask).map(|(a, m)| a * m).collect();
            accumulate(nodes, grads, *x, Matrix::from_vec(g.rows(), g.cols(), data)?);
        }
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            accumulate(nodes, grads, *a, Matrix::filled(r, c, g.item()));
        }
        Op::Mean(a) => {
            let (r, c) = val(*a).shape();
            accumulate(nodes, grads, *a, Matrix::filled(r, c, g.item() / (r * c) as f64));
        }
        Op::GatherRows { x, idx } => {
            let xv = val(*x);
            let mut gx = Matrix::zeros(xv.rows(), xv.cols());
            for (k, &i) in idx.iter().enumerate() {
                for (d, s) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                    *d += s;
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::ClampMax { x, bound } => {
            let gx = g.zip_map(val(*x), |gg, v| if v < *bound { gg } else { 0.0 });
            accumulate(nodes, grads, *x, gx);
        }
        Op::SoftmaxRows(x) => {
            let y = &node.value;
            let mut gx = Matrix::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let inner = dot(y.row(r), g.row(r));
                for ((d, &yy), &gg) in gx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                    *d = yy * (gg - inner);
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::CrossEntropy {
            logits,
            labels,
            rows,
        } => {
            let l = val(*logits);
            let mut gl = Matrix::zeros(l.rows(), l.cols());
            let f = g.item() / rows.len() as f64;
            for &r in rows {
                let mut p = l.row(r).to_vec();
                softmax_in_place(&mut p);
                p[labels[r]] -= 1.0;
                for (d, s) in gl.row_mut(r).iter_mut().zip(&p) {
                    *d += f * s;
                }
            }
            accumulate(nodes, grads, *logits, gl);
        }
        Op::Poincare { x, curvature } => {
            let xv = val(*x);
            let mut gx = Matrix::zeros(xv.rows(), xv.cols());
            for r in 0..xv.rows() {
                let row = xv.row(r);
                let n = dot(row, row).sqrt();
                if n == 0.0 {
                    continue;
                }
                let gain = poincare_gain(n, *curvature);
                let s = (1.0 + curvature * n * n).sqrt();
                // d gain / d n, divided by n so it multiplies x x^T directly
                let dgain_over_n =
                    -((1.0 + s) + curvature * n * n / s) / (n * n * n * (1.0 + s) * (1.0 + s));
                let gr = g.row(r);
                let xg = dot(row, gr);
                for (k, d) in gx.row_mut(r).iter_mut().enumerate() {
                    *d = gain * gr[k] + dgain_over_n * xg * row[k];
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Lorentz(x) => {
            let xv = val(*x);
            let mut gx = Matrix::zeros(xv.rows(), xv.cols());
            for r in 0..xv.rows() {
                let row = xv.row(r);
                let t = node.value.row(r)[0];
                let gr = g.row(r);
                for (k, d) in gx.row_mut(r).iter_mut().enumerate() {
                    *d = gr[k + 1] + gr[0] * row[k] / t;
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::TangentLog(x) => {
            let xv = val(*x);
            let mut gx = Matrix::zeros(xv.rows(), xv.cols());
            for r in 0..xv.rows() {
                let row = xv.row(r);
                let (f, df) = log_gain(row[0]);
                let gr = g.row(r);
                let dst = gx.row_mut(r);
                dst[0] = df * dot(gr, &row[1..]);
                for (d, gg) in dst[1..].iter_mut().zip(gr) {
                    *d = f * gg;
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
    }
    Ok(())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Per-row multiplier of the Poincaré projection; zero at the origin.
pub(crate) fn poincare_gain(norm: f64, curvature: f64) -> f64 {
    if norm == 0.0 {
        0.0
    } else {
        1.0 / (norm * (1.0 + (1.0 + curvature * norm * norm).sqrt()))
    }
}

/// `arcosh(x0) / sqrt(x0^2 - 1)` and its derivative in `x0`, with the
/// removable singularity at `x0 = 1` handled by a series expansion.
pub(crate) fn log_gain(x0: f64) -> (f64, f64) {
    let y = x0 - 1.0;
    if y < 1e-4 {
        let y = y.max(0.0);
        (1.0 - y / 3.0 + 2.0 * y * y / 15.0, -1.0 / 3.0 + 4.0 * y / 15.0)
    } else {
        let s = (x0 * x0 - 1.0).sqrt();
        let a = x0.acosh();
        let f = a / s;
        (f, (1.0 - x0 * f) / (s * s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_backward_gates_on_sign() {
        let mut t = Tape::new();
        let x = t.param(Matrix::column(&[-1.0, 1.0]));
        let y = t.relu(x).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = Tape::new();
        let x = t.param(Matrix::scalar(0.0));
        let y = t.sigmoid(x).unwrap();
        let g = t.backward(y).unwrap();
        assert!((g.wrt(x).item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(Matrix::scalar(2.0));
        let unused = t.param(Matrix::zeros(2, 3));
        let y = t.scale(x, 3.0).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(unused), Matrix::zeros(2, 3));
        assert!(g.get(unused).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x + x must match y = 2x
        let mut t = Tape::new();
        let x = t.param(Matrix::column(&[1.5, -2.0]));
        let y = t.add(x, x).unwrap();
        let s = t.sum(y).unwrap();
        let g1 = t.backward(s).unwrap().wrt(x);

        let mut t = Tape::new();
        let x = t.param(Matrix::column(&[1.5, -2.0]));
        let y = t.scale(x, 2.0).unwrap();
        let s = t.sum(y).unwrap();
        let g2 = t.backward(s).unwrap().wrt(x);
        assert_eq!(g1, g2);
        assert_eq!(g1.as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn matmul_gradient_is_outer_product_pattern() {
        // L = sum(W x) with fixed x: dL/dW[i][j] = x[j]
        let mut t = Tape::new();
        let w = t.param(Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 4.0]]).unwrap());
        let x = t.constant(Matrix::column(&[0.5, -1.0, 2.0]));
        let y = t.matmul(w, x).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(w).as_slice(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::new();
        let x = t.param(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(GnsnError::Tape(_))));
        let mut other = Tape::new();
        let y = other.param(Matrix::scalar(1.0));
        assert!(t.backward(y).is_err());
        // handles die with the tape contents
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert!(t.sum(x).is_err());
    }

    #[test]
    fn masked_softmax_single_entry_rows() {
        let mut t = Tape::new();
        let p = Arc::new(SparsePattern::from_rows(3, vec![vec![0], vec![2], vec![1]]).unwrap());
        let s = t.constant(Matrix::column(&[3.0, -7.0, 0.1]));
        let a = t.masked_softmax(s, &p).unwrap();
        assert_eq!(t.value(a).as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn masked_softmax_rejects_empty_rows() {
        let mut t = Tape::new();
        let p = Arc::new(SparsePattern::from_rows(2, vec![vec![0, 1], vec![]]).unwrap());
        let s = t.constant(Matrix::column(&[0.0, 0.0]));
        assert!(t.masked_softmax(s, &p).is_err());
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::column(&[1.0, 0.0]));
        assert!(t.log(x).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_log_c() {
        let mut t = Tape::new();
        let l = t.constant(Matrix::zeros(3, 4));
        let ce = t.cross_entropy(l, &[0, 1, 3], &[0, 1, 2]).unwrap();
        assert!((t.value(ce).item() - 4f64.ln()).abs() < 1e-12);
        assert!(t.cross_entropy(l, &[0, 1, 3], &[]).is_err());
    }

    #[test]
    fn log_gain_series_matches_closed_form() {
        for &x0 in &[1.0 + 2e-4, 1.0 + 1e-3] {
            let s = (x0 * x0 - 1.0f64).sqrt();
            let exact = x0.acosh() / s;
            let y: f64 = x0 - 1.0;
            let series = 1.0 - y / 3.0 + 2.0 * y * y / 15.0;
            assert!((exact - series).abs() < 1e-9);
        }
    }
}
