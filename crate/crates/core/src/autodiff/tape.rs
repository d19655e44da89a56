use statrs::function::gamma::{digamma, ln_gamma};

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Index of a node on a [`Tape`]. Parents always have smaller ids than children.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation recorded on the tape, together with its parent nodes.
#[derive(Clone, Debug)]
pub enum Op {
    /// Differentiable input (a parameter snapshot).
    Leaf,
    /// Non-differentiable input; its adjoint is always zero.
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    /// Matrix times a 1x1 node.
    MulScalar(NodeId, NodeId),
    /// Matrix plus a 1x1 node.
    AddScalar(NodeId, NodeId),
    /// `diag(d) · B` for a column vector `d`.
    ScaleRows(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    /// `sqrt(max(x, 0))`; zero adjoint where the input was clamped.
    SqrtClamped(NodeId),
    Sum(NodeId),
    /// Sum over rows, giving a 1 x cols row vector.
    SumCols(NodeId),
    /// Sum over columns, giving a rows x 1 column vector.
    SumRows(NodeId),
    Columns {
        src: NodeId,
        start: usize,
    },
    HStack(Vec<NodeId>),
    /// Diagonal as a column vector.
    Diag(NodeId),
    /// `A + scale · mean(diag A) · I`.
    AddJitter {
        src: NodeId,
        scale: f64,
    },
    Cholesky(NodeId),
    /// `L⁻¹ B` for lower-triangular `L`.
    TriSolve(NodeId, NodeId),
    /// Strict lower triangle of the input plus `exp` of its diagonal.
    TriFactor(NodeId),
    LogSigmoid(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LGamma(NodeId),
    /// ARD RBF cross-covariance between the rows of `a` and `b`.
    RbfGram {
        a: NodeId,
        b: NodeId,
        log_variance: NodeId,
        log_inv_lengthscales: NodeId,
    },
}

impl Op {
    pub fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf | Constant => vec![],
            Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | MatMul(a, b)
            | MulScalar(a, b)
            | AddScalar(a, b)
            | ScaleRows(a, b)
            | TriSolve(a, b) => vec![*a, *b],
            Transpose(a)
            | Neg(a)
            | Scale(a, _)
            | Offset(a, _)
            | Exp(a)
            | Log(a)
            | Square(a)
            | SqrtClamped(a)
            | Sum(a)
            | SumCols(a)
            | SumRows(a)
            | Diag(a)
            | Cholesky(a)
            | TriFactor(a)
            | LogSigmoid(a)
            | SoftmaxRows(a)
            | LogSoftmaxRows(a)
            | LGamma(a) => {
                vec![*a]
            }
            Columns { src, .. } | AddJitter { src, .. } => vec![*src],
            HStack(parts) => parts.clone(),
            RbfGram {
                a,
                b,
                log_variance,
                log_inv_lengthscales,
            } => vec![*a, *b, *log_variance, *log_inv_lengthscales],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// Append-only record of a forward computation over dense matrices.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `id`; zeros for nodes the backward pass never reached.
    pub fn wrt(&self, id: NodeId) -> Matrix {
        match &self.adjoints[id.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, id: NodeId) -> Matrix {
        let (r, c) = self.shapes[id.0];
        self.adjoints[id.0]
            .take()
            .unwrap_or_else(|| Matrix::zeros(r, c))
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Forward value of the ARD RBF gram matrix.
pub(crate) fn rbf_gram_value(a: &Matrix, b: &Matrix, log_variance: f64, gamma: &[f64]) -> Matrix {
    let variance = log_variance.exp();
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ai = a.row(i);
        for j in 0..b.rows() {
            let bj = b.row(j);
            let mut s = 0.0;
            for q in 0..gamma.len() {
                let d = ai[q] - bj[q];
                s += gamma[q] * d * d;
            }
            out[(i, j)] = variance * (-0.5 * s).exp();
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    /// Appends a node. Parents must already be on the tape.
    pub fn record(&mut self, op: Op, value: Matrix) -> NodeId {
        let id = self.nodes.len();
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => op.parents().iter().any(|p| {
                assert!(p.0 < id, "parent {} not on tape", p.0);
                self.nodes[p.0].needs_grad
            }),
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(id)
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.record(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.record(Op::Constant, value)
    }

    pub fn scalar_constant(&mut self, value: f64) -> NodeId {
        self.constant(Matrix::scalar(value))
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn require_scalar(&self, op: &'static str, s: NodeId) -> Result<()> {
        if self.shape(s) != (1, 1) {
            return Err(Error::shape(op, (1, 1), self.shape(s)));
        }
        Ok(())
    }

    fn unary(&mut self, a: NodeId, op: fn(NodeId) -> Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.value(a).map(f);
        self.record(op(a), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).add(self.value(b));
        Ok(self.record(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).sub(self.value(b));
        Ok(self.record(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).hadamard(self.value(b));
        Ok(self.record(Op::Mul(a, b), v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.record(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.record(Op::Transpose(a), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Neg, |x| -x)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.record(Op::Scale(a, c), v)
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.record(Op::Offset(a, c), v)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.require_scalar("mul_scalar", s)?;
        let v = self.value(a).scale(self.value(s).item());
        Ok(self.record(Op::MulScalar(a, s), v))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.require_scalar("add_scalar", s)?;
        let c = self.value(s).item();
        let v = self.value(a).map(|x| x + c);
        Ok(self.record(Op::AddScalar(a, s), v))
    }

    pub fn scale_rows(&mut self, d: NodeId, b: NodeId) -> Result<NodeId> {
        let (dr, dc) = self.shape(d);
        if dc != 1 || dr != self.shape(b).0 {
            return Err(Error::shape("scale_rows", (dr, dc), self.shape(b)));
        }
        let dv = self.value(d);
        let bv = self.value(b);
        let v = Matrix::from_fn(bv.rows(), bv.cols(), |i, j| dv[(i, 0)] * bv[(i, j)]);
        Ok(self.record(Op::ScaleRows(d, b), v))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log, f64::ln)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square, |x| x * x)
    }

    pub fn sqrt_clamped(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::SqrtClamped, |x| x.max(0.0).sqrt())
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        self.record(Op::Sum(a), v)
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut out = Matrix::zeros(1, av.cols());
        for i in 0..av.rows() {
            for (o, &x) in out.as_mut_slice().iter_mut().zip(av.row(i)) {
                *o += x;
            }
        }
        self.record(Op::SumCols(a), out)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let out = Matrix::from_fn(av.rows(), 1, |i, _| av.row(i).iter().sum());
        self.record(Op::SumRows(a), out)
    }

    pub fn columns(&mut self, src: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let cols = self.shape(src).1;
        if start > end || end > cols {
            return Err(Error::shape("columns", self.shape(src), (start, end)));
        }
        let v = self.value(src).columns(start, end);
        Ok(self.record(Op::Columns { src, start }, v))
    }

    pub fn hstack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::hstack(&values)?;
        Ok(self.record(Op::HStack(parts.to_vec()), v))
    }

    pub fn diag(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r != c {
            return Err(Error::shape("diag", (r, c), (r, c)));
        }
        let v = Matrix::column_vector(&self.value(a).diag());
        Ok(self.record(Op::Diag(a), v))
    }

    pub fn add_jitter(&mut self, a: NodeId, scale: f64) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r != c {
            return Err(Error::shape("add_jitter", (r, c), (r, c)));
        }
        let mut v = self.value(a).clone();
        let mean_diag = v.diag().iter().sum::<f64>() / r.max(1) as f64;
        for i in 0..r {
            v[(i, i)] += scale * mean_diag;
        }
        Ok(self.record(Op::AddJitter { src: a, scale }, v))
    }

    /// Cholesky factor of a symmetric positive definite node.
    pub fn cholesky(&mut self, a: NodeId) -> Result<NodeId> {
        let l = self.value(a).cholesky()?;
        Ok(self.record(Op::Cholesky(a), l))
    }

    /// Factorizes `A + jitter` with jitter `1e-6 · mean(diag A)`, retrying
    /// once at `1e-4` before giving up.
    pub fn cholesky_jittered(&mut self, a: NodeId) -> Result<NodeId> {
        let mut last = None;
        for scale in [1e-6, 1e-4] {
            let jittered = self.add_jitter(a, scale)?;
            match self.value(jittered).cholesky() {
                Ok(l) => return Ok(self.record(Op::Cholesky(jittered), l)),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    pub fn trisolve(&mut self, l: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(l).solve_lower(self.value(b))?;
        Ok(self.record(Op::TriSolve(l, b), v))
    }

    pub fn tri_factor(&mut self, raw: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(raw);
        if r != c {
            return Err(Error::shape("tri_factor", (r, c), (r, c)));
        }
        let rv = self.value(raw);
        let v = Matrix::from_fn(r, c, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => rv[(i, j)],
            std::cmp::Ordering::Equal => rv[(i, i)].exp(),
            std::cmp::Ordering::Less => 0.0,
        });
        Ok(self.record(Op::TriFactor(raw), v))
    }

    /// `log det A` for SPD `A`, as twice the log-diagonal sum of its Cholesky factor.
    pub fn logdet(&mut self, a: NodeId) -> Result<NodeId> {
        let l = self.cholesky(a)?;
        Ok(self.logdet_from_cholesky(l))
    }

    pub fn logdet_from_cholesky(&mut self, l: NodeId) -> NodeId {
        let d = self.diag(l).expect("cholesky factor is square");
        let logd = self.log(d);
        let s = self.sum(logd);
        self.scale(s, 2.0)
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::LogSigmoid, log_sigmoid)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows(), av.cols());
        for i in 0..av.rows() {
            softmax_row(av.row(i), out.row_mut(i));
        }
        self.record(Op::SoftmaxRows(a), out)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut out = av.clone();
        for i in 0..av.rows() {
            let lse = log_sum_exp(av.row(i));
            for v in out.row_mut(i) {
                *v -= lse;
            }
        }
        self.record(Op::LogSoftmaxRows(a), out)
    }

    pub fn lgamma(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::LGamma, ln_gamma)
    }

    /// ARD RBF gram matrix `K[i, j] = σ² exp(-½ Σ_q γ_q (a_iq - b_jq)²)` with
    /// `σ² = exp(log_variance)` and `γ = exp(log_inv_lengthscales)`.
    pub fn rbf_gram(
        &mut self,
        a: NodeId,
        b: NodeId,
        log_variance: NodeId,
        log_inv_lengthscales: NodeId,
    ) -> Result<NodeId> {
        self.require_scalar("rbf_gram", log_variance)?;
        let q = self.value(log_inv_lengthscales).len();
        if self.shape(a).1 != q || self.shape(b).1 != q {
            return Err(Error::shape("rbf_gram", self.shape(a), self.shape(b)));
        }
        let gamma: Vec<f64> = self
            .value(log_inv_lengthscales)
            .as_slice()
            .iter()
            .map(|v| v.exp())
            .collect();
        let v = rbf_gram_value(
            self.value(a),
            self.value(b),
            self.value(log_variance).item(),
            &gamma,
        );
        Ok(self.record(
            Op::RbfGram {
                a,
                b,
                log_variance,
                log_inv_lengthscales,
            },
            v,
        ))
    }

    /// Reverse pass from a scalar root with seed 1.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let (rows, cols) = self.shape(root);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarRoot { rows, cols });
        }
        Ok(self.backward_seeded(&[(root, Matrix::scalar(1.0))]))
    }

    /// Reverse pass from arbitrary seed adjoints. Seeds on the same node add up.
    pub fn backward_seeded(&self, seeds: &[(NodeId, Matrix)]) -> Gradients {
        let n = self.nodes.len();
        let mut adj: Vec<Option<Matrix>> = vec![None; n];
        let mut top = 0;
        for (id, seed) in seeds {
            assert_eq!(self.shape(*id), seed.shape(), "seed shape mismatch");
            match &mut adj[id.0] {
                Some(m) => m.add_assign(seed),
                slot => *slot = Some(seed.clone()),
            }
            top = top.max(id.0 + 1);
        }
        for i in (0..top).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad {
                adj[i] = None;
            }
        }
        Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        }
    }

    fn accumulate(&self, adj: &mut [Option<Matrix>], id: NodeId, contribution: Matrix) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut adj[id.0] {
            Some(m) => m.add_assign(&contribution),
            slot => *slot = Some(contribution),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(adj, *a, g.hadamard(val(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(adj, *b, g.hadamard(val(*a)));
                }
            }
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(adj, *a, g.matmul_t(val(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(adj, *b, val(*a).t_matmul(g));
                }
            }
            Op::Transpose(a) => self.accumulate(adj, *a, g.transpose()),
            Op::Neg(a) => self.accumulate(adj, *a, g.scale(-1.0)),
            Op::Scale(a, c) => self.accumulate(adj, *a, g.scale(*c)),
            Op::Offset(a, _) => self.accumulate(adj, *a, g.clone()),
            Op::MulScalar(a, s) => {
                if self.wants(*a) {
                    self.accumulate(adj, *a, g.scale(val(*s).item()));
                }
                if self.wants(*s) {
                    let ds = g.hadamard(val(*a)).sum();
                    self.accumulate(adj, *s, Matrix::scalar(ds));
                }
            }
            Op::AddScalar(a, s) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *s, Matrix::scalar(g.sum()));
            }
            Op::ScaleRows(d, b) => {
                let dv = val(*d);
                let bv = val(*b);
                if self.wants(*d) {
                    let dd = Matrix::from_fn(dv.rows(), 1, |r, _| {
                        g.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum()
                    });
                    self.accumulate(adj, *d, dd);
                }
                if self.wants(*b) {
                    let db = Matrix::from_fn(bv.rows(), bv.cols(), |r, c| dv[(r, 0)] * g[(r, c)]);
                    self.accumulate(adj, *b, db);
                }
            }
            Op::Exp(a) => self.accumulate(adj, *a, g.hadamard(out)),
            Op::Log(a) => self.accumulate(adj, *a, g.zip_map(val(*a), |gi, x| gi / x)),
            Op::Square(a) => self.accumulate(adj, *a, g.zip_map(val(*a), |gi, x| 2.0 * gi * x)),
            Op::SqrtClamped(a) => {
                let d = g.zip_map(out, |gi, s| if s > 0.0 { gi / (2.0 * s) } else { 0.0 });
                self.accumulate(adj, *a, d);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(adj, *a, Matrix::filled(r, c, g.item()));
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(adj, *a, Matrix::from_fn(r, c, |_, j| g[(0, j)]));
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(adj, *a, Matrix::from_fn(r, c, |i, _| g[(i, 0)]));
            }
            Op::Columns { src, start } => {
                let (r, c) = val(*src).shape();
                let w = g.cols();
                let d = Matrix::from_fn(r, c, |i, j| {
                    if j >= *start && j < start + w {
                        g[(i, j - start)]
                    } else {
                        0.0
                    }
                });
                self.accumulate(adj, *src, d);
            }
            Op::HStack(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if self.wants(*p) {
                        self.accumulate(adj, *p, g.columns(offset, offset + w));
                    }
                    offset += w;
                }
            }
            Op::Diag(a) => {
                let n = val(*a).rows();
                let mut d = Matrix::zeros(n, n);
                for k in 0..n {
                    d[(k, k)] = g[(k, 0)];
                }
                self.accumulate(adj, *a, d);
            }
            Op::AddJitter { src, scale } => {
                let n = g.rows();
                let trace: f64 = g.diag().iter().sum();
                let mut d = g.clone();
                for k in 0..n {
                    d[(k, k)] += scale * trace / n as f64;
                }
                self.accumulate(adj, *src, d);
            }
            Op::Cholesky(a) => {
                self.accumulate(adj, *a, cholesky_backward(out, g));
            }
            Op::TriSolve(l, b) => {
                let lv = val(*l);
                let db = lv
                    .solve_lower_transpose(g)
                    .expect("shapes verified on forward");
                if self.wants(*l) {
                    let dl = db.matmul_t(out).lower_triangle().scale(-1.0);
                    self.accumulate(adj, *l, dl);
                }
                if self.wants(*b) {
                    self.accumulate(adj, *b, db);
                }
            }
            Op::TriFactor(raw) => {
                let d = Matrix::from_fn(g.rows(), g.cols(), |i, j| match i.cmp(&j) {
                    std::cmp::Ordering::Greater => g[(i, j)],
                    std::cmp::Ordering::Equal => g[(i, i)] * out[(i, i)],
                    std::cmp::Ordering::Less => 0.0,
                });
                self.accumulate(adj, *raw, d);
            }
            Op::LogSigmoid(a) => {
                let d = g.zip_map(val(*a), |gi, x| gi * sigmoid(-x));
                self.accumulate(adj, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let s = out.row(r);
                    let dot: f64 = g.row(r).iter().zip(s).map(|(x, y)| x * y).sum();
                    for (c, dv) in d.row_mut(r).iter_mut().enumerate() {
                        *dv = s[c] * (g[(r, c)] - dot);
                    }
                }
                self.accumulate(adj, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for (c, dv) in d.row_mut(r).iter_mut().enumerate() {
                        *dv = g[(r, c)] - out[(r, c)].exp() * total;
                    }
                }
                self.accumulate(adj, *a, d);
            }
            Op::LGamma(a) => {
                let d = g.zip_map(val(*a), |gi, x| gi * digamma(x));
                self.accumulate(adj, *a, d);
            }
            Op::RbfGram {
                a,
                b,
                log_variance,
                log_inv_lengthscales,
            } => {
                let av = val(*a);
                let bv = val(*b);
                let gamma: Vec<f64> = val(*log_inv_lengthscales)
                    .as_slice()
                    .iter()
                    .map(|v| v.exp())
                    .collect();
                let q = gamma.len();
                let weighted = g.hadamard(out);
                let mut da = Matrix::zeros(av.rows(), q);
                let mut db = Matrix::zeros(bv.rows(), q);
                let mut dgamma = vec![0.0; q];
                for i in 0..av.rows() {
                    let ai = av.row(i);
                    for j in 0..bv.rows() {
                        let w = weighted[(i, j)];
                        if w == 0.0 {
                            continue;
                        }
                        let bj = bv.row(j);
                        for k in 0..q {
                            let diff = ai[k] - bj[k];
                            dgamma[k] -= 0.5 * w * diff * diff;
                            let t = w * gamma[k] * diff;
                            da[(i, k)] -= t;
                            db[(j, k)] += t;
                        }
                    }
                }
                if self.wants(*a) {
                    self.accumulate(adj, *a, da);
                }
                if self.wants(*b) {
                    self.accumulate(adj, *b, db);
                }
                if self.wants(*log_variance) {
                    self.accumulate(adj, *log_variance, Matrix::scalar(weighted.sum()));
                }
                if self.wants(*log_inv_lengthscales) {
                    let shape = val(*log_inv_lengthscales).shape();
                    let d: Vec<f64> = dgamma.iter().zip(&gamma).map(|(d, g)| d * g).collect();
                    self.accumulate(
                        adj,
                        *log_inv_lengthscales,
                        Matrix::from_vec(shape.0, shape.1, d),
                    );
                }
            }
        }
    }
}

/// Symmetric adjoint of `A` given the factor `L` and its adjoint.
fn cholesky_backward(l: &Matrix, dl: &Matrix) -> Matrix {
    let n = l.rows();
    let mut phi = l.t_matmul(&dl.lower_triangle()).lower_triangle();
    for k in 0..n {
        phi[(k, k)] *= 0.5;
    }
    // S = L⁻ᵀ Φ L⁻¹, computed as two transposed solves.
    let y = l.solve_lower_transpose(&phi).expect("square factor");
    let s = l
        .solve_lower_transpose(&y.transpose())
        .expect("square factor")
        .transpose();
    s.symmetrize()
}
