//! Dynamic reverse-mode tape over dense matrices.
//!
//! Nodes are appended in evaluation order, so the tape is a topological order
//! of the computation graph and the backward sweep is a single reverse scan.
//! The tape is rebuilt for every evaluation.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::Graph;

use super::linalg;
use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    AddScalar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ColSum(Var),
    SqDist(Var, Var),
    Cholesky(Var),
    SolveLower(Var, Var),
    SolveLowerT(Var, Var),
    DiagPart(Var),
    LowerTriSoftplus(Var),
    MeanAggregate(Var, Arc<Graph>),
    GatherRows(Var, Arc<[usize]>),
}

/// One record of the computation graph: the op, its parents (inside the op)
/// and the cached forward value.
#[derive(Clone, Debug)]
pub struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

impl Node {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn parents(&self) -> Vec<Var> {
        self.op.parents()
    }
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b)
            | Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | AddRow(a, b)
            | MulScalar(a, b)
            | DivScalar(a, b)
            | AddScalar(a, b)
            | SqDist(a, b)
            | SolveLower(a, b)
            | SolveLowerT(a, b) => vec![*a, *b],
            Transpose(a)
            | Scale(a, _)
            | AddConst(a)
            | Relu(a)
            | Sigmoid(a)
            | Exp(a)
            | Log(a)
            | Softplus(a)
            | Square(a)
            | Sum(a)
            | Mean(a)
            | RowSum(a)
            | ColSum(a)
            | Cholesky(a)
            | DiagPart(a)
            | LowerTriSoftplus(a)
            | MeanAggregate(a, _)
            | GatherRows(a, _) => vec![*a],
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
    visited: usize,
}

impl Gradients {
    /// Adjoint of `v`; zeros when `v` did not influence the root.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.adjoints[v.0] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
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

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Number of nodes that `backward(root)` will visit.
    pub fn grad_nodes_upto(&self, root: Var) -> usize {
        self.nodes[..=root.0].iter().filter(|n| n.requires_grad).count()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(Op::Leaf, value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push_raw(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(op, value, requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    fn check_same(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    fn check_scalar(&self, what: &str, s: Var) -> Result<()> {
        if self.dims(s) != (1, 1) {
            return Err(Error::shape(format!(
                "{what}: expected 1x1 scalar, got {:?}",
                self.dims(s)
            )));
        }
        Ok(())
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = linalg::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// `a + 1·row`, broadcasting a `1 x c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(Error::shape(format!("add_row: {r}x{c} + {:?}", self.dims(row))));
        }
        let rv = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        for chunk in v.data_mut().chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(&rv) {
                *x += b;
            }
        }
        Ok(self.push(Op::AddRow(a, row), v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddConst(a), v)
    }

    /// `a * s` for a `1 x 1` tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check_scalar("mul_scalar", s)?;
        let sv = self.value(s).item();
        let v = self.value(a).scale(sv);
        Ok(self.push(Op::MulScalar(a, s), v))
    }

    /// `a / s` for a `1 x 1` tensor `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check_scalar("div_scalar", s)?;
        let sv = self.value(s).item();
        let v = self.value(a).map(|x| x / sv);
        Ok(self.push(Op::DivScalar(a, s), v))
    }

    /// `a + s` for a `1 x 1` tensor `s`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check_scalar("add_scalar", s)?;
        let sv = self.value(s).item();
        let v = self.value(a).map(|x| x + sv);
        Ok(self.push(Op::AddScalar(a, s), v))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(a), v)
    }

    /// `r x c -> r x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, _) = t.dims();
        let v = Tensor::column((0..r).map(|i| t.row_slice(i).iter().sum()).collect());
        self.push(Op::RowSum(a), v)
    }

    /// `r x c -> 1 x c`.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(t.row_slice(i)) {
                *o += x;
            }
        }
        self.push(Op::ColSum(a), Tensor::row(out))
    }

    /// Pairwise squared distances between rows of `a` and rows of `b`.
    pub fn sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = linalg::sqdist(self.value(a), self.value(b))?;
        Ok(self.push(Op::SqDist(a, b), v))
    }

    /// Lower Cholesky factor using the jitter ladder starting at
    /// `min_jitter`. The jitter is a constant shift and has no gradient.
    pub fn cholesky(&mut self, a: Var, min_jitter: f64) -> Result<Var> {
        let (l, _) = linalg::cholesky_jittered(self.value(a), min_jitter)?;
        Ok(self.push(Op::Cholesky(a), l))
    }

    /// `L⁻¹ B`.
    pub fn solve_lower(&mut self, l: Var, b: Var) -> Result<Var> {
        let v = linalg::solve_lower(self.value(l), self.value(b))?;
        Ok(self.push(Op::SolveLower(l, b), v))
    }

    /// `L⁻ᵀ B`.
    pub fn solve_lower_t(&mut self, l: Var, b: Var) -> Result<Var> {
        let v = linalg::solve_lower_t(self.value(l), self.value(b))?;
        Ok(self.push(Op::SolveLowerT(l, b), v))
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag_part(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r != c {
            return Err(Error::shape(format!("diag_part of {r}x{c}")));
        }
        let t = self.value(a);
        let v = Tensor::column((0..r).map(|i| t.get(i, i)).collect());
        Ok(self.push(Op::DiagPart(a), v))
    }

    /// Lower-triangular factor from an unconstrained square matrix: strict
    /// lower part copied, diagonal passed through softplus, upper part zero.
    pub fn lower_tri_softplus(&mut self, raw: Var) -> Result<Var> {
        let (r, c) = self.dims(raw);
        if r != c {
            return Err(Error::shape(format!("lower_tri_softplus of {r}x{c}")));
        }
        let t = self.value(raw);
        let mut out = Tensor::zeros(r, r);
        for i in 0..r {
            for j in 0..i {
                out.set(i, j, t.get(i, j));
            }
            out.set(i, i, softplus(t.get(i, i)));
        }
        Ok(self.push(Op::LowerTriSoftplus(raw), out))
    }

    /// Closed-neighborhood mean over an undirected graph.
    pub fn mean_aggregate(&mut self, h: Var, g: &Arc<Graph>) -> Result<Var> {
        let v = g.mean_aggregate(self.value(h))?;
        Ok(self.push(Op::MeanAggregate(h, Arc::clone(g)), v))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &Arc<[usize]>) -> Result<Var> {
        let n = self.dims(a).0;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape(format!("gather_rows: index {bad} >= {n}")));
        }
        let v = self.value(a).select_rows(idx);
        Ok(self.push(Op::GatherRows(a, Arc::clone(idx)), v))
    }

    /// `2 Σ log diag(L)` for a Cholesky factor `L`.
    pub fn logdet_from_cholesky(&mut self, l: Var) -> Result<Var> {
        let d = self.diag_part(l)?;
        let ld = self.log(d);
        let s = self.sum(ld);
        Ok(self.scale(s, 2.0))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar root. The root's adjoint is seeded to 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.dims(root) != (1, 1) {
            return Err(Error::shape(format!(
                "backward from non-scalar root {:?}",
                self.dims(root)
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Tensor::scalar(1.0));
        let mut visited = 0;

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            visited += 1;
            let Some(g) = adj[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut adj)?;
            adj[idx] = Some(g);
        }

        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.dims()).collect(),
            visited,
        })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        use Op::*;
        let out = &node.value;
        match &node.op {
            Leaf => {}
            MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let da = linalg::matmul_nt(g, self.value(*b))?;
                    self.accumulate(adj, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = linalg::matmul_tn(self.value(*a), g)?;
                    self.accumulate(adj, *b, db);
                }
            }
            Transpose(a) => self.accumulate(adj, *a, g.transpose()),
            Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.scale(-1.0));
            }
            Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                self.accumulate(adj, *a, g.zip_map(bv, |x, y| x * y));
                self.accumulate(adj, *b, g.zip_map(av, |x, y| x * y));
            }
            AddRow(a, row) => {
                self.accumulate(adj, *a, g.clone());
                let (r, c) = g.dims();
                let mut cs = vec![0.0; c];
                for i in 0..r {
                    for (o, x) in cs.iter_mut().zip(g.row_slice(i)) {
                        *o += x;
                    }
                }
                self.accumulate(adj, *row, Tensor::row(cs));
            }
            Scale(a, c) => self.accumulate(adj, *a, g.scale(*c)),
            AddConst(a) => self.accumulate(adj, *a, g.clone()),
            MulScalar(a, s) => {
                let sv = self.value(*s).item();
                self.accumulate(adj, *a, g.scale(sv));
                let ds = g.dot(self.value(*a));
                self.accumulate(adj, *s, Tensor::scalar(ds));
            }
            DivScalar(a, s) => {
                let sv = self.value(*s).item();
                self.accumulate(adj, *a, g.scale(1.0 / sv));
                let ds = -g.dot(self.value(*a)) / (sv * sv);
                self.accumulate(adj, *s, Tensor::scalar(ds));
            }
            AddScalar(a, s) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *s, Tensor::scalar(g.sum()));
            }
            Relu(a) => {
                let av = self.value(*a);
                self.accumulate(adj, *a, g.zip_map(av, |d, x| if x > 0.0 { d } else { 0.0 }));
            }
            Sigmoid(a) => self.accumulate(adj, *a, g.zip_map(out, |d, s| d * s * (1.0 - s))),
            Exp(a) => self.accumulate(adj, *a, g.zip_map(out, |d, e| d * e)),
            Log(a) => {
                let av = self.value(*a);
                self.accumulate(adj, *a, g.zip_map(av, |d, x| d / x));
            }
            Softplus(a) => {
                let av = self.value(*a);
                self.accumulate(adj, *a, g.zip_map(av, |d, x| d * sigmoid(x)));
            }
            Square(a) => {
                let av = self.value(*a);
                self.accumulate(adj, *a, g.zip_map(av, |d, x| 2.0 * d * x));
            }
            Sum(a) => {
                let (r, c) = self.dims(*a);
                self.accumulate(adj, *a, Tensor::filled(r, c, g.item()));
            }
            Mean(a) => {
                let (r, c) = self.dims(*a);
                let n = (r * c) as f64;
                self.accumulate(adj, *a, Tensor::filled(r, c, g.item() / n));
            }
            RowSum(a) => {
                let (r, c) = self.dims(*a);
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    let gi = g.get(i, 0);
                    for j in 0..c {
                        d.set(i, j, gi);
                    }
                }
                self.accumulate(adj, *a, d);
            }
            ColSum(a) => {
                let (r, c) = self.dims(*a);
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        d.set(i, j, g.get(0, j));
                    }
                }
                self.accumulate(adj, *a, d);
            }
            SqDist(a, b) => {
                // d/da_i = 2 Σ_j g_ij (a_i - b_j); d/db_j = 2 Σ_i g_ij (b_j - a_i)
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.nodes[a.0].requires_grad {
                    let gb = linalg::matmul(g, bv)?;
                    let mut da = av.clone();
                    let s = av.cols();
                    for i in 0..av.rows() {
                        let rs: f64 = g.row_slice(i).iter().sum();
                        for k in 0..s {
                            da.set(i, k, 2.0 * (rs * av.get(i, k) - gb.get(i, k)));
                        }
                    }
                    self.accumulate(adj, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let ga = linalg::matmul_tn(g, av)?;
                    let mut db = bv.clone();
                    let s = bv.cols();
                    let mut cs = vec![0.0; bv.rows()];
                    for i in 0..g.rows() {
                        for (o, x) in cs.iter_mut().zip(g.row_slice(i)) {
                            *o += x;
                        }
                    }
                    for (j, &c) in cs.iter().enumerate() {
                        for k in 0..s {
                            db.set(j, k, 2.0 * (c * bv.get(j, k) - ga.get(j, k)));
                        }
                    }
                    self.accumulate(adj, *b, db);
                }
            }
            Cholesky(a) => {
                // Ā = ½ (S + Sᵀ), S = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹, Φ = lower triangle with halved diagonal.
                let l = out;
                let lbar = linalg::tril(g);
                let mut p = linalg::tril(&linalg::matmul_tn(l, &lbar)?);
                for i in 0..p.rows() {
                    let v = p.get(i, i);
                    p.set(i, i, 0.5 * v);
                }
                let x = linalg::solve_lower_t(l, &p)?;
                let s = linalg::solve_lower_t(l, &x.transpose())?.transpose();
                let sym = s.zip_map(&s.transpose(), |u, v| 0.5 * (u + v));
                self.accumulate(adj, *a, sym);
            }
            SolveLower(l, b) => {
                let gsol = linalg::solve_lower_t(self.value(*l), g)?;
                if self.nodes[l.0].requires_grad {
                    let dl = linalg::tril(&linalg::matmul_nt(&gsol, out)?).scale(-1.0);
                    self.accumulate(adj, *l, dl);
                }
                self.accumulate(adj, *b, gsol);
            }
            SolveLowerT(l, b) => {
                let gsol = linalg::solve_lower(self.value(*l), g)?;
                if self.nodes[l.0].requires_grad {
                    let dl = linalg::tril(&linalg::matmul_nt(out, &gsol)?).scale(-1.0);
                    self.accumulate(adj, *l, dl);
                }
                self.accumulate(adj, *b, gsol);
            }
            DiagPart(a) => {
                let n = g.rows();
                let mut d = Tensor::zeros(n, n);
                for i in 0..n {
                    d.set(i, i, g.get(i, 0));
                }
                self.accumulate(adj, *a, d);
            }
            LowerTriSoftplus(raw) => {
                let rv = self.value(*raw);
                let n = rv.rows();
                let mut d = Tensor::zeros(n, n);
                for i in 0..n {
                    for j in 0..i {
                        d.set(i, j, g.get(i, j));
                    }
                    d.set(i, i, g.get(i, i) * sigmoid(rv.get(i, i)));
                }
                self.accumulate(adj, *raw, d);
            }
            MeanAggregate(h, graph) => {
                let d = graph.mean_aggregate_adjoint(g)?;
                self.accumulate(adj, *h, d);
            }
            GatherRows(a, idx) => {
                let (r, c) = self.dims(*a);
                let mut d = Tensor::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        let v = d.get(i, j) + g.get(k, j);
                        d.set(i, j, v);
                    }
                }
                self.accumulate(adj, *a, d);
            }
        }
        Ok(())
    }
}
