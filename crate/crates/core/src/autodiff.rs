//! A small reverse-mode automatic differentiation tape over dense matrices.
//!
//! Every value is a `DMatrix<f64>`; scalars are 1×1. Nodes are appended in
//! evaluation order, so a single reverse sweep yields all gradients.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const GROUPNORM_EPS: f64 = 1e-5;
pub const LOSS_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// Adds a 1×C row to every row.
    AddRow(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// Divides every entry by a 1×1 value.
    DivScalar(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Gelu(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: DMatrix<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    SoftmaxRows(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    BroadcastRows(Var),
    NormalizeRows(Var),
    PairwiseDist(Var, Var),
    Sum(Var),
    /// Frobenius norm, as a 1×1 value.
    Norm(Var),
    MatchLoss { w: Var, coef: DMatrix<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
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

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: DMatrix<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: DMatrix<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b).transpose();
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row).row(0).clone_owned();
        let mut v = self.value(x).clone();
        for mut vr in v.row_iter_mut() {
            vr += &r;
        }
        self.push(v, Op::AddRow(x, row), &[x, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).component_mul(self.value(b));
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).component_div(self.value(b));
        self.push(v, Op::Div(a, b), &[a, b])
    }

    pub fn div_scalar(&mut self, x: Var, s: Var) -> Var {
        let v = self.value(x) / self.scalar(s);
        self.push(v, Op::DivScalar(x, s), &[x, s])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) * c;
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    /// Group normalization of an `n × C` matrix: channels are split into `groups`
    /// contiguous blocks, each normalized over all its entries (every row).
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        assert!(groups > 0 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let cg = c / groups;
        let count = (n * cg) as f64;
        let mut xhat = DMatrix::zeros(n, c);
        let mut inv_std = Vec::with_capacity(groups);
        for g in 0..groups {
            let block = xv.columns(g * cg, cg);
            let mean = block.sum() / count;
            let var = block.map(|e| (e - mean).powi(2)).sum() / count;
            let inv = 1.0 / (var + GROUPNORM_EPS).sqrt();
            xhat.columns_mut(g * cg, cg).copy_from(&block.map(|e| (e - mean) * inv));
            inv_std.push(inv);
        }
        let (gm, bt) = (self.value(gamma), self.value(beta));
        let mut v = xhat.clone();
        for j in 0..c {
            let (s, b) = (gm[(0, j)], bt[(0, j)]);
            v.column_mut(j).apply(|e| *e = *e * s + b);
        }
        self.push(
            v,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut v = DMatrix::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.nrows(), rows, "concat row mismatch");
            v.columns_mut(at, pv.ncols()).copy_from(pv);
            at += pv.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).columns(start, len).clone_owned();
        self.push(v, Op::SliceCols(x, start), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for mut row in v.row_iter_mut() {
            let mx = row.max();
            row.apply(|e| *e = (*e - mx).exp());
            let s = row.sum();
            row /= s;
        }
        self.push(v, Op::SoftmaxRows(x), &[x])
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = xv.row_mean();
        let v = DMatrix::from_row_slice(1, v.len(), v.as_slice());
        self.push(v, Op::MeanRows(x), &[x])
    }

    pub fn max_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut arg = Vec::with_capacity(xv.ncols());
        let mut v = DMatrix::zeros(1, xv.ncols());
        for (j, col) in xv.column_iter().enumerate() {
            let mut best = 0;
            for i in 1..col.len() {
                if col[i] > col[best] {
                    best = i;
                }
            }
            arg.push(best);
            v[(0, j)] = col[best];
        }
        self.push(v, Op::MaxRows(x, arg), &[x])
    }

    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Var {
        let r = self.value(row);
        let v = DMatrix::from_fn(n, r.ncols(), |_, j| r[(0, j)]);
        self.push(v, Op::BroadcastRows(row), &[row])
    }

    /// Scales every row to unit length; rows shorter than `1e-12` are rejected.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let mut v = self.value(x).clone();
        for (i, mut row) in v.row_iter_mut().enumerate() {
            let n = row.norm();
            if !(n >= 1e-12) {
                return Err(Error::DegenerateRow(i));
            }
            row /= n;
        }
        Ok(self.push(v, Op::NormalizeRows(x), &[x]))
    }

    /// `D_ij = ‖a_i − b_j‖` between rows.
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let v = DMatrix::from_fn(av.nrows(), bv.nrows(), |i, j| (av.row(i) - bv.row(j)).norm());
        self.push(v, Op::PairwiseDist(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = DMatrix::from_element(1, 1, self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn norm(&mut self, x: Var) -> Var {
        let v = DMatrix::from_element(1, 1, self.value(x).norm());
        self.push(v, Op::Norm(x), &[x])
    }

    /// Balanced negative log-likelihood of a match matrix against a 0/1 truth table.
    pub fn match_loss(&mut self, w: Var, truth: &[Vec<bool>]) -> Result<Var> {
        let wv = self.value(w);
        let (rows, cols) = wv.shape();
        if truth.len() != rows || truth.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("correspondence matrix shape mismatch".into()));
        }
        let n_true = truth.iter().flatten().filter(|&&c| c).count();
        if n_true == 0 {
            return Err(Error::Config("matching loss needs at least one true pair".into()));
        }
        let n_false = rows * cols - n_true;
        // signed per-entry weights: +1/A_true on true pairs, -1/A_false on false pairs
        let coef = DMatrix::from_fn(rows, cols, |i, j| {
            if truth[i][j] {
                1.0 / n_true as f64
            } else {
                -1.0 / n_false as f64
            }
        });
        let mut loss = 0.0;
        for (x, c) in wv.iter().zip(coef.iter()) {
            let x = x.clamp(LOSS_CLAMP, 1.0 - LOSS_CLAMP);
            loss -= if *c > 0.0 { c * x.ln() } else { -c * (1.0 - x).ln() };
        }
        Ok(self.push(DMatrix::from_element(1, 1, loss), Op::MatchLoss { w, coef }, &[w]))
    }

    /// Gradients of the 1×1 node `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(DMatrix::from_element(1, 1, 1.0));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients(grads)
    }

    fn propagate(&self, node: &Node, g: &DMatrix<f64>, grads: &mut [Option<DMatrix<f64>>]) {
        let mut acc = |v: Var, d: DMatrix<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => *e += d,
                slot => *slot = Some(d),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g * val(*b).transpose());
                acc(*b, val(*a).transpose() * g);
            }
            Op::MatMulT(a, b) => {
                acc(*a, g * val(*b));
                acc(*b, g.transpose() * val(*a));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                let s = g.row_sum();
                acc(*row, DMatrix::from_row_slice(1, s.len(), s.as_slice()));
            }
            Op::Mul(a, b) => {
                acc(*a, g.component_mul(val(*b)));
                acc(*b, g.component_mul(val(*a)));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                acc(*a, g.component_div(bv));
                let q = node.value.component_div(bv);
                acc(*b, -g.component_mul(&q));
            }
            Op::DivScalar(x, s) => {
                let sv = val(*s)[(0, 0)];
                acc(*x, g / sv);
                let d = -g.component_mul(&node.value).sum() / sv;
                acc(*s, DMatrix::from_element(1, 1, d));
            }
            Op::Scale(x, c) => acc(*x, g * *c),
            Op::Exp(x) => acc(*x, g.component_mul(&node.value)),
            Op::Gelu(x) => acc(*x, g.component_mul(&val(*x).map(gelu_grad))),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let (n, c) = g.shape();
                let cg = c / groups;
                let count = (n * cg) as f64;
                let gm = val(*gamma);
                let mut dgamma = DMatrix::zeros(1, c);
                let mut dbeta = DMatrix::zeros(1, c);
                let mut dxhat = g.clone();
                for j in 0..c {
                    dgamma[(0, j)] = g.column(j).dot(&xhat.column(j));
                    dbeta[(0, j)] = g.column(j).sum();
                    dxhat.column_mut(j).scale_mut(gm[(0, j)]);
                }
                let mut dx = DMatrix::zeros(n, c);
                for (k, inv) in inv_std.iter().enumerate() {
                    let dh = dxhat.columns(k * cg, cg);
                    let xh = xhat.columns(k * cg, cg);
                    let s1 = dh.sum();
                    let s2 = dh.component_mul(&xh).sum();
                    let block = (dh * count - xh * s2).add_scalar(-s1) * (inv / count);
                    dx.columns_mut(k * cg, cg).copy_from(&block);
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    acc(*p, g.columns(at, w).clone_owned());
                    at += w;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = val(*x);
                let mut d = DMatrix::zeros(xv.nrows(), xv.ncols());
                d.columns_mut(*start, g.ncols()).copy_from(g);
                acc(*x, d);
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut d = g.component_mul(y);
                for (i, mut row) in d.row_iter_mut().enumerate() {
                    let s = row.sum();
                    let yr = y.row(i);
                    row -= yr * s;
                }
                acc(*x, d);
            }
            Op::MeanRows(x) => {
                let n = val(*x).nrows();
                acc(*x, DMatrix::from_fn(n, g.ncols(), |_, j| g[(0, j)] / n as f64));
            }
            Op::MaxRows(x, arg) => {
                let xv = val(*x);
                let mut d = DMatrix::zeros(xv.nrows(), xv.ncols());
                for (j, &i) in arg.iter().enumerate() {
                    d[(i, j)] = g[(0, j)];
                }
                acc(*x, d);
            }
            Op::BroadcastRows(row) => {
                let s = g.row_sum();
                acc(*row, DMatrix::from_row_slice(1, s.len(), s.as_slice()));
            }
            Op::NormalizeRows(x) => {
                let y = &node.value;
                let xv = val(*x);
                let mut d = g.clone();
                for (i, mut row) in d.row_iter_mut().enumerate() {
                    let yr = y.row(i);
                    let dot = row.dot(&yr);
                    let n = xv.row(i).norm();
                    row -= yr * dot;
                    row /= n;
                }
                acc(*x, d);
            }
            Op::PairwiseDist(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut da = DMatrix::zeros(av.nrows(), av.ncols());
                let mut db = DMatrix::zeros(bv.nrows(), bv.ncols());
                for i in 0..av.nrows() {
                    for j in 0..bv.nrows() {
                        let dist = node.value[(i, j)];
                        if dist == 0.0 {
                            continue;
                        }
                        let dir = (av.row(i) - bv.row(j)) * (g[(i, j)] / dist);
                        let mut ra = da.row_mut(i);
                        ra += &dir;
                        let mut rb = db.row_mut(j);
                        rb -= &dir;
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Sum(x) => {
                let xv = val(*x);
                acc(*x, DMatrix::from_element(xv.nrows(), xv.ncols(), g[(0, 0)]));
            }
            Op::Norm(x) => {
                let n = node.value[(0, 0)];
                let xv = val(*x);
                if n > 0.0 {
                    acc(*x, xv * (g[(0, 0)] / n));
                } else {
                    acc(*x, DMatrix::zeros(xv.nrows(), xv.ncols()));
                }
            }
            Op::MatchLoss { w, coef } => {
                let wv = val(*w);
                let d = DMatrix::from_fn(wv.nrows(), wv.ncols(), |i, j| {
                    let x = wv[(i, j)];
                    let c = coef[(i, j)];
                    if !(LOSS_CLAMP..=1.0 - LOSS_CLAMP).contains(&x) {
                        0.0
                    } else if c > 0.0 {
                        -c / x
                    } else {
                        -c / (1.0 - x)
                    }
                });
                acc(*w, d * g[(0, 0)]);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients(Vec<Option<DMatrix<f64>>>);

impl Gradients {
    /// Gradient of `v`; zero-shaped `None` means the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&DMatrix<f64>> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }
}
