//! Reverse-mode automatic differentiation over 2-D matrices.
//!
//! A [`Tape`] records an eagerly evaluated computation graph; [`Tape::backward`]
//! walks it once in reverse and returns gradients for every node that needs
//! them. All tensors are `Array2`: vectors are 1×n or n×1, scalars 1×1.

use ndarray::{s, Array2, Axis};
use std::cell::RefCell;

use crate::scalar::{lit, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op<S: Scalar> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// m×n + 1×n broadcast (bias rows).
    AddRow(usize, usize),
    /// m×n ⊙ 1×n broadcast (layer-norm gain).
    MulRow(usize, usize),
    /// m×n ⊙ m×1 constant 0/1 column (row masking).
    MaskRows(usize, Array2<S>),
    Scale(usize, S),
    AddScalar(usize, S),
    Sigmoid(usize),
    Tanh(usize),
    Abs(usize),
    /// Row-wise softmax of `x` plus a constant additive mask; the mask never
    /// receives gradient, so backward only needs `x` and the output.
    SoftmaxRows { x: usize },
    /// Row-wise standardization (no affine); caches 1/σ̂ per row.
    LayerNormRows { x: usize, inv_std: Array2<S> },
    /// Row-wise L2 normalization; caches 1/‖x‖ per row.
    RowNormalize { x: usize, inv_norm: Array2<S> },
    SumAll(usize),
    ConcatRows(usize, usize),
    SliceRows { x: usize, start: usize, end: usize },
    SliceCols { x: usize, start: usize, end: usize },
    ConcatCols(Vec<usize>),
}

struct Node<S: Scalar> {
    value: Array2<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

const LAYER_NORM_EPS: f64 = 1e-5;
const ROW_NORM_EPS: f64 = 1e-12;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<S>, op: Op<S>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// A differentiable leaf (parameter or input we want gradients for).
    pub fn leaf(&self, value: Array2<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; backward never propagates into it.
    pub fn constant(&self, value: Array2<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Array2<S> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        let d = nodes[v.0].value.dim();
        d
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.dot(&nodes[b.0].value)
        };
        let ng = self.needs(&[a.0, b.0]);
        self.push(value, Op::MatMul(a.0, b.0), ng)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.t().to_owned();
        let ng = self.needs(&[a.0]);
        self.push(value, Op::Transpose(a.0), ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value + &nodes[b.0].value
        };
        let ng = self.needs(&[a.0, b.0]);
        self.push(value, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value - &nodes[b.0].value
        };
        let ng = self.needs(&[a.0, b.0]);
        self.push(value, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value * &nodes[b.0].value
        };
        let ng = self.needs(&[a.0, b.0]);
        self.push(value, Op::Mul(a.0, b.0), ng)
    }

    /// `a` (m×n) + `row` (1×n), broadcast over rows.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            debug_assert_eq!(nodes[row.0].value.nrows(), 1);
            &nodes[a.0].value + &nodes[row.0].value
        };
        let ng = self.needs(&[a.0, row.0]);
        self.push(value, Op::AddRow(a.0, row.0), ng)
    }

    /// `a` (m×n) ⊙ `row` (1×n), broadcast over rows.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            debug_assert_eq!(nodes[row.0].value.nrows(), 1);
            &nodes[a.0].value * &nodes[row.0].value
        };
        let ng = self.needs(&[a.0, row.0]);
        self.push(value, Op::MulRow(a.0, row.0), ng)
    }

    /// `a` (m×n) with each row multiplied by the constant column `mask` (m×1).
    pub fn mask_rows(&self, a: Var, mask: &Array2<S>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            debug_assert_eq!(mask.dim(), (nodes[a.0].value.nrows(), 1));
            &nodes[a.0].value * mask
        };
        let ng = self.needs(&[a.0]);
        self.push(value, Op::MaskRows(a.0, mask.clone()), ng)
    }

    pub fn scale(&self, a: Var, c: S) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|x| x * c);
        let ng = self.needs(&[a.0]);
        self.push(value, Op::Scale(a.0, c), ng)
    }

    pub fn add_scalar(&self, a: Var, c: S) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|x| x + c);
        let ng = self.needs(&[a.0]);
        self.push(value, Op::AddScalar(a.0, c), ng)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let one = lit::<S>(1.0);
        let value = self.nodes.borrow()[a.0].value.mapv(|x| {
            // Split on sign for numerical stability.
            if x >= S::zero() {
                one / (one + (-x).exp())
            } else {
                let e = x.exp();
                e / (one + e)
            }
        });
        let ng = self.needs(&[a.0]);
        self.push(value, Op::Sigmoid(a.0), ng)
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|x| x.tanh());
        let ng = self.needs(&[a.0]);
        self.push(value, Op::Tanh(a.0), ng)
    }

    pub fn abs(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|x| x.abs());
        let ng = self.needs(&[a.0]);
        self.push(value, Op::Abs(a.0), ng)
    }

    /// Row-wise softmax with an optional constant additive mask (1×n,
    /// broadcast over rows; use large negative entries to exclude keys).
    pub fn softmax_rows(&self, a: Var, mask: Option<&Array2<S>>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let mut out = Array2::<S>::zeros(x.dim());
            for (i, row) in x.outer_iter().enumerate() {
                let mut z: Vec<S> = row.to_vec();
                if let Some(m) = mask {
                    for (j, v) in z.iter_mut().enumerate() {
                        *v = *v + m[[0, j]];
                    }
                }
                let max = z.iter().cloned().fold(S::neg_infinity(), S::max);
                let mut sum = S::zero();
                for v in z.iter_mut() {
                    *v = (*v - max).exp();
                    sum = sum + *v;
                }
                for (j, v) in z.iter().enumerate() {
                    out[[i, j]] = *v / sum;
                }
            }
            out
        };
        let ng = self.needs(&[a.0]);
        self.push(value, Op::SoftmaxRows { x: a.0 }, ng)
    }

    /// Row-wise standardization: (x − μ) / √(σ² + ε), no affine part.
    pub fn layer_norm_rows(&self, a: Var) -> Var {
        let eps = lit::<S>(LAYER_NORM_EPS);
        let (value, inv_std) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let (m, n) = x.dim();
            let inv_n = lit::<S>(1.0 / n as f64);
            let mut out = Array2::<S>::zeros((m, n));
            let mut inv = Array2::<S>::zeros((m, 1));
            for i in 0..m {
                let row = x.row(i);
                let mean = row.iter().cloned().sum::<S>() * inv_n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
                let is = S::one() / (var + eps).sqrt();
                inv[[i, 0]] = is;
                for j in 0..n {
                    out[[i, j]] = (x[[i, j]] - mean) * is;
                }
            }
            (out, inv)
        };
        let ng = self.needs(&[a.0]);
        self.push(value, Op::LayerNormRows { x: a.0, inv_std }, ng)
    }

    /// Row-wise L2 normalization: x / √(‖x‖² + ε).
    pub fn row_normalize(&self, a: Var) -> Var {
        let eps = lit::<S>(ROW_NORM_EPS);
        let (value, inv_norm) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let (m, n) = x.dim();
            let mut out = Array2::<S>::zeros((m, n));
            let mut inv = Array2::<S>::zeros((m, 1));
            for i in 0..m {
                let sq: S = x.row(i).iter().map(|&v| v * v).sum();
                let iv = S::one() / (sq + eps).sqrt();
                inv[[i, 0]] = iv;
                for j in 0..n {
                    out[[i, j]] = x[[i, j]] * iv;
                }
            }
            (out, inv)
        };
        let ng = self.needs(&[a.0]);
        self.push(value, Op::RowNormalize { x: a.0, inv_norm }, ng)
    }

    /// Sum of every entry, as a 1×1 matrix.
    pub fn sum_all(&self, a: Var) -> Var {
        let s: S = self.nodes.borrow()[a.0].value.iter().cloned().sum();
        let ng = self.needs(&[a.0]);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a.0), ng)
    }

    pub fn concat_rows(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (xa, xb) = (&nodes[a.0].value, &nodes[b.0].value);
            ndarray::concatenate(Axis(0), &[xa.view(), xb.view()]).expect("row concat")
        };
        let ng = self.needs(&[a.0, b.0]);
        self.push(value, Op::ConcatRows(a.0, b.0), ng)
    }

    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        let value = self.nodes.borrow()[a.0].value.slice(s![start..end, ..]).to_owned();
        let ng = self.needs(&[a.0]);
        self.push(value, Op::SliceRows { x: a.0, start, end }, ng)
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let value = self.nodes.borrow()[a.0].value.slice(s![.., start..end]).to_owned();
        let ng = self.needs(&[a.0]);
        self.push(value, Op::SliceCols { x: a.0, start, end }, ng)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|v| nodes[v.0].value.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("col concat")
        };
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let ng = self.needs(&ids);
        self.push(value, Op::ConcatCols(ids), ng)
    }

    // ── composites ──────────────────────────────────────────────────────

    /// Mean of every entry, as a 1×1 matrix.
    pub fn mean_all(&self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let sum = self.sum_all(a);
        self.scale(sum, lit::<S>(1.0 / (m as f64 * n as f64)))
    }

    /// Tanh-approximated GELU, built from primitives so backward is automatic.
    pub fn gelu(&self, x: Var) -> Var {
        let x2 = self.mul(x, x);
        let x3 = self.mul(x2, x);
        let inner = self.add(x, self.scale(x3, lit::<S>(0.044715)));
        let t = self.tanh(self.scale(inner, lit::<S>(0.7978845608028654)));
        let one_plus = self.add_scalar(t, S::one());
        self.mul(self.scale(x, lit::<S>(0.5)), one_plus)
    }

    /// Reverse pass from a scalar (1×1) loss node.
    pub fn backward(&self, loss: Var) -> Grads<S> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "backward needs a scalar loss");
        let mut g: Vec<Option<Array2<S>>> = (0..nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Array2::from_elem((1, 1), S::one()));

        for i in (0..=loss.0).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let Some(gi) = g[i].take() else { continue };
            match &nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].needs_grad {
                        acc(&mut g[*a], gi.dot(&vb.t()));
                    }
                    if nodes[*b].needs_grad {
                        acc(&mut g[*b], va.t().dot(&gi));
                    }
                }
                Op::Transpose(a) => acc(&mut g[*a], gi.t().to_owned()),
                Op::Add(a, b) => {
                    if nodes[*a].needs_grad {
                        acc(&mut g[*a], gi.clone());
                    }
                    if nodes[*b].needs_grad {
                        acc(&mut g[*b], gi.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if nodes[*a].needs_grad {
                        acc(&mut g[*a], gi.clone());
                    }
                    if nodes[*b].needs_grad {
                        acc(&mut g[*b], gi.mapv(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if nodes[*a].needs_grad {
                        acc(&mut g[*a], &gi * &nodes[*b].value);
                    }
                    if nodes[*b].needs_grad {
                        acc(&mut g[*b], &gi * &nodes[*a].value);
                    }
                }
                Op::AddRow(a, r) => {
                    if nodes[*a].needs_grad {
                        acc(&mut g[*a], gi.clone());
                    }
                    if nodes[*r].needs_grad {
                        let col_sum = gi.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut g[*r], col_sum);
                    }
                }
                Op::MulRow(a, r) => {
                    if nodes[*a].needs_grad {
                        acc(&mut g[*a], &gi * &nodes[*r].value);
                    }
                    if nodes[*r].needs_grad {
                        let prod = &gi * &nodes[*a].value;
                        let col_sum = prod.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut g[*r], col_sum);
                    }
                }
                Op::MaskRows(a, mask) => acc(&mut g[*a], &gi * mask),
                Op::Scale(a, c) => acc(&mut g[*a], gi.mapv(|v| v * *c)),
                Op::AddScalar(a, _) => acc(&mut g[*a], gi.clone()),
                Op::Sigmoid(a) => {
                    let y = &nodes[i].value;
                    acc(&mut g[*a], &gi * &y.mapv(|v| v * (S::one() - v)));
                }
                Op::Tanh(a) => {
                    let y = &nodes[i].value;
                    acc(&mut g[*a], &gi * &y.mapv(|v| S::one() - v * v));
                }
                Op::Abs(a) => {
                    let sign = nodes[*a].value.mapv(|v| {
                        if v > S::zero() {
                            S::one()
                        } else if v < S::zero() {
                            -S::one()
                        } else {
                            S::zero()
                        }
                    });
                    acc(&mut g[*a], &gi * &sign);
                }
                Op::SoftmaxRows { x } => {
                    let y = &nodes[i].value;
                    let (m, n) = y.dim();
                    let mut dx = Array2::<S>::zeros((m, n));
                    for r in 0..m {
                        let dot: S = (0..n).map(|c| gi[[r, c]] * y[[r, c]]).sum();
                        for c in 0..n {
                            dx[[r, c]] = y[[r, c]] * (gi[[r, c]] - dot);
                        }
                    }
                    acc(&mut g[*x], dx);
                }
                Op::LayerNormRows { x, inv_std } => {
                    let y = &nodes[i].value;
                    let (m, n) = y.dim();
                    let inv_n = lit::<S>(1.0 / n as f64);
                    let mut dx = Array2::<S>::zeros((m, n));
                    for r in 0..m {
                        let mean_g: S = (0..n).map(|c| gi[[r, c]]).sum::<S>() * inv_n;
                        let mean_gy: S =
                            (0..n).map(|c| gi[[r, c]] * y[[r, c]]).sum::<S>() * inv_n;
                        let is = inv_std[[r, 0]];
                        for c in 0..n {
                            dx[[r, c]] = is * (gi[[r, c]] - mean_g - y[[r, c]] * mean_gy);
                        }
                    }
                    acc(&mut g[*x], dx);
                }
                Op::RowNormalize { x, inv_norm } => {
                    let vx = &nodes[*x].value;
                    let (m, n) = vx.dim();
                    let mut dx = Array2::<S>::zeros((m, n));
                    for r in 0..m {
                        let iv = inv_norm[[r, 0]];
                        let dot: S = (0..n).map(|c| gi[[r, c]] * vx[[r, c]]).sum();
                        let k = iv * iv * iv * dot;
                        for c in 0..n {
                            dx[[r, c]] = iv * gi[[r, c]] - k * vx[[r, c]];
                        }
                    }
                    acc(&mut g[*x], dx);
                }
                Op::SumAll(a) => {
                    let d = nodes[*a].value.dim();
                    acc(&mut g[*a], Array2::from_elem(d, gi[[0, 0]]));
                }
                Op::ConcatRows(a, b) => {
                    let ra = nodes[*a].value.nrows();
                    if nodes[*a].needs_grad {
                        acc(&mut g[*a], gi.slice(s![..ra, ..]).to_owned());
                    }
                    if nodes[*b].needs_grad {
                        acc(&mut g[*b], gi.slice(s![ra.., ..]).to_owned());
                    }
                }
                Op::SliceRows { x, start, end } => {
                    let d = nodes[*x].value.dim();
                    let slot = g[*x].get_or_insert_with(|| Array2::zeros(d));
                    let mut region = slot.slice_mut(s![*start..*end, ..]);
                    region += &gi;
                }
                Op::SliceCols { x, start, end } => {
                    let d = nodes[*x].value.dim();
                    let slot = g[*x].get_or_insert_with(|| Array2::zeros(d));
                    let mut region = slot.slice_mut(s![.., *start..*end]);
                    region += &gi;
                }
                Op::ConcatCols(ids) => {
                    let mut c0 = 0;
                    for id in ids {
                        let w = nodes[*id].value.ncols();
                        if nodes[*id].needs_grad {
                            acc(&mut g[*id], gi.slice(s![.., c0..c0 + w]).to_owned());
                        }
                        c0 += w;
                    }
                }
            }
            g[i] = Some(gi);
        }
        Grads { g }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn acc<S: Scalar>(slot: &mut Option<Array2<S>>, delta: Array2<S>) {
    match slot {
        Some(existing) => *existing += &delta,
        None => *slot = Some(delta),
    }
}

/// Gradient results of one backward pass.
pub struct Grads<S: Scalar> {
    g: Vec<Option<Array2<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Array2<S>> {
        self.g.get(v.0).and_then(|o| o.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<S>> {
        self.g.get_mut(v.0).and_then(|o| o.take())
    }
}
