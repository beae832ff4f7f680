//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value. [`Graph::backward`] walks the tape once in reverse. Nodes that do
//! not depend on any gradient-requiring leaf are skipped, so frozen weights
//! can be fed in as constants while gradients still flow *through* them.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::tensor::{gemm, Mat};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Silu(usize),
    Tanh(usize),
    Abs(usize),
    Square(usize),
    SoftmaxRows(usize),
    LayerNormRows { a: usize, eps: f64 },
    ConcatCols(Vec<usize>),
    SliceCols { a: usize, start: usize },
    ConcatRows(Vec<usize>),
    SliceRows { a: usize, start: usize },
    Gather { a: usize, map: Rc<Vec<Option<usize>>> },
    Sum(usize),
    Mean(usize),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    g: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({r}x{c})", self.id)
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&Mat> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when nothing reached it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = v.shape();
            Mat::zeros(r, c)
        })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Mat, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { g: self, id: nodes.len() - 1 }
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(&Mat) -> Mat) -> Var<'_> {
        let value = f(&self.nodes.borrow()[a].value);
        let needs = self.needs(&[a]);
        self.push(value, op, needs)
    }

    fn binary(&self, a: usize, b: usize, op: Op, f: impl FnOnce(&Mat, &Mat) -> Mat) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        let needs = self.needs(&[a, b]);
        self.push(value, op, needs)
    }

    /// Back-propagates from the scalar `loss` (a 1×1 node).
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Mat::full(1, 1, 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Grads { grads }
    }
}

fn acc(nodes: &[Node], grads: &mut [Option<Mat>], id: usize, g: Mat) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sum(m: &Mat) -> Mat {
    let mut out = Mat::zeros(1, m.cols);
    for r in 0..m.rows {
        for (o, v) in out.data.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

fn backprop_node(nodes: &[Node], id: usize, g: &Mat, grads: &mut [Option<Mat>]) {
    let y = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb } => {
            if nodes[a].needs_grad {
                let am = val(a);
                let mut ga = Mat::zeros(am.rows, am.cols);
                if ta {
                    gemm(val(b), tb, g, true, &mut ga, 0.0);
                } else {
                    gemm(g, false, val(b), !tb, &mut ga, 0.0);
                }
                acc(nodes, grads, a, ga);
            }
            if nodes[b].needs_grad {
                let bm = val(b);
                let mut gb = Mat::zeros(bm.rows, bm.cols);
                if tb {
                    gemm(g, true, val(a), ta, &mut gb, 0.0);
                } else {
                    gemm(val(a), !ta, g, false, &mut gb, 0.0);
                }
                acc(nodes, grads, b, gb);
            }
        }
        &Op::Add(a, b) => {
            acc(nodes, grads, a, g.clone());
            acc(nodes, grads, b, g.clone());
        }
        &Op::Sub(a, b) => {
            acc(nodes, grads, a, g.clone());
            acc(nodes, grads, b, g.scale(-1.0));
        }
        &Op::Mul(a, b) => {
            if nodes[a].needs_grad {
                acc(nodes, grads, a, g.zip_map(val(b), |x, y| x * y));
            }
            if nodes[b].needs_grad {
                acc(nodes, grads, b, g.zip_map(val(a), |x, y| x * y));
            }
        }
        &Op::AddRow(a, row) => {
            acc(nodes, grads, a, g.clone());
            if nodes[row].needs_grad {
                acc(nodes, grads, row, col_sum(g));
            }
        }
        &Op::MulRow(a, row) => {
            let rv = val(row);
            if nodes[a].needs_grad {
                let mut ga = g.clone();
                for r in 0..ga.rows {
                    for (x, s) in ga.row_mut(r).iter_mut().zip(&rv.data) {
                        *x *= s;
                    }
                }
                acc(nodes, grads, a, ga);
            }
            if nodes[row].needs_grad {
                acc(nodes, grads, row, col_sum(&g.zip_map(val(a), |x, y| x * y)));
            }
        }
        &Op::Scale(a, s) => acc(nodes, grads, a, g.scale(s)),
        &Op::Sigmoid(a) => acc(nodes, grads, a, g.zip_map(y, |g, y| g * y * (1.0 - y))),
        &Op::Silu(a) => {
            let ga = g.zip_map(val(a), |g, x| {
                let s = sigmoid(x);
                g * (s + x * s * (1.0 - s))
            });
            acc(nodes, grads, a, ga)
        }
        &Op::Tanh(a) => acc(nodes, grads, a, g.zip_map(y, |g, y| g * (1.0 - y * y))),
        &Op::Abs(a) => acc(nodes, grads, a, g.zip_map(val(a), |g, x| g * sign(x))),
        &Op::Square(a) => acc(nodes, grads, a, g.zip_map(val(a), |g, x| 2.0 * g * x)),
        &Op::SoftmaxRows(a) => {
            let mut ga = Mat::zeros(y.rows, y.cols);
            for r in 0..y.rows {
                let (yr, gr) = (y.row(r), g.row(r));
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, yv), gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            acc(nodes, grads, a, ga)
        }
        &Op::LayerNormRows { a, eps } => {
            let x = val(a);
            let n = x.cols as f64;
            let mut ga = Mat::zeros(x.rows, x.cols);
            for r in 0..x.rows {
                let xr = x.row(r);
                let mean = xr.iter().sum::<f64>() / n;
                let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                let gr = g.row(r);
                let yr = y.row(r);
                let gmean = gr.iter().sum::<f64>() / n;
                let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                    *o = inv * (gv - gmean - yv * gy);
                }
            }
            acc(nodes, grads, a, ga)
        }
        Op::ConcatCols(parts) => {
            let mut start = 0;
            for &p in parts {
                let w = val(p).cols;
                if nodes[p].needs_grad {
                    let gp = Mat::from_fn(g.rows, w, |r, c| g.get(r, start + c));
                    acc(nodes, grads, p, gp);
                }
                start += w;
            }
        }
        &Op::SliceCols { a, start } => {
            let am = val(a);
            let mut ga = Mat::zeros(am.rows, am.cols);
            for r in 0..g.rows {
                ga.row_mut(r)[start..start + g.cols].copy_from_slice(g.row(r));
            }
            acc(nodes, grads, a, ga)
        }
        Op::ConcatRows(parts) => {
            let mut start = 0;
            for &p in parts {
                let h = val(p).rows;
                if nodes[p].needs_grad {
                    let gp = Mat::from_vec(h, g.cols, g.data[start * g.cols..(start + h) * g.cols].to_vec());
                    acc(nodes, grads, p, gp);
                }
                start += h;
            }
        }
        &Op::SliceRows { a, start } => {
            let am = val(a);
            let mut ga = Mat::zeros(am.rows, am.cols);
            ga.data[start * am.cols..start * am.cols + g.data.len()].copy_from_slice(&g.data);
            acc(nodes, grads, a, ga)
        }
        Op::Gather { a, map } => {
            let am = val(*a);
            let mut ga = Mat::zeros(am.rows, am.cols);
            for (gv, src) in g.data.iter().zip(map.iter()) {
                if let Some(s) = src {
                    ga.data[*s] += gv;
                }
            }
            acc(nodes, grads, *a, ga)
        }
        &Op::Sum(a) => {
            let am = val(a);
            acc(nodes, grads, a, Mat::full(am.rows, am.cols, g.data[0]))
        }
        &Op::Mean(a) => {
            let am = val(a);
            let n = am.len().max(1) as f64;
            acc(nodes, grads, a, Mat::full(am.rows, am.cols, g.data[0] / n))
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.g
    }

    pub fn value(&self) -> Ref<'g, Mat> {
        Ref::map(self.g.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_mat(&self) -> Mat {
        self.value().clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.shape(), (1, 1));
        v.data[0]
    }

    fn same_graph(&self, other: &Var<'g>) {
        debug_assert!(std::ptr::eq(self.g, other.g), "vars from different graphs");
    }

    fn matmul_impl(self, other: Var<'g>, ta: bool, tb: bool) -> Var<'g> {
        self.same_graph(&other);
        self.g.binary(self.id, other.id, Op::MatMul { a: self.id, b: other.id, ta, tb }, |a, b| {
            let m = if ta { a.cols } else { a.rows };
            let n = if tb { b.rows } else { b.cols };
            let mut out = Mat::zeros(m, n);
            gemm(a, ta, b, tb, &mut out, 0.0);
            out
        })
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.matmul_impl(other, false, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(self, other: Var<'g>) -> Var<'g> {
        self.matmul_impl(other, false, true)
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.same_graph(&other);
        self.g.binary(self.id, other.id, Op::Add(self.id, other.id), |a, b| {
            assert_eq!(a.shape(), b.shape(), "add shape mismatch");
            a.zip_map(b, |x, y| x + y)
        })
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.same_graph(&other);
        self.g.binary(self.id, other.id, Op::Sub(self.id, other.id), |a, b| {
            assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
            a.zip_map(b, |x, y| x - y)
        })
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.same_graph(&other);
        self.g.binary(self.id, other.id, Op::Mul(self.id, other.id), |a, b| {
            assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
            a.zip_map(b, |x, y| x * y)
        })
    }

    /// Adds a `1×cols` row to every row.
    pub fn add_row(self, row: Var<'g>) -> Var<'g> {
        self.g.binary(self.id, row.id, Op::AddRow(self.id, row.id), |a, r| {
            assert_eq!((1, a.cols), r.shape(), "add_row shape mismatch");
            let mut out = a.clone();
            for i in 0..out.rows {
                for (x, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                    *x += b;
                }
            }
            out
        })
    }

    /// Multiplies every row elementwise by a `1×cols` row.
    pub fn mul_row(self, row: Var<'g>) -> Var<'g> {
        self.g.binary(self.id, row.id, Op::MulRow(self.id, row.id), |a, r| {
            assert_eq!((1, a.cols), r.shape(), "mul_row shape mismatch");
            let mut out = a.clone();
            for i in 0..out.rows {
                for (x, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                    *x *= b;
                }
            }
            out
        })
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        self.g.unary(self.id, Op::Scale(self.id, s), |a| a.scale(s))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.g.unary(self.id, Op::Sigmoid(self.id), |a| a.map(sigmoid))
    }

    pub fn silu(self) -> Var<'g> {
        self.g.unary(self.id, Op::Silu(self.id), |a| a.map(|x| x * sigmoid(x)))
    }

    pub fn tanh(self) -> Var<'g> {
        self.g.unary(self.id, Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    pub fn abs(self) -> Var<'g> {
        self.g.unary(self.id, Op::Abs(self.id), |a| a.map(f64::abs))
    }

    pub fn square(self) -> Var<'g> {
        self.g.unary(self.id, Op::Square(self.id), |a| a.map(|x| x * x))
    }

    pub fn softmax_rows(self) -> Var<'g> {
        self.g.unary(self.id, Op::SoftmaxRows(self.id), |a| {
            let mut out = a.clone();
            for r in 0..out.rows {
                let row = out.row_mut(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                for x in row.iter_mut() {
                    *x /= total;
                }
            }
            out
        })
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(self, eps: f64) -> Var<'g> {
        self.g.unary(self.id, Op::LayerNormRows { a: self.id, eps }, |a| {
            let n = a.cols as f64;
            let mut out = a.clone();
            for r in 0..out.rows {
                let row = out.row_mut(r);
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - mean) * inv;
                }
            }
            out
        })
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'g> {
        self.g.unary(self.id, Op::SliceCols { a: self.id, start }, |a| {
            assert!(start + len <= a.cols, "slice_cols out of range");
            Mat::from_fn(a.rows, len, |r, c| a.get(r, start + c))
        })
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Var<'g> {
        self.g.unary(self.id, Op::SliceRows { a: self.id, start }, |a| {
            assert!(start + len <= a.rows, "slice_rows out of range");
            Mat::from_vec(len, a.cols, a.data[start * a.cols..(start + len) * a.cols].to_vec())
        })
    }

    /// Structural re-indexing: `out.data[i] = self.data[map[i]]`, or 0 where
    /// `map[i]` is `None`. Covers reshapes, transposes, shifts and padding.
    pub fn gather(self, rows: usize, cols: usize, map: Rc<Vec<Option<usize>>>) -> Var<'g> {
        assert_eq!(rows * cols, map.len(), "gather map length");
        let op = Op::Gather { a: self.id, map: map.clone() };
        self.g.unary(self.id, op, |a| {
            let data = map.iter().map(|s| s.map_or(0.0, |i| a.data[i])).collect();
            Mat::from_vec(rows, cols, data)
        })
    }

    pub fn sum(self) -> Var<'g> {
        self.g.unary(self.id, Op::Sum(self.id), |a| Mat::full(1, 1, a.sum()))
    }

    pub fn mean(self) -> Var<'g> {
        self.g.unary(self.id, Op::Mean(self.id), |a| Mat::full(1, 1, a.sum() / a.len().max(1) as f64))
    }
}

pub fn concat_cols<'g>(parts: &[Var<'g>]) -> Var<'g> {
    assert!(!parts.is_empty());
    let g = parts[0].g;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let value = {
        let nodes = g.nodes.borrow();
        let rows = nodes[ids[0]].value.rows;
        let cols: usize = ids.iter().map(|&i| nodes[i].value.cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &i in &ids {
                let v = &nodes[i].value;
                assert_eq!(v.rows, rows, "concat_cols row mismatch");
                out.row_mut(r)[c0..c0 + v.cols].copy_from_slice(v.row(r));
                c0 += v.cols;
            }
        }
        out
    };
    let needs = g.needs(&ids);
    g.push(value, Op::ConcatCols(ids), needs)
}

pub fn concat_rows<'g>(parts: &[Var<'g>]) -> Var<'g> {
    assert!(!parts.is_empty());
    let g = parts[0].g;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let value = {
        let nodes = g.nodes.borrow();
        let cols = nodes[ids[0]].value.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &ids {
            let v = &nodes[i].value;
            assert_eq!(v.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        Mat::from_vec(rows, cols, data)
    };
    let needs = g.needs(&ids);
    g.push(value, Op::ConcatRows(ids), needs)
}
