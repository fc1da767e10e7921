//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D matrix (scalars are `1×1`). A [`Graph`] records the
//! forward computation as a tape; [`Graph::backward`] walks it in reverse and
//! accumulates gradients for every node that contributed to the root.
//!
//! Sequences are laid out as `frames × features`, so the sequence ops here
//! (`unfold_rows`, `depthwise_conv`, `gather_rows`) all operate along rows.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use ndarray::{s, Array2, Axis, Zip};

use crate::ctc;
use crate::params::ParameterSet;

pub type Mat = Array2<f64>;

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    BroadcastRows(usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Swish(usize),
    Relu(usize),
    Abs(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    SumAll(usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    Unfold { x: usize, kernel: usize, stride: usize, pad: usize },
    DepthwiseConv { x: usize, w: usize, pad: usize },
    Reshape(usize),
    Saved { x: usize, grad: Mat },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(String, usize)>>,
    param_ids: RefCell<HashMap<String, usize>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    graph: &'g Graph,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({r}×{c})", self.id)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { id: nodes.len() - 1, graph: self }
    }

    fn with<R>(&self, id: usize, f: impl FnOnce(&Mat) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    fn with2<R>(&self, a: usize, b: usize, f: impl FnOnce(&Mat, &Mat) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a].value, &nodes[b].value)
    }

    /// A leaf that is not tracked as a parameter.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Leaf bound to a named parameter; repeated lookups share one node.
    pub fn param(&self, set: &ParameterSet, name: &str) -> Var<'_> {
        if let Some(&id) = self.param_ids.borrow().get(name) {
            return Var { id, graph: self };
        }
        let value = set
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not in the parameter set"))
            .value
            .clone();
        let v = self.push(value, Op::Leaf);
        self.param_ids.borrow_mut().insert(name.to_string(), v.id);
        self.params.borrow_mut().push((name.to_string(), v.id));
        v
    }

    /// Leaf registered under `name` with an explicit value.
    pub fn named_leaf(&self, name: &str, value: Mat) -> Var<'_> {
        let v = self.push(value, Op::Leaf);
        self.param_ids.borrow_mut().insert(name.to_string(), v.id);
        self.params.borrow_mut().push((name.to_string(), v.id));
        v
    }

    pub fn concat_rows<'g>(&'g self, parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch")
        };
        self.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch")
        };
        self.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    /// Reverse pass from a `1×1` root.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.dim(), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Array2::ones((1, 1)));

        for i in (0..=root.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |id: usize| &nodes[id].value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&val(*b).t()));
                    acc(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(&mut grads, *a, g.dot(val(*b)));
                    acc(&mut grads, *b, g.t().dot(val(*a)));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * val(*b));
                    acc(&mut grads, *b, &g * val(*a));
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, r) => {
                    let rv = val(*r);
                    let dr = (&g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, &g * rv);
                    acc(&mut grads, *r, dr);
                }
                Op::BroadcastRows(r) => {
                    acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Offset(a) => acc(&mut grads, *a, g),
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Log(a) => acc(&mut grads, *a, g / val(*a)),
                Op::Tanh(a) => {
                    let d = node.value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, g * d);
                }
                Op::Sigmoid(a) => {
                    let d = node.value.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *a, g * d);
                }
                Op::Swish(a) => {
                    let d = val(*a).mapv(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    acc(&mut grads, *a, g * d);
                }
                Op::Relu(a) => {
                    let d = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, g * d);
                }
                Op::Abs(a) => {
                    let d = val(*a).mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, g * d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Array2::zeros(y.dim());
                    for ((mut dr, yr), gr) in
                        d.rows_mut().into_iter().zip(y.rows()).zip(g.rows())
                    {
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut dr).and(&yr).and(&gr).for_each(|d, &y, &g| {
                            *d = y * (g - dot);
                        });
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Array2::zeros(y.dim());
                    for ((mut dr, yr), gr) in
                        d.rows_mut().into_iter().zip(y.rows()).zip(g.rows())
                    {
                        let total: f64 = gr.sum();
                        Zip::from(&mut dr).and(&yr).and(&gr).for_each(|d, &y, &g| {
                            *d = g - y.exp() * total;
                        });
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut d = Array2::zeros(y.dim());
                    for (r, ((mut dr, yr), gr)) in d
                        .rows_mut()
                        .into_iter()
                        .zip(y.rows())
                        .zip(g.rows())
                        .enumerate()
                    {
                        let sum_g: f64 = gr.sum();
                        let sum_gy: f64 = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / n;
                        Zip::from(&mut dr).and(&yr).and(&gr).for_each(|d, &y, &g| {
                            *d = k * (n * g - sum_g - y * sum_gy);
                        });
                    }
                    acc(&mut grads, *x, d);
                }
                Op::SumAll(a) => {
                    let shape = val(*a).dim();
                    acc(&mut grads, *a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::SliceRows(a, start) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let r = val(p).nrows();
                        acc(&mut grads, p, g.slice(s![off..off + r, ..]).to_owned());
                        off += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = val(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., off..off + c]).to_owned());
                        off += c;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let mut d: Mat = Array2::zeros(val(*a).dim());
                    for (out_row, &src) in idx.iter().enumerate() {
                        let mut dst = d.row_mut(src);
                        dst += &g.row(out_row);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Unfold { x, kernel, stride, pad } => {
                    let xv = val(*x);
                    let (t, c) = xv.dim();
                    let mut d: Mat = Array2::zeros((t, c));
                    for o in 0..g.nrows() {
                        for k in 0..*kernel {
                            let src = (o * stride + k) as isize - *pad as isize;
                            if src < 0 || src as usize >= t {
                                continue;
                            }
                            let mut dst = d.row_mut(src as usize);
                            dst += &g.slice(s![o, k * c..(k + 1) * c]);
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::DepthwiseConv { x, w, pad } => {
                    let xv = val(*x);
                    let wv = val(*w);
                    let (t, c) = xv.dim();
                    let kernel = wv.nrows();
                    let mut dx: Mat = Array2::zeros((t, c));
                    let mut dw: Mat = Array2::zeros((kernel, c));
                    for o in 0..t {
                        let grow = g.row(o);
                        for k in 0..kernel {
                            let src = (o + k) as isize - *pad as isize;
                            if src < 0 || src as usize >= t {
                                continue;
                            }
                            let src = src as usize;
                            let xr = xv.row(src);
                            let wr = wv.row(k);
                            let mut dxr = dx.row_mut(src);
                            Zip::from(&mut dxr).and(&grow).and(&wr).for_each(|d, &g, &w| {
                                *d += g * w;
                            });
                            let mut dwr = dw.row_mut(k);
                            Zip::from(&mut dwr).and(&grow).and(&xr).for_each(|d, &g, &x| {
                                *d += g * x;
                            });
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                }
                Op::Reshape(a) => {
                    let shape = val(*a).dim();
                    let d = g
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order(shape)
                        .expect("reshape backward");
                    acc(&mut grads, *a, d);
                }
                Op::Saved { x, grad } => {
                    let k = g[[0, 0]];
                    acc(&mut grads, *x, grad * k);
                }
            }
        }

        Gradients {
            grads,
            params: self.params.borrow().clone(),
        }
    }
}

fn acc(grads: &mut [Option<Mat>], id: usize, delta: Mat) {
    match &mut grads[id] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Mat> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros when `v` did not reach the root.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(v.shape()))
    }

    /// Gradients of every named leaf that received one.
    pub fn into_named(mut self) -> BTreeMap<String, Mat> {
        let mut out = BTreeMap::new();
        for (name, id) in std::mem::take(&mut self.params) {
            if let Some(g) = self.grads[id].take() {
                out.insert(name, g);
            }
        }
        out
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Mat {
        self.graph.with(self.id, Mat::clone)
    }

    pub fn scalar_value(&self) -> f64 {
        self.graph.with(self.id, |m| {
            assert_eq!(m.dim(), (1, 1), "scalar_value on non-scalar");
            m[[0, 0]]
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.graph.with(self.id, Mat::dim)
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    fn unary(self, f: impl FnOnce(&Mat) -> Mat, op: Op) -> Var<'g> {
        let v = self.graph.with(self.id, f);
        self.graph.push(v, op)
    }

    fn binary(self, other: Var<'g>, f: impl FnOnce(&Mat, &Mat) -> Mat, op: Op) -> Var<'g> {
        let v = self.graph.with2(self.id, other.id, f);
        self.graph.push(v, op)
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a.dot(b), Op::MatMul(self.id, other.id))
    }

    /// `self · otherᵀ`
    pub fn matmul_t(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a.dot(&b.t()), Op::MatMulT(self.id, other.id))
    }

    pub fn t(self) -> Var<'g> {
        self.unary(|a| a.t().to_owned(), Op::Transpose(self.id))
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.binary(
            other,
            |a, b| {
                assert_eq!(a.dim(), b.dim(), "add: shape mismatch");
                a + b
            },
            Op::Add(self.id, other.id),
        )
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.binary(
            other,
            |a, b| {
                assert_eq!(a.dim(), b.dim(), "sub: shape mismatch");
                a - b
            },
            Op::Sub(self.id, other.id),
        )
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.binary(
            other,
            |a, b| {
                assert_eq!(a.dim(), b.dim(), "mul: shape mismatch");
                a * b
            },
            Op::Mul(self.id, other.id),
        )
    }

    /// Adds a `1×n` row to every row.
    pub fn add_row(self, row: Var<'g>) -> Var<'g> {
        self.binary(
            row,
            |a, r| {
                assert_eq!(r.nrows(), 1, "add_row expects a row vector");
                a + r
            },
            Op::AddRow(self.id, row.id),
        )
    }

    /// Multiplies every row elementwise by a `1×n` row.
    pub fn mul_row(self, row: Var<'g>) -> Var<'g> {
        self.binary(
            row,
            |a, r| {
                assert_eq!(r.nrows(), 1, "mul_row expects a row vector");
                a * r
            },
            Op::MulRow(self.id, row.id),
        )
    }

    /// Repeats a `1×n` row `n_rows` times.
    pub fn broadcast_rows(self, n_rows: usize) -> Var<'g> {
        self.unary(
            |r| {
                assert_eq!(r.nrows(), 1, "broadcast_rows expects a row vector");
                r.broadcast((n_rows, r.ncols())).unwrap().to_owned()
            },
            Op::BroadcastRows(self.id),
        )
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(|a| a * c, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(|a| a + c, Op::Offset(self.id))
    }

    /// Adds a constant matrix (no gradient flows into it).
    pub fn add_const(self, m: &Mat) -> Var<'g> {
        self.unary(
            |a| {
                assert_eq!(a.dim(), m.dim(), "add_const: shape mismatch");
                a + m
            },
            Op::Offset(self.id),
        )
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(|a| a.mapv(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(|a| a.mapv(f64::ln), Op::Log(self.id))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(|a| a.mapv(f64::tanh), Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(|a| a.mapv(sigmoid), Op::Sigmoid(self.id))
    }

    /// `x · sigmoid(x)`
    pub fn swish(self) -> Var<'g> {
        self.unary(|a| a.mapv(|x| x * sigmoid(x)), Op::Swish(self.id))
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|a| a.mapv(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(|a| a.mapv(f64::abs), Op::Abs(self.id))
    }

    pub fn square(self) -> Var<'g> {
        self.mul(self)
    }

    pub fn softmax_rows(self) -> Var<'g> {
        self.unary(softmax_rows, Op::SoftmaxRows(self.id))
    }

    pub fn log_softmax_rows(self) -> Var<'g> {
        self.unary(log_softmax_rows, Op::LogSoftmaxRows(self.id))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(self, eps: f64) -> Var<'g> {
        let (y, inv_std) = self.graph.with(self.id, |a| {
            let mut y = a.clone();
            let mut inv_std = Vec::with_capacity(a.nrows());
            let n = a.ncols() as f64;
            for mut row in y.rows_mut() {
                let mean = row.sum() / n;
                row.mapv_inplace(|v| v - mean);
                let var = row.iter().map(|v| v * v).sum::<f64>() / n;
                let k = 1.0 / (var + eps).sqrt();
                row.mapv_inplace(|v| v * k);
                inv_std.push(k);
            }
            (y, inv_std)
        });
        self.graph.push(y, Op::LayerNorm { x: self.id, inv_std })
    }

    pub fn sum(self) -> Var<'g> {
        self.unary(
            |a| Array2::from_elem((1, 1), a.sum()),
            Op::SumAll(self.id),
        )
    }

    pub fn mean(self) -> Var<'g> {
        let (r, c) = self.shape();
        self.sum().scale(1.0 / (r * c) as f64)
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Var<'g> {
        self.unary(
            |a| {
                assert!(start + len <= a.nrows(), "slice_rows out of range");
                a.slice(s![start..start + len, ..]).to_owned()
            },
            Op::SliceRows(self.id, start),
        )
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'g> {
        self.unary(
            |a| {
                assert!(start + len <= a.ncols(), "slice_cols out of range");
                a.slice(s![.., start..start + len]).to_owned()
            },
            Op::SliceCols(self.id, start),
        )
    }

    /// Output row `i` is input row `idx[i]`; indices may repeat.
    pub fn gather_rows(self, idx: &[usize]) -> Var<'g> {
        let idx = idx.to_vec();
        let v = self.graph.with(self.id, |a| {
            let mut out = Array2::zeros((idx.len(), a.ncols()));
            for (i, &src) in idx.iter().enumerate() {
                out.row_mut(i).assign(&a.row(src));
            }
            out
        });
        self.graph.push(v, Op::GatherRows(self.id, idx))
    }

    /// Sliding windows along rows: output row `o` is the concatenation of
    /// input rows `o·stride − pad .. o·stride − pad + kernel` (zeros outside).
    pub fn unfold_rows(self, kernel: usize, stride: usize, pad: usize) -> Var<'g> {
        let v = self.graph.with(self.id, |a| {
            let (t, c) = a.dim();
            assert!(t + 2 * pad >= kernel, "unfold_rows: input shorter than kernel");
            let n_out = (t + 2 * pad - kernel) / stride + 1;
            let mut out = Array2::zeros((n_out, kernel * c));
            for o in 0..n_out {
                for k in 0..kernel {
                    let src = (o * stride + k) as isize - pad as isize;
                    if src < 0 || src as usize >= t {
                        continue;
                    }
                    out.slice_mut(s![o, k * c..(k + 1) * c])
                        .assign(&a.row(src as usize));
                }
            }
            out
        });
        self.graph.push(
            v,
            Op::Unfold {
                x: self.id,
                kernel,
                stride,
                pad,
            },
        )
    }

    /// Per-channel convolution along rows with `K×C` kernel `w`, stride 1.
    pub fn depthwise_conv(self, w: Var<'g>, pad: usize) -> Var<'g> {
        let v = self.graph.with2(self.id, w.id, |x, w| {
            let (t, c) = x.dim();
            assert_eq!(w.ncols(), c, "depthwise_conv: channel mismatch");
            let mut out: Mat = Array2::zeros((t, c));
            for o in 0..t {
                let mut orow = out.row_mut(o);
                for k in 0..w.nrows() {
                    let src = (o + k) as isize - pad as isize;
                    if src < 0 || src as usize >= t {
                        continue;
                    }
                    Zip::from(&mut orow)
                        .and(&x.row(src as usize))
                        .and(&w.row(k))
                        .for_each(|o, &x, &w| *o += x * w);
                }
            }
            out
        });
        self.graph.push(
            v,
            Op::DepthwiseConv {
                x: self.id,
                w: w.id,
                pad,
            },
        )
    }

    /// Row-major reshape.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'g> {
        self.unary(
            |a| {
                a.as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((rows, cols))
                    .expect("reshape: element count mismatch")
            },
            Op::Reshape(self.id),
        )
    }

    /// Negative log-likelihood of `target` under CTC, reading `self` as
    /// frame-wise log-probabilities with the blank in column `blank`.
    /// Returns `None` when no alignment exists.
    pub fn ctc_loss(self, target: &[usize], blank: usize) -> Option<Var<'g>> {
        let (loss, grad) = self
            .graph
            .with(self.id, |lp| ctc::forward_backward(lp.view(), target, blank))?;
        Some(self.graph.push(
            Array2::from_elem((1, 1), loss),
            Op::Saved { x: self.id, grad },
        ))
    }
}

pub fn softmax_rows(a: &Mat) -> Mat {
    let mut y = a.clone();
    for mut row in y.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    y
}

pub fn log_softmax_rows(a: &Mat) -> Mat {
    let mut y = a.clone();
    for mut row in y.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_values() {
        let g = Graph::new();
        let a = g.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = g.constant(array![[5.0], [6.0]]);
        assert_eq!(a.matmul(b).value(), array![[17.0], [39.0]]);
        assert_eq!(a.matmul_t(a).value(), array![[5.0, 11.0], [11.0, 25.0]]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let g = Graph::new();
        let x = g.constant(Array2::zeros((3, 5)));
        let y = x.softmax_rows().value();
        for v in y.iter() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn unfold_and_gather_shapes() {
        let g = Graph::new();
        let x = g.constant(Array2::from_shape_fn((5, 2), |(i, j)| (i * 2 + j) as f64));
        let u = x.unfold_rows(3, 2, 1);
        assert_eq!(u.shape(), (3, 6));
        let v = u.value();
        assert_eq!(v.row(0).to_vec(), vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
        let r = x.gather_rows(&[4, 0, 0]);
        assert_eq!(r.value().row(1).to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn reshape_is_row_major() {
        let g = Graph::new();
        let x = g.constant(array![[1.0, 2.0, 3.0, 4.0]]);
        assert_eq!(x.reshape(2, 2).value(), array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn parameter_nodes_are_shared() {
        let mut set = ParameterSet::default();
        set.insert("w", array![[2.0]], false);
        let g = Graph::new();
        let a = g.param(&set, "w");
        let b = g.param(&set, "w");
        let y = a.mul(b).sum();
        let grads = g.backward(y).into_named();
        assert_eq!(grads["w"][[0, 0]], 4.0);
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = random(&mut rng, 3, 4);
        let cases: Vec<(&str, Box<dyn for<'g> Fn(Var<'g>) -> Var<'g>>)> = vec![
            ("tanh", Box::new(|x| x.tanh())),
            ("sigmoid", Box::new(|x| x.sigmoid())),
            ("swish", Box::new(|x| x.swish())),
            ("exp", Box::new(|x| x.exp())),
            ("log", Box::new(|x| x.square().add_scalar(0.5).ln())),
            ("softmax", Box::new(|x| x.softmax_rows())),
            ("log_softmax", Box::new(|x| x.log_softmax_rows())),
            ("layer_norm", Box::new(|x| x.layer_norm(1e-5))),
            ("transpose", Box::new(|x| x.t().matmul(x))),
            ("unfold", Box::new(|x| x.unfold_rows(3, 2, 1))),
            ("gather", Box::new(|x| x.gather_rows(&[2, 0, 2, 1]))),
            ("reshape", Box::new(|x| x.reshape(6, 2).square())),
            ("slices", Box::new(|x| {
                let a = x.slice_cols(1, 2);
                let b = x.slice_rows(0, 3).slice_cols(0, 2);
                x.graph().concat_cols(&[a.mul(b), x])
            })),
            ("rows", Box::new(|x| {
                let r = x.slice_rows(1, 1);
                x.mul_row(r).add_row(r.tanh())
            })),
            ("broadcast", Box::new(|x| x.slice_rows(2, 1).broadcast_rows(4))),
            ("depthwise", Box::new(|x| {
                let w = x.slice_rows(0, 3).tanh();
                x.depthwise_conv(w, 1)
            })),
            ("abs", Box::new(|x| x.abs())),
        ];
        for (name, f) in cases {
            let g = Graph::new();
            let x = g.constant(x0.clone());
            let out = f(x);
            let w = Array2::from_shape_fn(out.shape(), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 1.7);
            let root = out.mul(g.constant(w.clone())).sum();
            let analytic = g.backward(root).get_or_zeros(x);
            let h = 1e-6;
            for i in 0..x0.nrows() {
                for j in 0..x0.ncols() {
                    let eval = |delta: f64| {
                        let mut xp = x0.clone();
                        xp[[i, j]] += delta;
                        let g = Graph::new();
                        let out = f(g.constant(xp));
                        (out.value() * &w).sum()
                    };
                    let num = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = analytic[[i, j]];
                    assert!(
                        (a - num).abs() <= 1e-6 * (1.0 + num.abs()),
                        "{name}: grad mismatch at ({i},{j}): analytic {a} numeric {num}"
                    );
                }
            }
        }
    }
}
