//! Reverse-mode differentiation over a linear record of primitive operations.
//!
//! Every value produced under a [`Tape`] lives in the tape and is addressed by a
//! [`Var`] handle. Leaves created with [`Tape::leaf`] participate in
//! differentiation; [`Tape::constant`] values do not. [`Tape::backward`] walks
//! the record once in reverse and leaves `d(loss)/d(leaf)` on every leaf.
//!
//! The tape also counts multiply-accumulates issued by `matmul` and `conv2d`,
//! which is what the cost analyzer compares its static count against.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    fn idx(self) -> usize {
        self.idx as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary(Elementwise, Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Resize(Var),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
    SpaceToDepth(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-writer record of executed operations. One tape per thread.
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    id: u32,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    macs: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates issued so far by `matmul` and `conv2d`.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.index(v).expect("var from this tape")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient accumulated on a leaf by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let i = self.index(v).ok()?;
        let g = self.grads.get(i)?.as_ref()?;
        Some(Tensor::new(self.nodes[i].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx() >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.idx())
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.idx()].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn checked(&self, vars: &[Var]) -> Result<()> {
        for &v in vars {
            self.index(v)?;
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        self.checked(&[a, b])?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "elementwise",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let f: fn(T, T) -> T = match kind {
            Elementwise::Add => |x, y| x + y,
            Elementwise::Sub => |x, y| x - y,
            Elementwise::Mul => |x, y| x * y,
        };
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("elementwise", out, Op::Binary(kind, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.checked(&[a])?;
        let out = self.value(a).map(|v| v * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.checked(&[a])?;
        let out = self.value(a).map(|v| v + s);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.checked(&[a])?;
        let out = self.value(a).map(kernels::gelu);
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.checked(&[a])?;
        let out = self.value(a).map(kernels::sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.checked(&[a, b])?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::shape(
                "matmul",
                format!("expected matrices, got {:?} and {:?}", ta.shape(), tb.shape()),
            ));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents {k} vs {k2}")));
        }
        let out = Tensor::new([m, n], kernels::matmul(ta.data(), tb.data(), m, k, n))?;
        self.macs += (m * k * n) as u64;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.checked(&[a])?;
        let ta = self.value(a);
        let &[r, c] = ta.shape() else {
            return Err(Error::shape("transpose", format!("expected matrix, got {:?}", ta.shape())));
        };
        let out = Tensor::new([c, r], kernels::transpose(ta.data(), r, c))?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    /// `x[N×C] + b[C]` on every row.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.checked(&[x, b])?;
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.channels();
        if tb.len() != c {
            return Err(Error::shape("add_row_bias", format!("bias {:?} vs channels {c}", tb.shape())));
        }
        let data = tx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(&v, &bb)| v + bb))
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_row_bias", out, Op::AddRowBias(x, b), &[x, b])
    }

    /// Row `i` of `x[N×C]` multiplied by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        self.checked(&[x, s])?;
        let (tx, ts) = (self.value(x), self.value(s));
        let c = tx.channels();
        if ts.len() * c != tx.len() {
            return Err(Error::shape("scale_rows", format!("{:?} vs {:?}", tx.shape(), ts.shape())));
        }
        let data = tx
            .data()
            .chunks(c)
            .zip(ts.data())
            .flat_map(|(row, &sv)| row.iter().map(move |&v| v * sv))
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("scale_rows", out, Op::ScaleRows(x, s), &[x, s])
    }

    /// Column `j` of `x[N×C]` multiplied by `s[j]`.
    pub fn scale_cols(&mut self, x: Var, s: Var) -> Result<Var> {
        self.checked(&[x, s])?;
        let (tx, ts) = (self.value(x), self.value(s));
        let c = tx.channels();
        if ts.len() != c {
            return Err(Error::shape("scale_cols", format!("{:?} vs {:?}", tx.shape(), ts.shape())));
        }
        let data = tx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(ts.data()).map(|(&v, &sv)| v * sv))
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("scale_cols", out, Op::ScaleCols(x, s), &[x, s])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.checked(&[a])?;
        let out = self.value(a).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    // ---- spatial -----------------------------------------------------

    /// Cross-correlation of `x[H×W×Cin]` with `w[kh×kw×(Cin/g)×Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        self.checked(&[x, w])?;
        if let Some(b) = b {
            self.checked(&[b])?;
        }
        let (tx, tw) = (self.value(x), self.value(w));
        let (&[h, wd, cin], &[kh, kw, cig, cout]) = (tx.shape(), tw.shape()) else {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, weight {:?}", tx.shape(), tw.shape()),
            ));
        };
        if groups == 0 || stride == 0 || cin % groups != 0 || cout % groups != 0 || cig != cin / groups {
            return Err(Error::shape(
                "conv2d",
                format!("channels cin={cin} cout={cout} weight-cin={cig} groups={groups}"),
            ));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{wd}")));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::shape("conv2d", format!("bias {:?} vs cout {cout}", self.value(b).shape())));
            }
        }
        let geom = ConvGeom {
            h,
            w: wd,
            cin,
            kh,
            kw,
            cout,
            stride,
            padding,
            groups,
        };
        let bias = b.map(|b| self.value(b).data());
        let data = kernels::conv2d(tx.data(), tw.data(), bias, &geom);
        let out = Tensor::new([geom.out_h(), geom.out_w(), cout], data)?;
        self.macs += geom.macs();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", out, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Non-overlapping `k×k` mean pooling.
    pub fn avgpool(&mut self, x: Var, k: usize) -> Result<Var> {
        self.checked(&[x])?;
        let tx = self.value(x);
        let &[h, w, c] = tx.shape() else {
            return Err(Error::shape("avgpool", format!("expected HxWxC, got {:?}", tx.shape())));
        };
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape("avgpool", format!("{h}x{w} not divisible by window {k}")));
        }
        let out = Tensor::new([h / k, w / k, c], kernels::avgpool(tx.data(), h, w, c, k))?;
        self.push("avgpool", out, Op::AvgPool { x, k }, &[x])
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.checked(&[x])?;
        let tx = self.value(x);
        let &[h, w, c] = tx.shape() else {
            return Err(Error::shape("bilinear_resize", format!("expected HxWxC, got {:?}", tx.shape())));
        };
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize", format!("output extent {out_h}x{out_w}")));
        }
        let data = kernels::bilinear_resize(tx.data(), h, w, c, out_h, out_w);
        let out = Tensor::new([out_h, out_w, c], data)?;
        self.push("bilinear_resize", out, Op::Resize(x), &[x])
    }

    /// `H×W×C → H/2×W/2×4C` neighbourhood concatenation.
    pub fn space_to_depth(&mut self, x: Var) -> Result<Var> {
        self.checked(&[x])?;
        let tx = self.value(x);
        let &[h, w, c] = tx.shape() else {
            return Err(Error::shape("space_to_depth", format!("expected HxWxC, got {:?}", tx.shape())));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("space_to_depth", format!("odd extent {h}x{w}")));
        }
        let out = Tensor::new([h / 2, w / 2, 4 * c], kernels::space_to_depth(tx.data(), h, w, c))?;
        self.push("space_to_depth", out, Op::SpaceToDepth(x), &[x])
    }

    // ---- normalization / attention -----------------------------------

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.checked(&[x, gamma, beta])?;
        let tx = self.value(x);
        let c = tx.channels();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                "layernorm",
                format!("affine {:?}/{:?} vs channels {c}", self.value(gamma).shape(), self.value(beta).shape()),
            ));
        }
        let (y, xhat, rstd) = kernels::layernorm(tx.data(), self.value(gamma).data(), self.value(beta).data(), c, eps);
        let out = Tensor::new(tx.shape().to_vec(), y)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push("layernorm", out, op, &[x, gamma, beta])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.checked(&[x])?;
        let tx = self.value(x);
        if !tx.all_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let out = Tensor::new(tx.shape().to_vec(), kernels::softmax(tx.data(), tx.channels()))?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    // ---- token bookkeeping -------------------------------------------

    /// Rows of `x[N×C]` picked by `index` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        self.checked(&[x])?;
        let tx = self.value(x);
        let c = tx.channels();
        let n = tx.len() / c;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::OutOfRange { index: bad, len: n });
        }
        if index.is_empty() {
            return Err(Error::shape("gather_rows", "empty index"));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            data.extend_from_slice(&tx.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::new([index.len(), c], data)?;
        self.push("gather_rows", out, Op::GatherRows { x, index }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.checked(parts)?;
        let c = self.value(parts[0]).channels();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.channels() != c {
                return Err(Error::shape("concat_rows", format!("channels {} vs {c}", t.channels())));
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new([data.len() / c, c], data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Columns `start..start+len` of `x[N×C]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.checked(&[x])?;
        let tx = self.value(x);
        let c = tx.channels();
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}..{} of {c}", start + len)));
        }
        let data = tx.data().chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let out = Tensor::new([tx.len() / c, len], data)?;
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.checked(parts)?;
        let rows = self.value(parts[0]).len() / self.value(parts[0]).channels();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).channels()).collect();
        for &p in parts {
            let t = self.value(p);
            if t.len() / t.channels() != rows {
                return Err(Error::shape("concat_cols", format!("row count {} vs {rows}", t.len() / t.channels())));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new([rows, total], data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// `x[N×C] → [1×C]` mean over rows.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.checked(&[x])?;
        let tx = self.value(x);
        let c = tx.channels();
        let n = tx.len() / c;
        let inv = T::one() / T::from_usize(n).expect("rows");
        let mut acc = vec![T::zero(); c];
        for row in tx.data().chunks(c) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
        let out = Tensor::new([1, c], acc.into_iter().map(|v| v * inv).collect())?;
        self.push("mean_rows", out, Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.checked(&[x])?;
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.checked(&[x])?;
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / T::from_usize(t.len()).expect("len"));
        self.push("mean", out, Op::Mean(x), &[x])
    }

    /// `-log softmax(logits)[label]` for one sample.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        self.checked(&[logits])?;
        let t = self.value(logits);
        let k = t.len();
        if label >= k {
            return Err(Error::OutOfRange { index: label, len: k });
        }
        let m = t.data().iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + t.data().iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        let probs = t.data().iter().map(|&v| (v - lse).exp()).collect();
        let out = Tensor::scalar(lse - t.data()[label]);
        self.push("cross_entropy", out, Op::CrossEntropy { logits, label, probs }, &[logits])
    }

    // ---- backward ----------------------------------------------------

    /// Propagates `d(loss)/d(·)` to every leaf created with [`Tape::leaf`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.index(loss)?;
        if !self.nodes[li].value.is_scalar() {
            return Err(Error::NotScalar(self.nodes[li].value.shape().to_vec()));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);

        for i in (0..=li).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            backward_node(nodes, node, &g, &mut grads);
        }
        for (g, node) in grads.iter_mut().zip(nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }
}

/// Lazily zero-initialised gradient slot for a node that needs one.
fn slot<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    let i = v.idx();
    if !nodes[i].requires_grad {
        return None;
    }
    Some(grads[i].get_or_insert_with(|| vec![T::zero(); nodes[i].value.len()]))
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, g: impl Iterator<Item = T>) {
    if let Some(s) = slot(nodes, grads, v) {
        for (d, x) in s.iter_mut().zip(g) {
            *d = *d + x;
        }
    }
}

fn backward_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| &nodes[v.idx()].value;
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => match kind {
            Elementwise::Add => {
                accumulate(nodes, grads, *a, g.iter().copied());
                accumulate(nodes, grads, *b, g.iter().copied());
            }
            Elementwise::Sub => {
                accumulate(nodes, grads, *a, g.iter().copied());
                accumulate(nodes, grads, *b, g.iter().map(|&x| -x));
            }
            Elementwise::Mul => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                accumulate(nodes, grads, *a, g.iter().zip(tb).map(|(&x, &y)| x * y));
                accumulate(nodes, grads, *b, g.iter().zip(ta).map(|(&x, &y)| x * y));
            }
        },
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.iter().map(|&x| x * *s)),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.iter().copied()),
        Op::Gelu(a) => {
            let x = val(*a).data();
            accumulate(nodes, grads, *a, g.iter().zip(x).map(|(&d, &v)| d * kernels::gelu_grad(v)));
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            accumulate(nodes, grads, *a, g.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)));
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if let Some(s) = slot(nodes, grads, *a) {
                kernels::matmul_grad_a(g, tb.data(), s, m, k, n);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                kernels::matmul_grad_b(ta.data(), g, s, m, k, n);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
            // g is c×r
            let t = kernels::transpose(g, c, r);
            accumulate(nodes, grads, *a, t.into_iter());
        }
        Op::AddRowBias(x, b) => {
            accumulate(nodes, grads, *x, g.iter().copied());
            let c = val(*b).len();
            if let Some(s) = slot(nodes, grads, *b) {
                for row in g.chunks(c) {
                    for (d, &v) in s.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
            }
        }
        Op::ScaleRows(x, sv) => {
            let c = val(*x).channels();
            let (tx, ts) = (val(*x).data(), val(*sv).data());
            if let Some(s) = slot(nodes, grads, *x) {
                for (i, (d, &gv)) in s.iter_mut().zip(g).enumerate() {
                    *d = *d + gv * ts[i / c];
                }
            }
            if let Some(s) = slot(nodes, grads, *sv) {
                for (r, (grow, xrow)) in g.chunks(c).zip(tx.chunks(c)).enumerate() {
                    s[r] = s[r] + grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>();
                }
            }
        }
        Op::ScaleCols(x, sv) => {
            let c = val(*x).channels();
            let (tx, ts) = (val(*x).data(), val(*sv).data());
            if let Some(s) = slot(nodes, grads, *x) {
                for (i, (d, &gv)) in s.iter_mut().zip(g).enumerate() {
                    *d = *d + gv * ts[i % c];
                }
            }
            if let Some(s) = slot(nodes, grads, *sv) {
                for (grow, xrow) in g.chunks(c).zip(tx.chunks(c)) {
                    for ((d, &a), &b) in s.iter_mut().zip(grow).zip(xrow) {
                        *d = *d + a * b;
                    }
                }
            }
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.iter().copied()),
        Op::Conv2d { x, w, b, geom } => {
            let (tx, tw) = (val(*x).data(), val(*w).data());
            let mut dx = nodes[x.idx()].requires_grad.then(|| vec![T::zero(); tx.len()]);
            let mut dw = nodes[w.idx()].requires_grad.then(|| vec![T::zero(); tw.len()]);
            let mut db = b
                .filter(|b| nodes[b.idx()].requires_grad)
                .map(|_| vec![T::zero(); geom.cout]);
            kernels::conv2d_backward(tx, tw, g, geom, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
            if let Some(d) = dx {
                accumulate(nodes, grads, *x, d.into_iter());
            }
            if let Some(d) = dw {
                accumulate(nodes, grads, *w, d.into_iter());
            }
            if let (Some(b), Some(d)) = (b, db) {
                accumulate(nodes, grads, *b, d.into_iter());
            }
        }
        Op::AvgPool { x, k } => {
            let s = val(*x).shape();
            let (h, w, c) = (s[0], s[1], s[2]);
            if let Some(d) = slot(nodes, grads, *x) {
                kernels::avgpool_backward(g, d, h, w, c, *k);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = val(*x).channels();
            let gm = val(*gamma).data();
            let mut dx = nodes[x.idx()].requires_grad.then(|| vec![T::zero(); xhat.len()]);
            let mut dg = nodes[gamma.idx()].requires_grad.then(|| vec![T::zero(); c]);
            let mut dbt = nodes[beta.idx()].requires_grad.then(|| vec![T::zero(); c]);
            kernels::layernorm_backward(g, xhat, rstd, gm, c, dx.as_deref_mut(), dg.as_deref_mut(), dbt.as_deref_mut());
            if let Some(d) = dx {
                accumulate(nodes, grads, *x, d.into_iter());
            }
            if let Some(d) = dg {
                accumulate(nodes, grads, *gamma, d.into_iter());
            }
            if let Some(d) = dbt {
                accumulate(nodes, grads, *beta, d.into_iter());
            }
        }
        Op::Softmax(x) => {
            let n = node.value.channels();
            if let Some(d) = slot(nodes, grads, *x) {
                kernels::softmax_backward(node.value.data(), g, d, n);
            }
        }
        Op::Resize(x) => {
            let s = val(*x).shape();
            let (h, w, c) = (s[0], s[1], s[2]);
            let (oh, ow) = (node.value.shape()[0], node.value.shape()[1]);
            if let Some(d) = slot(nodes, grads, *x) {
                kernels::bilinear_resize_backward(g, d, h, w, c, oh, ow);
            }
        }
        Op::SpaceToDepth(x) => {
            let s = val(*x).shape();
            let (h, w, c) = (s[0], s[1], s[2]);
            if let Some(d) = slot(nodes, grads, *x) {
                kernels::space_to_depth_backward(g, d, h, w, c);
            }
        }
        Op::GatherRows { x, index } => {
            let c = val(*x).channels();
            if let Some(d) = slot(nodes, grads, *x) {
                for (r, &src) in index.iter().enumerate() {
                    for k in 0..c {
                        d[src * c + k] = d[src * c + k] + g[r * c + k];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = val(p).len();
                accumulate(nodes, grads, p, g[off..off + len].iter().copied());
                off += len;
            }
        }
        Op::SliceCols { x, start } => {
            let c = val(*x).channels();
            let len = node.value.channels();
            if let Some(d) = slot(nodes, grads, *x) {
                for (r, grow) in g.chunks(len).enumerate() {
                    for (k, &v) in grow.iter().enumerate() {
                        let i = r * c + start + k;
                        d[i] = d[i] + v;
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.channels();
            let mut off = 0;
            for &p in parts {
                let w = val(p).channels();
                let it = g.chunks(total).flat_map(|row| row[off..off + w].iter().copied());
                accumulate(nodes, grads, p, it);
                off += w;
            }
        }
        Op::MeanRows(x) => {
            let c = val(*x).channels();
            let n = val(*x).len() / c;
            let inv = T::one() / T::from_usize(n).expect("rows");
            accumulate(nodes, grads, *x, (0..n * c).map(|i| g[i % c] * inv));
        }
        Op::Sum(x) => {
            let n = val(*x).len();
            accumulate(nodes, grads, *x, std::iter::repeat_n(g[0], n));
        }
        Op::Mean(x) => {
            let n = val(*x).len();
            let v = g[0] / T::from_usize(n).expect("len");
            accumulate(nodes, grads, *x, std::iter::repeat_n(v, n));
        }
        Op::CrossEntropy { logits, label, probs } => {
            let it = probs
                .iter()
                .enumerate()
                .map(|(k, &p)| g[0] * if k == *label { p - T::one() } else { p });
            accumulate(nodes, grads, *logits, it);
        }
    }
}
