//! Tape-based reverse-mode differentiation over dense f64 tensors.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and `backward` is a single reverse sweep.
//! Gradients accumulate into per-node buffers across repeated `backward`
//! calls until [`Graph::zero_grad`] is called.

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Guard added under the square root of row norms.
pub const NORM_EPS: f64 = 1e-12;
/// BCE inputs are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    RowL2Normalize(Var),
    Softmax(Var),
    Sigmoid(Var),
    Relu(Var),
    Hinge(Var),
    Conv1dSame {
        x: Var,
        w: Var,
        b: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    SquaredNorm(Var),
    Bce {
        pred: Var,
        target: Vec<f64>,
    },
    TopkMean {
        x: Var,
        picked: Vec<usize>,
    },
    GradReverse {
        x: Var,
        lambda: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last `backward` calls, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn v(&self, x: Var) -> &Tensor {
        &self.nodes[x.0].value
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.v(a).dims2();
        let (k2, n) = self.v(b).dims2();
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}×{k} · {k2}×{n}")));
        }
        let (av, bv) = (self.v(a).data(), self.v(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.v(x).dims2();
        let xv = self.v(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(x), &[x]))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (ta, tb) = (self.v(a), self.v(b));
        if ta.shape() == tb.shape() {
            Ok(Broadcast::Same)
        } else if tb.numel() == 1 {
            Ok(Broadcast::Scalar)
        } else if tb.rows() == 1 && tb.numel() == ta.cols() {
            Ok(Broadcast::Row)
        } else {
            Err(Error::shape(op, format!("{:?} with {:?}", ta.shape(), tb.shape())))
        }
    }

    fn binary_broadcast(&mut self, a: Var, b: Var, sign: f64, op: &'static str) -> Result<Var> {
        let kind = self.broadcast_kind(op, a, b)?;
        let (ta, tb) = (self.v(a), self.v(b));
        let c = ta.cols();
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match kind {
                    Broadcast::Same => tb.data()[i],
                    Broadcast::Scalar => tb.data()[0],
                    Broadcast::Row => tb.data()[i % c],
                };
                x + sign * y
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let opk = if sign > 0.0 {
            Op::Add(a, b, kind)
        } else {
            Op::Sub(a, b, kind)
        };
        Ok(self.push(value, opk, &[a, b]))
    }

    /// `a + b`; `b` may also be a scalar or a single row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, 1.0, "add")
    }

    /// `a - b` with the same broadcasting as [`Graph::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, -1.0, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.v(a), self.v(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.v(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).unwrap();
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// `x + c` elementwise for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let t = self.v(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + c).collect()).unwrap();
        self.push(value, Op::Offset(x), &[x])
    }

    /// Concatenates along the last dimension.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((ra, ca), (rb, cb)) = (self.v(a).dims2(), self.v(b).dims2());
        if ra != rb {
            return Err(Error::shape("concat_cols", format!("{ra} rows vs {rb} rows")));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(self.v(a).row(r));
            out.extend_from_slice(self.v(b).row(r));
        }
        Ok(self.push(Tensor::matrix(ra, ca + cb, out)?, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let c = self.v(first).cols();
        let mut out = Vec::new();
        for &p in parts {
            if self.v(p).cols() != c {
                return Err(Error::shape("concat_rows", format!("{} cols vs {c}", self.v(p).cols())));
            }
            out.extend_from_slice(self.v(p).data());
        }
        let rows = out.len() / c;
        Ok(self.push(Tensor::matrix(rows, c, out)?, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// `x_r / sqrt(|x_r|² + NORM_EPS)` per row.
    pub fn row_l2_normalize(&mut self, x: Var) -> Var {
        let t = self.v(x);
        let (r, c) = t.dims2();
        let mut out = t.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let s = (row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(t.shape().to_vec(), out).unwrap();
        self.push(value, Op::RowL2Normalize(x), &[x])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.v(x);
        let (r, c) = t.dims2();
        let mut out = t.data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.v(x);
        let out = t.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).unwrap();
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.v(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.max(0.0)).collect()).unwrap();
        self.push(value, Op::Relu(x), &[x])
    }

    /// `max(0, x)` elementwise; the margin loss form of relu.
    pub fn hinge(&mut self, x: Var) -> Var {
        let t = self.v(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.max(0.0)).collect()).unwrap();
        self.push(value, Op::Hinge(x), &[x])
    }

    /// Kernel-3 temporal convolution with zero padding.
    ///
    /// `x`: T×D, `w`: [d, D, 3], `b`: [d] → T×d, where
    /// `out[t, o] = b[o] + Σ_c Σ_j w[o, c, j] · x[t + j − 1, c]`.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.v(x), self.v(w), self.v(b));
        let (t_len, d_in) = tx.dims2();
        let ws = tw.shape();
        if ws.len() != 3 || ws[1] != d_in || ws[2] != 3 || tb.numel() != ws[0] {
            return Err(Error::shape(
                "conv1d_same",
                format!("x {:?}, w {:?}, b {:?}", tx.shape(), ws, tb.shape()),
            ));
        }
        let d_out = ws[0];
        let (xv, wv, bv) = (tx.data(), tw.data(), tb.data());
        let mut out = vec![0.0; t_len * d_out];
        for t in 0..t_len {
            for o in 0..d_out {
                let mut acc = bv[o];
                for j in 0..3 {
                    let Some(src) = (t + j).checked_sub(1).filter(|&s| s < t_len) else {
                        continue;
                    };
                    let xr = &xv[src * d_in..(src + 1) * d_in];
                    for (c, &xc) in xr.iter().enumerate() {
                        acc += wv[(o * d_in + c) * 3 + j] * xc;
                    }
                }
                out[t * d_out + o] = acc;
            }
        }
        let value = Tensor::matrix(t_len, d_out, out)?;
        Ok(self.push(value, Op::Conv1dSame { x, w, b }, &[x, w, b]))
    }

    /// Multi-head scaled dot-product attention over rows.
    ///
    /// `q`, `k`, `v` are T×d; head `h` uses columns `h·d/heads .. (h+1)·d/heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.v(q), self.v(k), self.v(v));
        let (t_len, d) = tq.dims2();
        if tk.dims2() != (t_len, d) || tv.dims2() != (t_len, d) {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("d={d} not divisible by heads={heads}"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; heads * t_len * t_len];
        let mut out = vec![0.0; t_len * d];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for t in 0..t_len {
                let p = &mut probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                for (s, ps) in p.iter_mut().enumerate() {
                    *ps = cols.clone().map(|i| qv[t * d + i] * kv[s * d + i]).sum::<f64>() * scale;
                }
                softmax_in_place(p);
                for (s, &ps) in p.iter().enumerate() {
                    for i in cols.clone() {
                        out[t * d + i] += ps * vv[s * d + i];
                    }
                }
            }
        }
        let value = Tensor::matrix(t_len, d, out)?;
        Ok(self.push(value, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Mean over axis 0 (→ 1×C) or axis 1 (→ R×1) of a matrix.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.v(x);
        let (r, c) = t.dims2();
        let value = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, v) in out.iter_mut().zip(t.row(i)) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= r as f64);
                Tensor::matrix(1, c, out)?
            }
            1 => {
                let out = (0..r).map(|i| t.row(i).iter().sum::<f64>() / c as f64).collect();
                Tensor::matrix(r, 1, out)?
            }
            _ => return Err(Error::shape("mean_axis", format!("axis {axis} on a matrix"))),
        };
        Ok(self.push(value, Op::MeanAxis { x, axis }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.v(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn squared_l2_norm(&mut self, x: Var) -> Var {
        let s = self.v(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SquaredNorm(x), &[x])
    }

    /// Mean binary cross-entropy of probabilities `pred` against `target`.
    pub fn bce(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.v(pred).data();
        if p.len() != target.len() {
            return Err(Error::shape(
                "bce",
                format!("{} predictions, {} targets", p.len(), target.len()),
            ));
        }
        let n = p.len() as f64;
        let loss = p
            .iter()
            .zip(target)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let op = Op::Bce {
            pred,
            target: target.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[pred]))
    }

    /// Mean of the `k` largest entries; ties go to the lower flat index.
    pub fn topk_mean(&mut self, x: Var, k: usize) -> Result<Var> {
        let data = self.v(x).data();
        if k == 0 || k > data.len() {
            return Err(Error::InvalidArgument(format!(
                "top-k with k={k} over {} values",
                data.len()
            )));
        }
        let picked = topk_indices(data, k);
        let mean = picked.iter().map(|&i| data[i]).sum::<f64>() / k as f64;
        Ok(self.push(Tensor::scalar(mean), Op::TopkMean { x, picked }, &[x]))
    }

    /// Identity forward; backward multiplies the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Var {
        let value = self.v(x).clone();
        self.push(value, Op::GradReverse { x, lambda }, &[x])
    }

    // ---- reverse sweep ----------------------------------------------------

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.v(loss);
        if !lt.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", lt.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            propagate(&self.nodes, i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Indices of the `k` largest values, ties broken by lowest index.
pub fn topk_indices(data: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.sort_by(|&a, &b| data[b].total_cmp(&data[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], target: Var, contrib: Vec<f64>) {
    if !nodes[target.0].requires_grad {
        return;
    }
    match &mut grads[target.0] {
        Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
        slot @ None => *slot = Some(contrib),
    }
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &nodes[i].value;
    let mut acc = |v: Var, c: Vec<f64>| accumulate(nodes, grads, v, c);
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2();
            let n = val(*b).cols();
            let (av, bv) = (val(*a).data(), val(*b).data());
            let mut da = vec![0.0; m * k];
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let brow = &bv[p * n..(p + 1) * n];
                    da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    let aip = av[i * k + p];
                    if aip != 0.0 {
                        for (d, &gj) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *d += aip * gj;
                        }
                    }
                }
            }
            acc(*a, da);
            acc(*b, db);
        }
        Op::Transpose(x) => {
            let (m, n) = val(*x).dims2();
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    dx[i * n + j] = g[j * m + i];
                }
            }
            acc(*x, dx);
        }
        Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
            let sign = if matches!(nodes[i].op, Op::Add(..)) { 1.0 } else { -1.0 };
            acc(*a, g.to_vec());
            let db = match kind {
                Broadcast::Same => g.iter().map(|x| sign * x).collect(),
                Broadcast::Scalar => vec![sign * g.iter().sum::<f64>()],
                Broadcast::Row => {
                    let c = out.cols();
                    let mut db = vec![0.0; c];
                    for (j, x) in g.iter().enumerate() {
                        db[j % c] += sign * x;
                    }
                    db
                }
            };
            acc(*b, db);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            acc(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
            acc(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
        }
        Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
        Op::Offset(x) => acc(*x, g.to_vec()),
        Op::ConcatCols(a, b) => {
            let ca = val(*a).cols();
            let cb = val(*b).cols();
            let w = ca + cb;
            let rows = out.rows();
            let mut da = Vec::with_capacity(rows * ca);
            let mut db = Vec::with_capacity(rows * cb);
            for r in 0..rows {
                da.extend_from_slice(&g[r * w..r * w + ca]);
                db.extend_from_slice(&g[r * w + ca..(r + 1) * w]);
            }
            acc(*a, da);
            acc(*b, db);
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let n = val(*p).numel();
                acc(*p, g[off..off + n].to_vec());
                off += n;
            }
        }
        Op::RowL2Normalize(x) => {
            let xt = val(*x);
            let (r, c) = xt.dims2();
            let mut dx = vec![0.0; r * c];
            for row in 0..r {
                let xr = xt.row(row);
                let gr = &g[row * c..(row + 1) * c];
                let s2 = xr.iter().map(|v| v * v).sum::<f64>() + NORM_EPS;
                let s = s2.sqrt();
                let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    dx[row * c + j] = gr[j] / s - xr[j] * xg / (s2 * s);
                }
            }
            acc(*x, dx);
        }
        Op::Softmax(x) => {
            let (r, c) = out.dims2();
            let y = out.data();
            let mut dx = vec![0.0; r * c];
            for row in 0..r {
                let ys = &y[row * c..(row + 1) * c];
                let gs = &g[row * c..(row + 1) * c];
                let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    dx[row * c + j] = ys[j] * (gs[j] - dot);
                }
            }
            acc(*x, dx);
        }
        Op::Sigmoid(x) => {
            let y = out.data();
            acc(*x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
        }
        Op::Relu(x) | Op::Hinge(x) => {
            let xv = val(*x).data();
            acc(
                *x,
                g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
            );
        }
        Op::Conv1dSame { x, w, b } => {
            let (xt, wt) = (val(*x), val(*w));
            let (t_len, d_in) = xt.dims2();
            let d_out = wt.shape()[0];
            let (xv, wv) = (xt.data(), wt.data());
            let mut dx = vec![0.0; t_len * d_in];
            let mut dw = vec![0.0; wt.numel()];
            let mut db = vec![0.0; d_out];
            for t in 0..t_len {
                for o in 0..d_out {
                    let go = g[t * d_out + o];
                    db[o] += go;
                    for j in 0..3 {
                        let Some(src) = (t + j).checked_sub(1).filter(|&s| s < t_len) else {
                            continue;
                        };
                        for c in 0..d_in {
                            let wi = (o * d_in + c) * 3 + j;
                            dx[src * d_in + c] += go * wv[wi];
                            dw[wi] += go * xv[src * d_in + c];
                        }
                    }
                }
            }
            acc(*x, dx);
            acc(*w, dw);
            acc(*b, db);
        }
        Op::Attention { q, k, v, heads, probs } => {
            let (t_len, d) = val(*q).dims2();
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qv, kv, vv) = (val(*q).data(), val(*k).data(), val(*v).data());
            let mut dq = vec![0.0; t_len * d];
            let mut dk = vec![0.0; t_len * d];
            let mut dv = vec![0.0; t_len * d];
            let mut dp = vec![0.0; t_len];
            for h in 0..*heads {
                let cols = h * dh..(h + 1) * dh;
                for t in 0..t_len {
                    let p = &probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                    for s in 0..t_len {
                        dp[s] = cols.clone().map(|i| g[t * d + i] * vv[s * d + i]).sum();
                        for i in cols.clone() {
                            dv[s * d + i] += p[s] * g[t * d + i];
                        }
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for s in 0..t_len {
                        let ds = p[s] * (dp[s] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for i in cols.clone() {
                            dq[t * d + i] += ds * kv[s * d + i];
                            dk[s * d + i] += ds * qv[t * d + i];
                        }
                    }
                }
            }
            acc(*q, dq);
            acc(*k, dk);
            acc(*v, dv);
        }
        Op::MeanAxis { x, axis } => {
            let (r, c) = val(*x).dims2();
            let dx = (0..r * c)
                .map(|idx| match axis {
                    0 => g[idx % c] / r as f64,
                    _ => g[idx / c] / c as f64,
                })
                .collect();
            acc(*x, dx);
        }
        Op::Sum(x) => acc(*x, vec![g[0]; val(*x).numel()]),
        Op::SquaredNorm(x) => acc(*x, val(*x).data().iter().map(|v| 2.0 * v * g[0]).collect()),
        Op::Bce { pred, target } => {
            let p = val(*pred).data();
            let n = p.len() as f64;
            let dx = p
                .iter()
                .zip(target)
                .map(|(&p, &y)| {
                    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                        0.0
                    } else {
                        g[0] * (p - y) / (p * (1.0 - p)) / n
                    }
                })
                .collect();
            acc(*pred, dx);
        }
        Op::TopkMean { x, picked } => {
            let mut dx = vec![0.0; val(*x).numel()];
            let share = g[0] / picked.len() as f64;
            for &i in picked {
                dx[i] = share;
            }
            acc(*x, dx);
        }
        Op::GradReverse { x, lambda } => acc(*x, g.iter().map(|v| -lambda * v).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn squared_norm_gradient_is_twice_x() {
        let mut g = Graph::new();
        let x = g.param(t(1, 3, &[1.0, -2.0, 0.25]));
        let s = g.squared_l2_norm(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 0.5]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(t(1, 2, &[1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(t(1, 2, &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 4, &[0.3; 4]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn grad_reverse_scales_by_negative_lambda() {
        let mut g = Graph::new();
        let x = g.param(t(1, 3, &[0.1, 0.2, 0.3]));
        let r = g.grad_reverse(x, 0.2);
        assert_eq!(g.value(r), g.value(x));
        let w = g.constant(t(1, 3, &[1.5, -2.0, 4.0]));
        let y = g.mul(r, w).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[-0.2 * 1.5, -0.2 * -2.0, -0.2 * 4.0]);
    }

    #[test]
    fn topk_routes_to_lowest_index_on_ties() {
        let mut g = Graph::new();
        let x = g.param(t(1, 5, &[0.5, 0.9, 0.5, 0.9, 0.1]));
        let m = g.topk_mean(x, 3).unwrap();
        assert!((g.item(m) - (0.9 + 0.9 + 0.5) / 3.0).abs() < 1e-15);
        g.backward(m).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(g.grad(x).unwrap(), &[third, third, 0.0, third, 0.0]);
        assert!(g.topk_mean(x, 0).is_err());
        assert!(g.topk_mean(x, 6).is_err());
    }

    #[test]
    fn zero_rows_normalize_without_nan() {
        let mut g = Graph::new();
        let x = g.param(t(2, 2, &[0.0, 0.0, 3.0, 4.0]));
        let y = g.row_l2_normalize(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.value(y).all_finite());
        assert!(g.grad(x).unwrap().iter().all(|v| v.is_finite()));
        assert!((g.value(y).get(1, 0) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn bce_clamps_at_boundaries() {
        let mut g = Graph::new();
        let p = g.param(t(1, 1, &[1.0]));
        let l = g.bce(p, &[1.0]).unwrap();
        assert!((g.item(l) - -(1.0f64 - BCE_CLAMP).ln()).abs() < 1e-18);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[0.0]);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.param(t(2, 3, &[0.0; 6]));
        let b = g.param(t(2, 3, &[0.0; 6]));
        assert!(g.matmul(a, b).is_err());
        let c = g.param(t(1, 2, &[0.0; 2]));
        assert!(g.add(a, c).is_err());
        assert!(g.attention(a, a, a, 2).is_err());
    }
}
