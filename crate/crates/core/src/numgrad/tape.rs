//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes once in reverse insertion order, which is a valid reverse
//! topological order because a node can only reference earlier nodes.

use crate::error::{Error, Result};

use super::counter::{OpCounter, Stage};
use super::tensor::{matmul_raw, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Clamp floor for bases raised to a learned power.
pub const POW_BASE_FLOOR: f64 = 1e-8;
/// Below this norm, `l2norm` and `normalize` report a zero gradient.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax { x: Var, tau: f64 },
    StraightThrough(Var),
    Min(Var, Var),
    Pow { base: Var, exp: Var },
    L2Norm(Var),
    Normalize(Var),
    NormalizeRows(Var),
    SumAll(Var),
    SumRows(Var),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    Sinusoidal { q: Var, freqs: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    counter: OpCounter,
    stage: Stage,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the differentiated output with respect to `v`; all zeros
    /// when `v` did not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn same_or_scalar(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.len() == b.len() || a.len() == 1 || b.len() == 1 {
        Ok(())
    } else {
        Err(Error::Dimension(format!("{what}: shapes {:?} and {:?}", a.shape(), b.shape())))
    }
}

fn broadcast_shape(a: &Tensor, b: &Tensor) -> Vec<usize> {
    if a.len() >= b.len() {
        a.shape().to_vec()
    } else {
        b.shape().to_vec()
    }
}

fn zip_broadcast(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| f(a[if a.len() == 1 { 0 } else { i }], b[if b.len() == 1 { 0 } else { i }]))
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), counter: OpCounter::default(), stage: Stage::Other }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counter(&self) -> &OpCounter {
        &self.counter
    }

    pub fn counter_mut(&mut self) -> &mut OpCounter {
        &mut self.counter
    }

    /// Attribute subsequent op counts to `stage`; returns the previous stage.
    pub fn set_stage(&mut self, stage: Stage) -> Stage {
        std::mem::replace(&mut self.stage, stage)
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], macs: u64) -> Var {
        self.counter.add(self.stage, macs);
        let needs_grad = self.needs(inputs);
        self.push_raw(value, op, needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_or_scalar(va, vb, "add")?;
        let value = Tensor::new(broadcast_shape(va, vb), zip_broadcast(va.data(), vb.data(), |x, y| x + y))?;
        let n = value.len() as u64;
        Ok(self.push(value, Op::Add(a, b), &[a, b], n))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_or_scalar(va, vb, "sub")?;
        let value = Tensor::new(broadcast_shape(va, vb), zip_broadcast(va.data(), vb.data(), |x, y| x - y))?;
        let n = value.len() as u64;
        Ok(self.push(value, Op::Sub(a, b), &[a, b], n))
    }

    /// Elementwise product; either side may be a single element.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_or_scalar(va, vb, "mul")?;
        let value = Tensor::new(broadcast_shape(va, vb), zip_broadcast(va.data(), vb.data(), |x, y| x * y))?;
        let n = value.len() as u64;
        Ok(self.push(value, Op::Mul(a, b), &[a, b], n))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect()).unwrap();
        let n = value.len() as u64;
        self.push(value, Op::Scale(a, c), &[a], n)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x + c).collect()).unwrap();
        let n = value.len() as u64;
        self.push(value, Op::AddConst(a), &[a], n)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.dims2();
        let (k2, n) = vb.dims2();
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dims {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let value = Tensor::matrix(m, n, matmul_raw(va.data(), vb.data(), m, k, n))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b], (m * k * n) as u64))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a], 0)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a], 0))
    }

    /// Row-wise `softmax(x / tau)` with max subtraction.
    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("softmax temperature must be > 0, got {tau}")));
        }
        let vx = self.value(x);
        let (r, c) = vx.dims2();
        if c == 0 {
            return Err(Error::EmptyInput("softmax over zero entries".into()));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(&vx.data()[i * c..(i + 1) * c], tau, &mut out[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { x, tau }, &[x], (2 * r * c) as u64))
    }

    /// Forward value is the row-wise one-hot argmax of `soft` (lowest index on
    /// ties); the backward pass routes gradients straight into `soft`.
    pub fn straight_through(&mut self, soft: Var) -> Var {
        let vs = self.value(soft);
        let (r, c) = vs.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            out[i * c + argmax(&vs.data()[i * c..(i + 1) * c])] = 1.0;
        }
        let value = Tensor::new(vs.shape().to_vec(), out).unwrap();
        self.push(value, Op::StraightThrough(soft), &[soft], (r * c) as u64)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(Error::Dimension(format!("min: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let value = Tensor::new(va.shape().to_vec(), zip_broadcast(va.data(), vb.data(), f64::min))?;
        let n = value.len() as u64;
        Ok(self.push(value, Op::Min(a, b), &[a, b], n))
    }

    /// `max(base, 1e-8) ^ exp` elementwise, `exp` a single element.
    pub fn pow(&mut self, base: Var, exp: Var) -> Result<Var> {
        let (vb, ve) = (self.value(base), self.value(exp));
        if ve.len() != 1 {
            return Err(Error::Dimension("pow exponent must be a single element".into()));
        }
        let e = ve.item();
        let data = vb.data().iter().map(|b| b.max(POW_BASE_FLOOR).powf(e)).collect();
        let value = Tensor::new(vb.shape().to_vec(), data)?;
        let n = value.len() as u64;
        Ok(self.push(value, Op::Pow { base, exp }, &[base, exp], n))
    }

    /// Euclidean norm of the whole tensor.
    pub fn l2norm(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let value = Tensor::scalar(va.norm());
        let n = va.len() as u64;
        self.push(value, Op::L2Norm(a), &[a], n)
    }

    /// `a / ||a||`; the zero tensor maps to itself.
    pub fn normalize(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let nrm = va.norm();
        let data = if nrm > NORM_EPS {
            va.data().iter().map(|x| x / nrm).collect()
        } else {
            vec![0.0; va.len()]
        };
        let value = Tensor::new(va.shape().to_vec(), data).unwrap();
        let n = 2 * value.len() as u64;
        self.push(value, Op::Normalize(a), &[a], n)
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (r, c) = va.dims2();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(c.max(1)).take(r) {
            let nrm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nrm > NORM_EPS {
                row.iter_mut().for_each(|x| *x /= nrm);
            } else {
                row.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let value = Tensor::new(va.shape().to_vec(), out).unwrap();
        let n = 2 * value.len() as u64;
        self.push(value, Op::NormalizeRows(a), &[a], n)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let value = Tensor::scalar(va.data().iter().sum());
        let n = va.len() as u64;
        self.push(value, Op::SumAll(a), &[a], n)
    }

    /// Column sums: `[r x c] -> [1 x c]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (r, c) = va.dims2();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&va.data()[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        let value = Tensor::matrix(1, c, out).unwrap();
        self.push(value, Op::SumRows(a), &[a], (r * c) as u64)
    }

    /// Stack rows of same-width inputs.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_rows of nothing".into()));
        }
        let c = self.value(parts[0]).dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.value(p).dims2();
            if pc != c {
                return Err(Error::Dimension(format!("concat_rows width {pc} vs {c}")));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let value = Tensor::matrix(rows, c, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts, 0))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.dims2();
        if start > end || end > c {
            return Err(Error::Dimension(format!("slice {start}..{end} of {c} columns")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&vx.data()[i * c + start..i * c + end]);
        }
        let value = Tensor::matrix(r, w, data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x], 0))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols of nothing".into()));
        }
        let r = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).dims2().1).collect();
        if parts.iter().any(|&p| self.value(p).dims2().0 != r) {
            return Err(Error::Dimension("concat_cols row mismatch".into()));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::matrix(r, total, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts, 0))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect()).unwrap();
        let n = value.len() as u64;
        self.push(value, op, &[a], n)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    /// `sqrt(max(x, 0))`; zero gradient where the result is below 1e-12.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0).sqrt(), Op::Sqrt(a))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let (r, c) = vx.dims2();
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &vx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(vx.shape().to_vec(), out).unwrap();
        self.push(value, Op::LayerNormRows { x, inv_std }, &[x], (4 * r * c) as u64)
    }

    /// Sinusoidal encoding of each entry of `q`: `[r] -> [r x channels]` with
    /// `sin` on even and `cos` on odd channels.
    pub fn sinusoidal(&mut self, q: Var, channels: usize, base: f64) -> Result<Var> {
        if channels % 2 != 0 {
            return Err(Error::Parameter(format!("encoding channels must be even, got {channels}")));
        }
        let freqs = sinusoid_freqs(channels, base);
        let vq = self.value(q);
        let r = vq.len();
        let mut data = Vec::with_capacity(r * channels);
        for &qv in vq.data() {
            for &w in &freqs {
                data.push((qv * w).sin());
                data.push((qv * w).cos());
            }
        }
        let value = Tensor::matrix(r, channels, data)?;
        Ok(self.push(value, Op::Sinusoidal { q, freqs }, &[q], (r * channels) as u64))
    }

    /// Mean softmax cross-entropy of `[b x m]` logits against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (b, m) = vl.dims2();
        if labels.len() != b {
            return Err(Error::Dimension(format!("{} labels for {b} rows", labels.len())));
        }
        if b == 0 {
            return Err(Error::EmptyInput("cross entropy over empty batch".into()));
        }
        let mut total = 0.0;
        let mut probs = vec![0.0; b * m];
        for (i, &y) in labels.iter().enumerate() {
            if y >= m {
                return Err(Error::Index(format!("label {y} with {m} classes")));
            }
            let row = &vl.data()[i * m..(i + 1) * m];
            let target = row[y];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            // log(sum_j exp(l_j - l_y)); log1p keeps relative precision when the
            // target dominates.
            let loss = if mx == target {
                let rest: f64 = row.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, l)| (l - target).exp()).sum();
                rest.ln_1p()
            } else {
                let lse = mx + row.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
                lse - target
            };
            total += loss;
            softmax_row(row, 1.0, &mut probs[i * m..(i + 1) * m]);
        }
        let value = Tensor::scalar(total / b as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
            (3 * b * m) as u64,
        ))
    }

    /// Reverse pass from a single-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Dimension("backward needs a single-element output".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let target_len = self.nodes[v.0].value.len();
        let contrib = if contrib.len() != target_len && target_len == 1 {
            vec![contrib.iter().sum()]
        } else {
            contrib
        };
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.accumulate(grads, *a, zip_broadcast(g, vb, |x, y| x * y));
                self.accumulate(grads, *b, zip_broadcast(g, va, |x, y| x * y));
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.iter().map(|x| x * c).collect()),
            Op::AddConst(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                self.accumulate(grads, *a, g.to_vec())
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = ta.dims2();
                let n = tb.dims2().1;
                if self.nodes[a.0].needs_grad {
                    // dA = G B^T
                    let bt = tb.transpose();
                    self.accumulate(grads, *a, matmul_raw(g, bt.data(), m, n, k));
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T G
                    let at = ta.transpose();
                    self.accumulate(grads, *b, matmul_raw(at.data(), g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = node.value.dims2();
                let gt = Tensor::matrix(r, c, g.to_vec()).unwrap().transpose();
                self.accumulate(grads, *a, gt.into_data());
            }
            Op::Softmax { x, tau } => {
                let (r, c) = node.value.dims2();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = y[j] * (gi[j] - dot) / tau;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Min(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = (0..g.len()).map(|i| if va[i] <= vb[i] { g[i] } else { 0.0 }).collect();
                let gb = (0..g.len()).map(|i| if va[i] <= vb[i] { 0.0 } else { g[i] }).collect();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Pow { base, exp } => {
                let vb = val(*base);
                let e = val(*exp)[0];
                let gb = (0..g.len())
                    .map(|i| if vb[i] > POW_BASE_FLOOR { g[i] * e * vb[i].powf(e - 1.0) } else { 0.0 })
                    .collect();
                let ge: f64 = (0..g.len()).map(|i| g[i] * out[i] * vb[i].max(POW_BASE_FLOOR).ln()).sum();
                self.accumulate(grads, *base, gb);
                self.accumulate(grads, *exp, vec![ge]);
            }
            Op::L2Norm(a) => {
                let nrm = out[0];
                let ga = if nrm > NORM_EPS {
                    val(*a).iter().map(|x| g[0] * x / nrm).collect()
                } else {
                    vec![0.0; val(*a).len()]
                };
                self.accumulate(grads, *a, ga);
            }
            Op::Normalize(a) => {
                let nrm = Tensor::vector(val(*a).to_vec()).norm();
                let ga = normalize_backward(out, g, nrm);
                self.accumulate(grads, *a, ga);
            }
            Op::NormalizeRows(a) => {
                let (r, c) = node.value.dims2();
                let va = val(*a);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let s = i * c..(i + 1) * c;
                    let nrm = va[s.clone()].iter().map(|x| x * x).sum::<f64>().sqrt();
                    ga[s.clone()].copy_from_slice(&normalize_backward(&out[s.clone()], &g[s], nrm));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => self.accumulate(grads, *a, vec![g[0]; val(*a).len()]),
            Op::SumRows(a) => {
                let (r, _) = self.nodes[a.0].value.dims2();
                let ga = (0..r).flat_map(|_| g.iter().copied()).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    self.accumulate(grads, p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.nodes[x.0].value.dims2();
                let w = node.value.dims2().1;
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2();
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.dims2().1;
                    let gp = (0..r).flat_map(|i| g[i * total + off..i * total + off + w].iter().copied()).collect();
                    self.accumulate(grads, p, gp);
                    off += w;
                }
            }
            Op::Sin(a) => {
                let ga = val(*a).iter().zip(g).map(|(x, gi)| gi * x.cos()).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Cos(a) => {
                let ga = val(*a).iter().zip(g).map(|(x, gi)| -gi * x.sin()).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let ga = out.iter().zip(g).map(|(y, gi)| if *y > NORM_EPS { gi * 0.5 / y } else { 0.0 }).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Clamp { x, lo, hi } => {
                let gx = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(v, gi)| if *v >= *lo && *v <= *hi { *gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNormRows { x, inv_std } => {
                let (r, c) = node.value.dims2();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let mean_g = gi.iter().sum::<f64>() / c as f64;
                    let mean_gy = gi.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[i * c + j] = inv_std[i] * (gi[j] - mean_g - y[j] * mean_gy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sinusoidal { q, freqs } => {
                let vq = val(*q);
                let c = 2 * freqs.len();
                let gq = vq
                    .iter()
                    .enumerate()
                    .map(|(r, &qv)| {
                        freqs
                            .iter()
                            .enumerate()
                            .map(|(i, &w)| {
                                g[r * c + 2 * i] * w * (qv * w).cos() - g[r * c + 2 * i + 1] * w * (qv * w).sin()
                            })
                            .sum()
                    })
                    .collect();
                self.accumulate(grads, *q, gq);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let m = probs.len() / b;
                let mut gl = vec![0.0; b * m];
                for (i, &y) in labels.iter().enumerate() {
                    let p = &probs[i * m..(i + 1) * m];
                    let others: f64 = p.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, v)| v).sum();
                    for j in 0..m {
                        let d = if j == y { -others } else { p[j] };
                        gl[i * m + j] = g[0] * d / b as f64;
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
        }
    }
}

fn normalize_backward(y: &[f64], g: &[f64], nrm: f64) -> Vec<f64> {
    if nrm <= NORM_EPS {
        return vec![0.0; y.len()];
    }
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    y.iter().zip(g).map(|(yi, gi)| (gi - yi * dot) / nrm).collect()
}

/// `softmax(x / tau)` into `out`, with max subtraction.
pub fn softmax_row(x: &[f64], tau: f64, out: &mut [f64]) {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = ((v - mx) / tau).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Angular frequencies `base^(-2i/channels)` for `i in 0..channels/2`.
pub fn sinusoid_freqs(channels: usize, base: f64) -> Vec<f64> {
    (0..channels / 2).map(|i| base.powf(-((2 * i) as f64) / channels as f64)).collect()
}
