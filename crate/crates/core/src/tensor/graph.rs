//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and [`Graph::backward`] is a single reverse sweep.

use super::conv::{self, ConvGeometry};
use super::gemm::gemm;
use super::{axis_split, matmul_dims, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeometry },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    LogSoftmax(Var, usize),
    Reshape(Var),
    Concat(Var, Var, usize),
    Narrow(Var, usize, usize),
    Pick(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`. Leaves created with [`Graph::leaf`] always have an
    /// entry, exactly zero when they did not participate in the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip_map: shapes checked by caller")
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let t = Tensor::new(&[m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::for_conv2d(self.shape(x), self.shape(w), stride, pad)?;
        let out = conv::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let t = Tensor::new(&geom.output_shape(), out)?;
        self.push("conv2d", t, Op::Conv2d { x, w, geom }, &[x, w])
    }

    /// Transposed convolution with kernel `in_channels × out_channels × kh × kw`;
    /// output extent is `(h − 1)·stride − 2·pad + kh`.
    pub fn conv2d_transposed(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::for_transposed(self.shape(x), self.shape(w), stride, pad)?;
        let out = conv::conv2d_input_grad(self.value(x).data(), self.value(w).data(), &geom);
        let t = Tensor::new(&geom.input_shape(), out)?;
        self.push("conv2d_transposed", t, Op::ConvTranspose2d { x, w, geom }, &[x, w])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let t = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let t = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let t = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * factor);
        self.push("scale", t, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x + c);
        self.push("add_scalar", t, Op::AddScalar(a), &[a])
    }

    /// `a (m×n) + b (n)`, broadcasting `b` over rows.
    pub fn add_row_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb != [sa[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let n = sa[1];
        let bias = self.value(b).data();
        let mut t = self.value(a).clone();
        for row in t.data_mut().chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        self.push("add_row_bias", t, Op::AddRowBias(a, b), &[a, b])
    }

    /// `a (n×c×h×w) + b (c)`, one bias per channel.
    pub fn add_channel_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 4 || sb != [sa[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (c, hw) = (sa[1], sa[2] * sa[3]);
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(a).clone();
        for (i, plane) in t.data_mut().chunks_mut(hw).enumerate() {
            let bv = bias[i % c];
            plane.iter_mut().for_each(|v| *v += bv);
        }
        self.push("add_channel_bias", t, Op::AddChannelBias(a, b), &[a, b])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::tanh);
        self.push("tanh", t, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push("relu", t, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { alpha * x });
        self.push("leaky_relu", t, Op::LeakyRelu(a, alpha), &[a])
    }

    /// `ln(1 + eˣ)`, evaluated without overflow. `−ln σ(x) = softplus(−x)`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(softplus);
        self.push("softplus", t, Op::Softplus(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", t, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        self.push("mean", t, Op::Mean(a), &[a])
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &src[(o * len + k) * inner..][..inner];
                for (d, &s) in out[o * inner..][..inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let t = Tensor::new(&new_shape, out)?;
        self.push("sum_axis", t, Op::SumAxis(a, axis), &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|k| (src[at(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..len {
                    out[at(k)] = src[at(k)] - lse;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        self.push("log_softmax", t, Op::LogSoftmax(a, axis), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "concat",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != sb.len() {
            return Err(mismatch());
        }
        let (outer, la, inner) = axis_split(&sa, axis)?;
        let lb = sb[axis];
        if sa.iter().zip(&sb).enumerate().any(|(i, (x, y))| i != axis && x != y) {
            return Err(mismatch());
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            out.extend_from_slice(&da[o * la * inner..(o + 1) * la * inner]);
            out.extend_from_slice(&db[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = sa.clone();
        shape[axis] = la + lb;
        let t = Tensor::new(&shape, out)?;
        self.push("concat", t, Op::Concat(a, b, axis), &[a, b])
    }

    /// Entries `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, full, inner) = axis_split(&shape, axis)?;
        if len == 0 || start + len > full {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                bound: full,
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let t = Tensor::new(&new_shape, out)?;
        self.push("narrow", t, Op::Narrow(a, axis, start), &[a])
    }

    /// Row-wise gather from an `m×k` matrix: `out[i] = a[i, index[i]]`.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != index.len() {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                lhs: s,
                rhs: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= s[1]) {
            return Err(TensorError::IndexOutOfRange {
                index: bad,
                bound: s[1],
            });
        }
        let src = self.value(a).data();
        let out = index.iter().enumerate().map(|(r, &c)| src[r * s[1] + c]).collect();
        let t = Tensor::new(&[s[0]], out)?;
        self.push("pick", t, Op::Pick(a, index.to_vec()), &[a])
    }

    /// Exact reverse-mode gradients of the scalar `loss` with respect to all
    /// nodes that require them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(t.data()) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(t),
            }
        };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, 0.0);
                    acc(*a, Tensor::new(&[m, k], da)?);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, 0.0);
                    acc(*b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::Conv2d { x, w, geom } => {
                if wants(*x) {
                    let dx = conv::conv2d_input_grad(g.data(), self.value(*w).data(), geom);
                    acc(*x, Tensor::new(&geom.input_shape(), dx)?);
                }
                if wants(*w) {
                    let dw = conv::conv2d_weight_grad(self.value(*x).data(), g.data(), geom);
                    acc(*w, Tensor::new(self.shape(*w), dw)?);
                }
            }
            Op::ConvTranspose2d { x, w, geom } => {
                if wants(*x) {
                    let dx = conv::conv2d_forward(g.data(), self.value(*w).data(), geom);
                    acc(*x, Tensor::new(&geom.output_shape(), dx)?);
                }
                if wants(*w) {
                    let dw = conv::conv2d_weight_grad(g.data(), self.value(*x).data(), geom);
                    acc(*w, Tensor::new(self.shape(*w), dw)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    acc(*a, zip_map(g, bv, |x, y| x * y));
                }
                if wants(*b) {
                    acc(*b, zip_map(g, av, |x, y| x * y));
                }
            }
            Op::Scale(a, f) => acc(*a, g.map(|v| v * f)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::AddRowBias(a, b) => {
                let n = self.shape(*b)[0];
                if wants(*b) {
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(*b, Tensor::new(&[n], db)?);
                }
                acc(*a, g.clone());
            }
            Op::AddChannelBias(a, b) => {
                let s = self.shape(*a);
                let (c, hw) = (s[1], s[2] * s[3]);
                if wants(*b) {
                    let mut db = vec![0.0; c];
                    for (i, plane) in g.data().chunks(hw).enumerate() {
                        db[i % c] += plane.iter().sum::<f64>();
                    }
                    acc(*b, Tensor::new(&[c], db)?);
                }
                acc(*a, g.clone());
            }
            Op::Tanh(a) => acc(*a, zip_map(g, &node.value, |gv, y| gv * (1.0 - y * y))),
            Op::Relu(a) => {
                acc(*a, zip_map(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }))
            }
            Op::LeakyRelu(a, alpha) => acc(
                *a,
                zip_map(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { alpha * gv }),
            ),
            Op::Softplus(a) => acc(*a, zip_map(g, self.value(*a), |gv, x| gv * sigmoid(x))),
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a), g.item())),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, Tensor::full(self.shape(*a), g.item() / n))
            }
            Op::SumAxis(a, axis) => {
                let shape = self.shape(*a);
                let (outer, len, inner) = axis_split(shape, *axis)?;
                let mut out = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        out[(o * len + k) * inner..][..inner]
                            .copy_from_slice(&g.data()[o * inner..][..inner]);
                    }
                }
                acc(*a, Tensor::new(shape, out)?);
            }
            Op::LogSoftmax(a, axis) => {
                let shape = self.shape(*a);
                let (outer, len, inner) = axis_split(shape, *axis)?;
                let y = node.value.data();
                let mut out = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let gsum: f64 = (0..len).map(|k| g.data()[at(k)]).sum();
                        for k in 0..len {
                            out[at(k)] = g.data()[at(k)] - y[at(k)].exp() * gsum;
                        }
                    }
                }
                acc(*a, Tensor::new(shape, out)?);
            }
            Op::Reshape(a) => acc(*a, g.clone().reshape(self.shape(*a))?),
            Op::Concat(a, b, axis) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (outer, la, inner) = axis_split(sa, *axis)?;
                let lb = sb[*axis];
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for o in 0..outer {
                    let base = o * (la + lb) * inner;
                    ga.extend_from_slice(&g.data()[base..base + la * inner]);
                    gb.extend_from_slice(&g.data()[base + la * inner..base + (la + lb) * inner]);
                }
                acc(*a, Tensor::new(sa, ga)?);
                acc(*b, Tensor::new(sb, gb)?);
            }
            Op::Narrow(a, axis, start) => {
                let shape = self.shape(*a);
                let (outer, full, inner) = axis_split(shape, *axis)?;
                let len = node.value.shape()[*axis];
                let mut out = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    out[(o * full + start) * inner..][..len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
                }
                acc(*a, Tensor::new(shape, out)?);
            }
            Op::Pick(a, index) => {
                let shape = self.shape(*a);
                let k = shape[1];
                let mut out = vec![0.0; shape[0] * k];
                for (r, &c) in index.iter().enumerate() {
                    out[r * k + c] = g.data()[r];
                }
                acc(*a, Tensor::new(shape, out)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn diagonal_scaling() {
        let mut g = Graph::new();
        let d = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]));
        let v = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let p = g.matmul(d, v).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn pointwise_constants() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.tanh(x).unwrap();
        assert_eq!(g.value(y).item(), 0.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 1.0);

        let a = g.constant(Tensor::scalar(-1.0));
        let l = g.leaky_relu(a, 0.2).unwrap();
        assert!((g.value(l).item() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let ls = g.log_softmax(x, 0).unwrap();
        for v in g.value(ls).data() {
            assert!((v + 3f64.ln()).abs() < 1e-15);
        }
        let y = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let m = g.mean(y).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
        assert!(matches!(
            g.log_softmax(y, 1),
            Err(TensorError::AxisOutOfRange { axis: 1, rank: 1 })
        ));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2, 3], 0.5));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2], 3.0));
        let unused = g.leaf(Tensor::full(&[4], 7.0));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[4]));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(f64::MAX));
        assert!(matches!(g.scale(x, 10.0), Err(TensorError::NonFinite { op: "scale" })));
    }

    #[test]
    fn concat_narrow_round_trip() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(t(&[2, 1], &[5.0, 6.0]));
        let c = g.concat(a, b, 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let n = g.narrow(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(n).data(), &[5.0, 6.0]);
        let s = g.sum(n).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0; 4]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn self_multiplication_accumulates_both_paths() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }
}
