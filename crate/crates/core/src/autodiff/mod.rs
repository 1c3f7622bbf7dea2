//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every node created during a forward pass. Nodes are
//! appended after their operands, so index order is a topological order and
//! [`Graph::backward`] is a single reverse sweep that touches each node once.
//! Gradients persist only on leaves; calling `backward` twice accumulates,
//! which makes the gradient of a sum equal the sum of the gradients.
//!
//! ```
//! use spike_saliency::autodiff::Graph;
//! use spike_saliency::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let w = g.variable(Tensor::new(&[2], vec![3.0, -1.0]).unwrap());
//! let x = g.constant(Tensor::new(&[2], vec![0.5, 2.0]).unwrap());
//! let y = g.mul(w, x).unwrap();
//! let loss = g.sum_all(y);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(w).unwrap(), &[0.5, 2.0]);
//! ```

pub mod gradcheck;
mod higher;
pub(crate) mod kernels;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_out_dim, Tensor};
use kernels::{AxisInterp, ConvGeom};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateKind {
    RectangularWindow,
    Arctan,
}

/// Pseudo-derivative used in place of the Heaviside step during backward.
///
/// The forward pass is always the exact step. `width` is the half-width of
/// the rectangular window, or the scale of the arctan bump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    pub width: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self {
            kind: SurrogateKind::RectangularWindow,
            width: 0.5,
        }
    }
}

impl SurrogateSpec {
    pub fn new(kind: SurrogateKind, width: f64) -> Result<Self> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::Param(format!("surrogate width must be positive, got {width}")));
        }
        Ok(Self { kind, width })
    }

    /// Pseudo-derivative at `delta = u - threshold`. Both variants integrate to 1.
    pub fn derivative(&self, delta: f64) -> f64 {
        match self.kind {
            SurrogateKind::RectangularWindow => {
                if delta.abs() < self.width {
                    1.0 / (2.0 * self.width)
                } else {
                    0.0
                }
            }
            SurrogateKind::Arctan => {
                let z = delta / self.width;
                1.0 / (std::f64::consts::PI * self.width * (1.0 + z * z))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Log(Var),
    Sqrt(Var),
    Exp(Var),
    Heaviside {
        input: Var,
        threshold: f64,
        spec: SurrogateSpec,
    },
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    SumLast(Var),
    BroadcastLast(Var),
    SumAll(Var),
    MeanAll(Var),
    Softmax(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    DwConv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        ry: AxisInterp,
        rx: AxisInterp,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mse(Var, Var),
    Bce {
        pred: Var,
        target: Var,
        eps: f64,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Maximum(..) => "maximum",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Exp(..) => "exp",
            Op::Heaviside { .. } => "heaviside_surrogate",
            Op::AddChannel(..) => "add_channel",
            Op::MulChannel(..) => "mul_channel",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "bmm",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::SumLast(..) => "sum_last",
            Op::BroadcastLast(..) => "broadcast_last",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::Softmax(..) => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::DwConv2d { .. } => "dwconv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Upsample { .. } => "upsample_bilinear",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Mse(..) => "mse",
            Op::Bce { .. } => "bce",
        }
    }

    pub(crate) fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Maximum(a, b)
            | Op::AddChannel(a, b)
            | Op::MulChannel(a, b)
            | Op::MatMul(a, b)
            | Op::BatchMatMul(a, b)
            | Op::Mse(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Exp(a)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::SumLast(a)
            | Op::BroadcastLast(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Softmax(a) => vec![*a],
            Op::Heaviside { input, .. }
            | Op::Narrow { input, .. }
            | Op::MaxPool2d { input, .. }
            | Op::Upsample { input, .. } => vec![*input],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Conv2d {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::ConvTranspose2d { input, weight, .. } | Op::DwConv2d { input, weight, .. } => {
                vec![*input, *weight]
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Bce { pred, target, .. } => vec![*pred, *target],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Owner of one forward pass and its gradients.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_with(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_with(value, Op::Leaf, true)
    }

    /// Same value, cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
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

    /// Accumulated gradient of a leaf, if any flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor, zero when nothing flowed into `v`.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(&shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(name, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise maximum; on ties the gradient goes to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    fn unary(&mut self, v: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(v).map(f);
        self.push(t, op)
    }

    pub fn scale(&mut self, v: Var, s: f64) -> Var {
        self.unary(v, |x| x * s, Op::Scale(v, s))
    }

    pub fn add_scalar(&mut self, v: Var, s: f64) -> Var {
        self.unary(v, |x| x + s, Op::AddScalar(v))
    }

    pub fn neg(&mut self, v: Var) -> Var {
        self.scale(v, -1.0)
    }

    pub fn sigmoid(&mut self, v: Var) -> Var {
        self.unary(v, sigmoid, Op::Sigmoid(v))
    }

    pub fn relu(&mut self, v: Var) -> Var {
        self.unary(v, |x| x.max(0.0), Op::Relu(v))
    }

    pub fn leaky_relu(&mut self, v: Var, slope: f64) -> Var {
        self.unary(v, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(v, slope))
    }

    pub fn log(&mut self, v: Var) -> Var {
        self.unary(v, f64::ln, Op::Log(v))
    }

    pub fn sqrt(&mut self, v: Var) -> Var {
        self.unary(v, f64::sqrt, Op::Sqrt(v))
    }

    pub fn exp(&mut self, v: Var) -> Var {
        self.unary(v, f64::exp, Op::Exp(v))
    }

    /// Exact step `u > threshold` forward, surrogate pseudo-derivative backward.
    pub fn heaviside(&mut self, u: Var, threshold: f64, spec: SurrogateSpec) -> Var {
        self.unary(
            u,
            |x| if x > threshold { 1.0 } else { 0.0 },
            Op::Heaviside {
                input: u,
                threshold,
                spec,
            },
        )
    }

    // ---- channel broadcast -------------------------------------------

    fn channel_dims(&self, name: &'static str, x: Var, v: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(Error::shape(name, format!("input {xs:?} has no channel axis")));
        }
        let c = xs[1];
        if self.shape(v) != [c] {
            return Err(Error::shape(
                name,
                format!("per-channel vector {:?} does not match {c} channels", self.shape(v)),
            ));
        }
        let plane: usize = xs[2..].iter().product();
        Ok((xs[0], c, plane))
    }

    /// `x[n, c, ...] + b[c]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c, plane) = self.channel_dims("add_channel", x, b)?;
        let bv = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += bv[(i / plane) % c];
        }
        Ok(self.push(t, Op::AddChannel(x, b)))
    }

    /// `x[n, c, ...] * s[c]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let (_, c, plane) = self.channel_dims("mul_channel", x, s)?;
        let sv = self.value(s).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v *= sv[(i / plane) % c];
        }
        Ok(self.push(t, Op::MulChannel(x, s)))
    }

    // ---- linear algebra & layout ---------------------------------------

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(&[m, n], data)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// Batched `[b, m, k] · [b, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(bt * m * n);
        for i in 0..bt {
            data.extend(kernels::matmul(
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let t = Tensor::new(&[bt, m, n], data)?;
        Ok(self.push(t, Op::BatchMatMul(a, b)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("{axes:?} is not a permutation of {} axes", shape.len())));
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, axes);
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(t, Op::Permute(x, axes.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "nothing to concatenate"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("part {s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut out = shape;
        out[axis] = len;
        let t = Tensor::new(&out, data)?;
        Ok(self.push(
            t,
            Op::Narrow {
                input: x,
                axis,
                start,
            },
        ))
    }

    /// Entry `t` of the leading axis, with that axis removed.
    pub fn index_first(&mut self, x: Var, t: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = self.narrow(x, 0, t, 1)?;
        self.reshape(n, &shape[1..])
    }

    /// Stack equally shaped nodes along a new leading axis.
    pub fn stack_first(&mut self, parts: &[Var]) -> Result<Var> {
        let mut lifted = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(p));
            lifted.push(self.reshape(p, &s)?);
        }
        self.concat(&lifted, 0)
    }

    /// Sum over the last axis, keeping it with length 1.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let m = *shape.last().ok_or_else(|| Error::shape("sum_last", "scalar input"))?;
        let data = self.value(x).data().chunks(m.max(1)).map(|c| c.iter().sum()).collect();
        let mut out = shape;
        *out.last_mut().unwrap() = 1;
        let t = Tensor::new(&out, data)?;
        Ok(self.push(t, Op::SumLast(x)))
    }

    /// Repeat a length-1 last axis `m` times.
    pub fn broadcast_last(&mut self, x: Var, m: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.last() != Some(&1) {
            return Err(Error::shape("broadcast_last", format!("last axis of {shape:?} is not 1")));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, m))
            .collect();
        let mut out = shape;
        *out.last_mut().unwrap() = m;
        let t = Tensor::new(&out, data)?;
        Ok(self.push(t, Op::BroadcastLast(x)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        self.push(t, Op::MeanAll(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let m = *shape.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(m.max(1)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    // ---- spatial ---------------------------------------------------------

    fn conv_geom(&self, op: &'static str, x: Var, w: Var, stride: usize, padding: usize, depthwise: bool) -> Result<ConvGeom> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 {
            return Err(Error::shape(op, format!("input must be [B,C,H,W], got {xs:?}")));
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape(op, format!("weight must be [C_out,C_in,k,k], got {ws:?}")));
        }
        if stride == 0 {
            return Err(Error::shape(op, "stride must be at least 1"));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let k = ws[2];
        let c_out = if depthwise {
            if ws[0] != c || ws[1] != 1 {
                return Err(Error::shape(
                    op,
                    format!("depthwise weight {ws:?} needs [{c},1,k,k] for {c} input channels"),
                ));
            }
            c
        } else {
            if ws[1] != c {
                return Err(Error::shape(
                    op,
                    format!("C_in mismatch: input has {c} channels, weight expects {}", ws[1]),
                ));
            }
            ws[0]
        };
        let oh = conv_out_dim(h, k, stride, padding)
            .ok_or_else(|| Error::shape(op, format!("H={h} too small for kernel {k} with padding {padding}")))?;
        let ow = conv_out_dim(wd, k, stride, padding)
            .ok_or_else(|| Error::shape(op, format!("W={wd} too small for kernel {k} with padding {padding}")))?;
        Ok(ConvGeom {
            n,
            c_in: c,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad: padding,
            oh,
            ow,
        })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.conv_geom("conv2d", x, w, stride, padding, false)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} does not match C_out={}", self.shape(b), geom.c_out),
                ));
            }
        }
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let t = Tensor::new(&[geom.n, geom.c_out, geom.oh, geom.ow], data)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input: x,
                weight: w,
                bias,
                geom,
            },
        ))
    }

    /// Adjoint of [`Graph::conv2d`] with respect to its input: maps a
    /// `[B, C_out, H', W']` tensor back to `[B, C_in, out_h, out_w]`.
    pub fn conv_transpose2d(&mut self, g: Var, w: Var, stride: usize, padding: usize, out_hw: (usize, usize)) -> Result<Var> {
        let (gs, ws) = (self.shape(g).to_vec(), self.shape(w).to_vec());
        if gs.len() != 4 || ws.len() != 4 || gs[1] != ws[0] {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input {gs:?} incompatible with weight {ws:?}"),
            ));
        }
        let k = ws[2];
        let (oh, ow) = (
            conv_out_dim(out_hw.0, k, stride, padding),
            conv_out_dim(out_hw.1, k, stride, padding),
        );
        if oh != Some(gs[2]) || ow != Some(gs[3]) {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("output size {out_hw:?} does not convolve back to {:?}", &gs[2..]),
            ));
        }
        let geom = ConvGeom {
            n: gs[0],
            c_in: ws[1],
            h: out_hw.0,
            w: out_hw.1,
            c_out: ws[0],
            k,
            stride,
            pad: padding,
            oh: gs[2],
            ow: gs[3],
        };
        let data = kernels::conv2d_backward_input(self.value(g).data(), self.value(w).data(), &geom);
        let t = Tensor::new(&[geom.n, geom.c_in, geom.h, geom.w], data)?;
        Ok(self.push(t, Op::ConvTranspose2d { input: g, weight: w, geom }))
    }

    /// Depthwise convolution with a `[C, 1, k, k]` weight; channels never mix.
    pub fn dwconv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.conv_geom("dwconv2d", x, w, stride, padding, true)?;
        let data = kernels::dwconv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let t = Tensor::new(&[geom.n, geom.c_out, geom.oh, geom.ow], data)?;
        Ok(self.push(t, Op::DwConv2d { input: x, weight: w, geom }))
    }

    /// Non-overlapping `size×size` max pooling; needs spatial dims divisible by `size`.
    pub fn maxpool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || size == 0 || s[2] % size != 0 || s[3] % size != 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!("spatial dims of {s:?} must be divisible by {size}"),
            ));
        }
        let (data, argmax) = kernels::maxpool2d_forward(self.value(x).data(), s[0] * s[1], s[2], s[3], size);
        let t = Tensor::new(&[s[0], s[1], s[2] / size, s[3] / size], data)?;
        Ok(self.push(t, Op::MaxPool2d { input: x, argmax }))
    }

    /// Bilinear resize with half-pixel centres.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::shape("upsample_bilinear", format!("cannot resize {s:?} to {out_h}x{out_w}")));
        }
        let ry = kernels::axis_interp(s[2], out_h);
        let rx = kernels::axis_interp(s[3], out_w);
        let data = kernels::upsample_forward(self.value(x).data(), s[0] * s[1], (s[2], s[3]), &ry, &rx);
        let t = Tensor::new(&[s[0], s[1], out_h, out_w], data)?;
        Ok(self.push(t, Op::Upsample { input: x, ry, rx }))
    }

    /// Training-mode batch normalisation over `(N, H, W)` per channel.
    ///
    /// Returns the normalised output plus the batch mean and biased variance
    /// so the caller can update running statistics.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, plane) = self.channel_dims("batchnorm2d", x, gamma)?;
        self.channel_dims("batchnorm2d", x, beta)?;
        let xv = self.value(x).data();
        let (mean, var) = kernels::channel_moments(xv, n, c, plane);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xv.len());
        for (i, &v) in xv.iter().enumerate() {
            let ch = (i / plane) % c;
            xhat.push((v - mean[ch]) * inv_std[ch]);
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let ch = (i / plane) % c;
                gv[ch] * h + bv[ch]
            })
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        let out = self.push(
            t,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((out, mean, var))
    }

    // ---- losses ----------------------------------------------------------

    /// Mean squared error, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse", self.value(a), self.value(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let m = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / va.numel() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mse(a, b)))
    }

    /// Mean binary cross-entropy of probabilities `pred` against `target`.
    /// Predictions are clamped into `[eps, 1 - eps]`.
    pub fn bce(&mut self, pred: Var, target: Var, eps: f64) -> Result<Var> {
        same_shape("bce", self.value(pred), self.value(target))?;
        let (vp, vt) = (self.value(pred), self.value(target));
        let n = vp.numel() as f64;
        let s: f64 = vp
            .data()
            .iter()
            .zip(vt.data())
            .map(|(&p, &t)| {
                let p = clamp_prob(p, eps);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Bce { pred, target, eps }))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulate d`root`/d`leaf` into every gradient-tracking leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got {:?}", self.shape(root)),
            ));
        }
        if !self.requires_grad(root) {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        pending[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(gy) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&gy).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(gy),
                }
                continue;
            }
            self.propagate(i, &gy, &mut pending);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut pending[v.0] {
                Some(a) => a.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let zip = |a: &[f64], f: &dyn Fn(usize, f64) -> f64| -> Vec<f64> {
            a.iter().enumerate().map(|(j, &g)| f(j, g)).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gy.to_vec());
                acc(*b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.to_vec());
                acc(*b, gy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, zip(gy, &|j, g| g * vb[j]));
                acc(*b, zip(gy, &|j, g| g * va[j]));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, zip(gy, &|j, g| g / vb[j]));
                acc(*b, zip(gy, &|j, g| -g * va[j] / (vb[j] * vb[j])));
            }
            Op::Maximum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, zip(gy, &|j, g| if va[j] >= vb[j] { g } else { 0.0 }));
                acc(*b, zip(gy, &|j, g| if va[j] >= vb[j] { 0.0 } else { g }));
            }
            Op::Scale(a, s) => acc(*a, gy.iter().map(|g| g * s).collect()),
            Op::AddScalar(a) => acc(*a, gy.to_vec()),
            Op::Sigmoid(a) => acc(*a, zip(gy, &|j, g| g * y[j] * (1.0 - y[j]))),
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, zip(gy, &|j, g| if va[j] > 0.0 { g } else { 0.0 }));
            }
            Op::LeakyRelu(a, slope) => {
                let va = val(*a);
                acc(*a, zip(gy, &|j, g| if va[j] > 0.0 { g } else { g * slope }));
            }
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, zip(gy, &|j, g| g / va[j]));
            }
            Op::Sqrt(a) => acc(*a, zip(gy, &|j, g| g / (2.0 * y[j]))),
            Op::Exp(a) => acc(*a, zip(gy, &|j, g| g * y[j])),
            Op::Heaviside { input, threshold, spec } => {
                let vu = val(*input);
                acc(*input, zip(gy, &|j, g| g * spec.derivative(vu[j] - threshold)));
            }
            Op::AddChannel(x, b) => {
                let s = self.nodes[x.0].value.shape();
                let (c, plane) = (s[1], s[2..].iter().product::<usize>());
                let mut db = vec![0.0; c];
                for (j, g) in gy.iter().enumerate() {
                    db[(j / plane) % c] += g;
                }
                acc(*x, gy.to_vec());
                acc(*b, db);
            }
            Op::MulChannel(x, s) => {
                let shape = self.nodes[x.0].value.shape();
                let (c, plane) = (shape[1], shape[2..].iter().product::<usize>());
                let (vx, vs) = (val(*x), val(*s));
                let mut ds = vec![0.0; c];
                for (j, g) in gy.iter().enumerate() {
                    ds[(j / plane) % c] += g * vx[j];
                }
                acc(*x, zip(gy, &|j, g| g * vs[(j / plane) % c]));
                acc(*s, ds);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc(*a, kernels::matmul_nt(gy, val(*b), m, n, k));
                acc(*b, kernels::matmul_tn(val(*a), gy, m, k, n));
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (val(*a), val(*b));
                let mut da = Vec::with_capacity(bt * m * k);
                let mut db = Vec::with_capacity(bt * k * n);
                for i in 0..bt {
                    let g = &gy[i * m * n..(i + 1) * m * n];
                    da.extend(kernels::matmul_nt(g, &vb[i * k * n..(i + 1) * k * n], m, n, k));
                    db.extend(kernels::matmul_tn(&va[i * m * k..(i + 1) * m * k], g, m, k, n));
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (data, _) = permute_data(gy, node.value.shape(), &inverse);
                acc(*x, data);
            }
            Op::Reshape(x) => acc(*x, gy.to_vec()),
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        let base = o * shape[*axis] * inner + offset;
                        d.extend_from_slice(&gy[base..base + len]);
                    }
                    offset += len;
                    acc(*p, d);
                }
            }
            Op::Narrow { input, axis, start } => {
                let in_shape = self.nodes[input.0].value.shape();
                let len = node.value.shape()[*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let mut d = vec![0.0; self.nodes[input.0].value.numel()];
                for o in 0..outer {
                    let dst = (o * in_shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gy[src..src + len * inner]);
                }
                acc(*input, d);
            }
            Op::SumLast(x) => {
                let m = *self.nodes[x.0].value.shape().last().unwrap();
                acc(*x, gy.iter().flat_map(|&g| std::iter::repeat_n(g, m)).collect());
            }
            Op::BroadcastLast(x) => {
                let m = *node.value.shape().last().unwrap();
                acc(*x, gy.chunks(m.max(1)).map(|c| c.iter().sum()).collect());
            }
            Op::SumAll(x) => acc(*x, vec![gy[0]; self.nodes[x.0].value.numel()]),
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.numel();
                acc(*x, vec![gy[0] / n as f64; n]);
            }
            Op::Softmax(x) => {
                let m = *node.value.shape().last().unwrap();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(m).zip(gy.chunks(m)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(yv, g)| yv * (g - dot)));
                }
                acc(*x, d);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                if self.nodes[input.0].requires_grad {
                    acc(*input, kernels::conv2d_backward_input(gy, val(*weight), geom));
                }
                if self.nodes[weight.0].requires_grad {
                    acc(*weight, kernels::conv2d_backward_weight(val(*input), gy, geom));
                }
                if let Some(b) = bias {
                    acc(*b, kernels::conv2d_backward_bias(gy, geom));
                }
            }
            Op::ConvTranspose2d { input, weight, geom } => {
                if self.nodes[input.0].requires_grad {
                    acc(*input, kernels::conv2d_forward(gy, val(*weight), None, geom));
                }
                if self.nodes[weight.0].requires_grad {
                    acc(*weight, kernels::conv2d_backward_weight(gy, val(*input), geom));
                }
            }
            Op::DwConv2d { input, weight, geom } => {
                let (dx, dw) = kernels::dwconv2d_backward(val(*input), val(*weight), gy, geom);
                acc(*input, dx);
                acc(*weight, dw);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut d = vec![0.0; self.nodes[input.0].value.numel()];
                for (g, &a) in gy.iter().zip(argmax) {
                    d[a] += g;
                }
                acc(*input, d);
            }
            Op::Upsample { input, ry, rx } => {
                let s = self.nodes[input.0].value.shape();
                acc(*input, kernels::upsample_backward(gy, s[0] * s[1], (s[2], s[3]), ry, rx));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = self.nodes[input.0].value.shape();
                let (n, c, plane) = (s[0], s[1], s[2..].iter().product::<usize>());
                let m = (n * plane) as f64;
                let gv = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (j, g) in gy.iter().enumerate() {
                    let ch = (j / plane) % c;
                    dgamma[ch] += g * xhat[j];
                    dbeta[ch] += g;
                }
                // dx = γ·inv_std/m · (m·dy − Σdy − x̂·Σ(dy·x̂))
                let dx = zip(gy, &|j, g| {
                    let ch = (j / plane) % c;
                    gv[ch] * inv_std[ch] / m * (m * g - dbeta[ch] - xhat[j] * dgamma[ch])
                });
                acc(*input, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let scale = 2.0 * gy[0] / va.len() as f64;
                let d: Vec<f64> = va.iter().zip(vb).map(|(x, t)| scale * (x - t)).collect();
                acc(*b, d.iter().map(|v| -v).collect());
                acc(*a, d);
            }
            Op::Bce { pred, target, eps } => {
                let (vp, vt) = (val(*pred), val(*target));
                let scale = gy[0] / vp.len() as f64;
                let dp = vp
                    .iter()
                    .zip(vt)
                    .map(|(&p, &t)| {
                        if p < *eps || p > 1.0 - eps {
                            0.0
                        } else {
                            scale * ((1.0 - t) / (1.0 - p) - t / p)
                        }
                    })
                    .collect();
                let dt = vp
                    .iter()
                    .map(|&p| {
                        let p = clamp_prob(p, *eps);
                        -scale * (p.ln() - (1.0 - p).ln())
                    })
                    .collect();
                acc(*pred, dp);
                acc(*target, dt);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64, eps: f64) -> f64 {
    if p.is_nan() {
        0.5
    } else {
        p.clamp(eps, 1.0 - eps)
    }
}
