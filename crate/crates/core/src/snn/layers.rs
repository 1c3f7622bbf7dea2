//! Parameterised layers shared by the network and the critic.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::energy::conv_ac_count;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::Tensor;

/// How a layer's input is charged in the energy estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    /// Binary spikes: one accumulate per driven synapse.
    Spikes,
    /// Real values: one multiply-accumulate per synapse.
    Real,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Weights uniform in `±1/sqrt(fan_in)`, bias zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), &[c_out, c_in, k, k], bound, rng)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            c_in,
            c_out,
            k,
            stride,
            padding,
        })
    }

    /// Graph-only forward, for callers outside a [`Session`].
    pub fn apply(&self, g: &mut Graph, params: &mut Binder, x: Var) -> Result<Var> {
        let w = params.bind(g, self.weight);
        let b = self.bias.map(|b| params.bind(g, b));
        g.conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn forward(&self, s: &mut Session, x: Var, input: InputKind) -> Result<Var> {
        count_conv(s, &self.name, x, self.c_out, self.k, self.stride, self.padding, input, false);
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Depthwise `k×k` convolution, one filter per channel, no bias.
#[derive(Debug, Clone)]
pub struct DwConv2d {
    pub name: String,
    pub weight: ParamId,
    pub channels: usize,
    pub k: usize,
}

impl DwConv2d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, k: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / ((k * k) as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), &[channels, 1, k, k], bound, rng)?;
        Ok(Self {
            name: name.to_string(),
            weight,
            channels,
            k,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var, input: InputKind) -> Result<Var> {
        let pad = self.k / 2;
        count_conv(s, &self.name, x, self.channels, self.k, 1, pad, input, true);
        let w = s.param(self.weight);
        s.graph.dwconv2d(x, w, 1, pad)
    }
}

#[allow(clippy::too_many_arguments)]
fn count_conv(s: &mut Session, layer: &str, x: Var, c_out: usize, k: usize, stride: usize, pad: usize, input: InputKind, depthwise: bool) {
    if s.op_counts().is_none() {
        return;
    }
    let shape = s.graph.shape(x).to_vec();
    if shape.len() != 4 {
        return;
    }
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let ac = match input {
        InputKind::Spikes => Some(conv_ac_count(
            s.graph.value(x).data(),
            [n, c, h, w],
            if depthwise { 1 } else { c_out },
            k,
            stride,
            pad,
        )),
        InputKind::Real => None,
    };
    let mac = if ac.is_none() && h + 2 * pad >= k && w + 2 * pad >= k {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let fan_in = if depthwise { 1 } else { c };
        (n * c_out * oh * ow * fan_in * k * k) as u64
    } else {
        0
    };
    let counts = s.counts_mut().expect("checked above");
    match ac {
        Some(ac) => counts.add_ac(layer, ac),
        None => counts.add_mac(layer, mac),
    }
}

/// Charge a dense product of `m×k` by `k×n` as multiply-accumulates.
pub(crate) fn count_matmul(s: &mut Session, layer: &str, batches: usize, m: usize, k: usize, n: usize) {
    if let Some(c) = s.counts_mut() {
        c.add_mac(layer, (batches * m * k * n) as u64);
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), ParamKind::Trainable)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Trainable)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), ParamKind::Buffer)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Batch statistics in training mode (and a running-average update),
    /// running statistics otherwise.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        if s.training {
            let shape = s.graph.shape(x).to_vec();
            let count = (shape[0] * shape[2..].iter().product::<usize>()) as f64;
            let (y, mean, var) = s.graph.batchnorm_train(x, gamma, beta, self.eps)?;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = s.buffer_value(self.running_mean);
            let rv = s.buffer_value(self.running_var);
            let new_mean: Vec<f64> = rm.data().iter().zip(&mean).map(|(r, b)| (1.0 - m) * r + m * b).collect();
            let new_var: Vec<f64> = rv
                .data()
                .iter()
                .zip(&var)
                .map(|(r, b)| (1.0 - m) * r + m * b * unbias)
                .collect();
            let c = new_mean.len();
            s.record_buffer_update(self.running_mean, Tensor::new(&[c], new_mean)?);
            s.record_buffer_update(self.running_var, Tensor::new(&[c], new_var)?);
            Ok(y)
        } else {
            let rm = s.buffer_value(self.running_mean);
            let rv = s.buffer_value(self.running_var);
            let neg_mean = s.graph.constant(rm.map(|v| -v));
            let std = s.graph.constant(rv.map(|v| (v + self.eps).sqrt()));
            let scale = s.graph.div(gamma, std)?;
            let centred = s.graph.add_channel(x, neg_mean)?;
            let scaled = s.graph.mul_channel(centred, scale)?;
            s.graph.add_channel(scaled, beta)
        }
    }
}

/// Check that `x` has `ndim` axes, naming the operation otherwise.
pub(crate) fn expect_rank(g: &Graph, x: Var, ndim: usize, op: &'static str) -> Result<Vec<usize>> {
    let s = g.shape(x).to_vec();
    if s.len() != ndim {
        return Err(Error::shape(op, format!("expected {ndim} axes, got {s:?}")));
    }
    Ok(s)
}
