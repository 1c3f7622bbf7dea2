//! The adversarial transport objective: a critic φ scoring saliency maps,
//! the generator- and critic-side losses, the exact 1-D earth mover's
//! distance, and the distances used by the ablation runs.
//!
//! The transport cost between two maps is the per-pixel mean squared error.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, ParamKind, ParamStore};
use crate::snn::layers::{expect_rank, Conv2d};
use crate::tensor::Tensor;

/// Smoothing added to normalised maps before KL/JS.
pub const DIST_EPS: f64 = 1e-8;
/// Keeps the penalty's gradient norm differentiable at zero.
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Em,
    Ed,
    Kl,
    Js,
}

impl DistanceKind {
    pub const ALL: [DistanceKind; 4] = [DistanceKind::Em, DistanceKind::Ed, DistanceKind::Kl, DistanceKind::Js];

    pub fn as_str(self) -> &'static str {
        match self {
            DistanceKind::Em => "em",
            DistanceKind::Ed => "ed",
            DistanceKind::Kl => "kl",
            DistanceKind::Js => "js",
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Param(format!("unknown distance `{s}` (expected em, ed, kl, js)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticArch {
    /// Two strided convolutions, spatial mean, linear head.
    Conv,
    /// A single affine map of the flattened input.
    Linear,
}

#[derive(Debug, Clone)]
pub struct Critic {
    pub arch: CriticArch,
    pub convs: Vec<Conv2d>,
    pub head_w: ParamId,
    pub head_b: ParamId,
    /// Flattened input size for [`CriticArch::Linear`].
    pub in_features: usize,
}

const CRITIC_WIDTHS: [usize; 2] = [8, 16];
const LEAK: f64 = 0.2;

impl Critic {
    /// Convolutional critic; parameters live under `critic.`.
    pub fn conv<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &c) in CRITIC_WIDTHS.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("critic.conv{}", i + 1), c_in, c, 3, 2, 1, true, rng)?);
            c_in = c;
        }
        let head_w = store.add("critic.head.weight", Tensor::zeros(&[c_in, 1]), ParamKind::Trainable)?;
        let head_b = store.add("critic.head.bias", Tensor::zeros(&[1]), ParamKind::Trainable)?;
        Ok(Self {
            arch: CriticArch::Conv,
            convs,
            head_w,
            head_b,
            in_features: 0,
        })
    }

    /// `φ(x) = w·vec(x) + b` for maps with `in_features` pixels.
    pub fn linear(store: &mut ParamStore, in_features: usize) -> Result<Self> {
        let head_w = store.add("critic.head.weight", Tensor::zeros(&[in_features, 1]), ParamKind::Trainable)?;
        let head_b = store.add("critic.head.bias", Tensor::zeros(&[1]), ParamKind::Trainable)?;
        Ok(Self {
            arch: CriticArch::Linear,
            convs: Vec::new(),
            head_w,
            head_b,
            in_features,
        })
    }

    /// Per-sample potentials `[B]` for maps `[B, 1, H, W]`.
    pub fn score(&self, g: &mut Graph, params: &mut Binder, x: Var) -> Result<Var> {
        let shape = expect_rank(g, x, 4, "critic_score")?;
        let b = shape[0];
        if g.value(x).data().iter().any(|v| v.is_nan()) {
            return Err(Error::Input("critic input contains NaN".into()));
        }
        let feats = match self.arch {
            CriticArch::Conv => {
                let mut h = x;
                for conv in &self.convs {
                    let y = conv.apply(g, params, h)?;
                    h = g.leaky_relu(y, LEAK);
                }
                let s = g.shape(h).to_vec();
                let plane = s[2] * s[3];
                let flat = g.reshape(h, &[b, s[1], plane])?;
                let summed = g.sum_last(flat)?;
                let summed = g.reshape(summed, &[b, s[1]])?;
                g.scale(summed, 1.0 / plane as f64)
            }
            CriticArch::Linear => {
                let n: usize = shape[1..].iter().product();
                if n != self.in_features {
                    return Err(Error::shape(
                        "critic_score",
                        format!("linear critic expects {} pixels, got {n}", self.in_features),
                    ));
                }
                g.reshape(x, &[b, n])?
            }
        };
        let w = params.bind(g, self.head_w);
        let bias = params.bind(g, self.head_b);
        let y = g.matmul(feats, w)?;
        let y = g.add_channel(y, bias)?;
        g.reshape(y, &[b])
    }
}

/// `mean_i c(source_i, pred_i) − mean_i φ(pred_i)`, with `c` the pixel MSE.
///
/// The critic should be bound through a frozen [`Binder`] so that only the
/// prediction receives gradient.
pub fn t_net_loss(g: &mut Graph, critic: &Critic, params: &mut Binder, pred: Var, source: Var) -> Result<Var> {
    let (ps, ss) = (g.shape(pred).to_vec(), g.shape(source).to_vec());
    if ps.first() != ss.first() {
        return Err(Error::shape("t_net_loss", format!("batch of {ps:?} vs {ss:?}")));
    }
    // every sample has the same pixel count, so the mean of per-sample MSEs is the global MSE
    let cost = g.mse(source, pred)?;
    let phi = critic.score(g, params, pred)?;
    let mean_phi = g.mean_all(phi);
    g.sub(cost, mean_phi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticLoss {
    pub loss: Var,
    /// `mean φ(target) − mean φ(pred)`, the transport estimate.
    pub gap: f64,
    pub penalty: f64,
}

/// `−(mean φ(target) − mean φ(pred)) + coef · mean (‖∇φ(x̂)‖ − 1)²` over
/// random interpolates `x̂ = ε·target + (1 − ε)·pred`, one `ε` per sample.
///
/// `target` and `pred` are plain tensors: nothing flows back into the generator.
pub fn f_net_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    critic: &Critic,
    params: &mut Binder,
    target: &Tensor,
    pred: &Tensor,
    penalty_coef: f64,
    rng: &mut R,
) -> Result<CriticLoss> {
    if target.shape() != pred.shape() || target.ndim() != 4 {
        return Err(Error::shape(
            "f_net_loss",
            format!("target {:?} and prediction {:?} must be equal [B,1,H,W]", target.shape(), pred.shape()),
        ));
    }
    if !(penalty_coef >= 0.0) {
        return Err(Error::Param(format!("penalty coefficient must be nonnegative, got {penalty_coef}")));
    }
    let b = target.shape()[0];
    let t = g.constant(target.clone());
    let p = g.constant(pred.clone());
    let st = critic.score(g, params, t)?;
    let sp = critic.score(g, params, p)?;
    let mt = g.mean_all(st);
    let mp = g.mean_all(sp);
    let gap_v = g.sub(mt, mp)?;
    let gap = g.value(gap_v).item();
    let mut loss = g.neg(gap_v);
    let mut penalty = 0.0;
    if penalty_coef > 0.0 {
        let per = target.numel() / b;
        let mut mix = Vec::with_capacity(target.numel());
        for i in 0..b {
            let e: f64 = rng.gen();
            let (ts, ps) = (&target.data()[i * per..(i + 1) * per], &pred.data()[i * per..(i + 1) * per]);
            mix.extend(ts.iter().zip(ps).map(|(a, c)| e * a + (1.0 - e) * c));
        }
        let xh = g.variable(Tensor::new(target.shape(), mix)?);
        let s = critic.score(g, params, xh)?;
        let total = g.sum_all(s);
        let grad = g.grad_graph(total, xh)?;
        let sq = g.mul(grad, grad)?;
        let sq = g.reshape(sq, &[b, per])?;
        let norm2 = g.sum_last(sq)?;
        let norm2 = g.add_scalar(norm2, NORM_EPS);
        let norm = g.sqrt(norm2);
        let dev = g.add_scalar(norm, -1.0);
        let dev2 = g.mul(dev, dev)?;
        let mean = g.mean_all(dev2);
        let pen = g.scale(mean, penalty_coef);
        penalty = g.value(pen).item();
        loss = g.add(loss, pen)?;
    }
    Ok(CriticLoss { loss, gap, penalty })
}

/// Exact W₁ between two histograms on unit-spaced bins: `Σ |CDF_p − CDF_q|`.
pub fn em_exact_1d(p: &[f64], q: &[f64]) -> Result<f64> {
    check_hist(p, q)?;
    let (mp, mq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    if (mp - mq).abs() > 1e-9 {
        return Err(Error::Input(format!("histograms carry unequal mass {mp} and {mq}")));
    }
    let mut cp = 0.0;
    let mut cq = 0.0;
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q) {
        cp += a;
        cq += b;
        total += (cp - cq).abs();
    }
    Ok(total)
}

fn check_hist(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::shape("distance", format!("lengths {} and {}", p.len(), q.len())));
    }
    if p.iter().chain(q).any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Input("distributions must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Normalise to unit mass after adding [`DIST_EPS`] to every entry.
pub fn smooth_normalise(p: &[f64]) -> Vec<f64> {
    let total: f64 = p.iter().map(|v| v + DIST_EPS).sum();
    p.iter().map(|v| (v + DIST_EPS) / total).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Distance between two distributions. ED compares the raw vectors; KL, JS
/// and EM normalise (KL and JS with smoothing) first.
pub fn ablation_distance(kind: DistanceKind, p: &[f64], q: &[f64]) -> Result<f64> {
    check_hist(p, q)?;
    Ok(match kind {
        DistanceKind::Ed => p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
        DistanceKind::Kl => kl(&smooth_normalise(p), &smooth_normalise(q)),
        DistanceKind::Js => {
            let (p, q) = (smooth_normalise(p), smooth_normalise(q));
            let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
            0.5 * kl(&p, &m) + 0.5 * kl(&q, &m)
        }
        DistanceKind::Em => {
            let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
            if sp <= 0.0 || sq <= 0.0 {
                return Err(Error::Input("EM distance needs positive mass".into()));
            }
            let p: Vec<f64> = p.iter().map(|v| v / sp).collect();
            let q: Vec<f64> = q.iter().map(|v| v / sq).collect();
            em_exact_1d(&p, &q)?
        }
    })
}

/// Per-sample smoothed, normalised maps `[B, N]` from `[B, ...]`.
fn graph_normalise(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let n: usize = s[1..].iter().product();
    let flat = g.reshape(x, &[s[0], n])?;
    let smooth = g.add_scalar(flat, DIST_EPS);
    let mass = g.sum_last(smooth)?;
    let mass = g.broadcast_last(mass, n)?;
    g.div(smooth, mass)
}

/// Σ a·(ln a − ln b) per row, averaged over rows.
fn graph_kl(g: &mut Graph, a: Var, b: Var, batch: usize) -> Result<Var> {
    let la = g.log(a);
    let lb = g.log(b);
    let d = g.sub(la, lb)?;
    let t = g.mul(a, d)?;
    let s = g.sum_all(t);
    Ok(g.scale(s, 1.0 / batch as f64))
}

/// Differentiable batch mean of ED, KL(target‖pred) or JS between
/// prediction and target maps. EM is not available here: it needs the critic.
pub fn distance_loss(g: &mut Graph, kind: DistanceKind, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape(
            "distance_loss",
            format!("{:?} vs {:?}", g.shape(pred), g.shape(target)),
        ));
    }
    let b = g.shape(pred)[0];
    match kind {
        DistanceKind::Ed => {
            let n = g.value(pred).numel() / b;
            let d = g.sub(pred, target)?;
            let sq = g.mul(d, d)?;
            let sq = g.reshape(sq, &[b, n])?;
            let s = g.sum_last(sq)?;
            let s = g.add_scalar(s, NORM_EPS);
            let r = g.sqrt(s);
            Ok(g.mean_all(r))
        }
        DistanceKind::Kl => {
            let p = graph_normalise(g, pred)?;
            let t = graph_normalise(g, target)?;
            graph_kl(g, t, p, b)
        }
        DistanceKind::Js => {
            let p = graph_normalise(g, pred)?;
            let t = graph_normalise(g, target)?;
            let sum = g.add(p, t)?;
            let m = g.scale(sum, 0.5);
            let a = graph_kl(g, p, m, b)?;
            let c = graph_kl(g, t, m, b)?;
            let s = g.add(a, c)?;
            Ok(g.scale(s, 0.5))
        }
        DistanceKind::Em => Err(Error::Unsupported("the EM distance is estimated by the critic".into())),
    }
}
