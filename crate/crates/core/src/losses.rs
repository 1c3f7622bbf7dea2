//! The generator objective: BCE, soft IoU and SSIM against the mask, a
//! pixel MSE, and the transport (or ablation distance) term.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::global::{distance_loss, t_net_loss, Critic, DistanceKind};
use crate::params::Binder;
use crate::tensor::Tensor;

pub const BCE_EPS: f64 = 1e-7;
const IOU_EPS: f64 = 1e-8;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalised 11×11 Gaussian, row-major.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g1: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g1 {
        for b in &g1 {
            w.push(a * b);
        }
    }
    w
}

/// Mean SSIM of `[B, 1, H, W]` maps, Gaussian-weighted with zero padding.
pub fn ssim_graph(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    if g.shape(x) != g.shape(y) || g.shape(x).len() != 4 || g.shape(x)[1] != 1 {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", g.shape(x), g.shape(y))));
    }
    let k = SSIM_WINDOW;
    let w = g.constant(Tensor::new(&[1, 1, k, k], gaussian_window())?);
    let pad = k / 2;
    let blur = |g: &mut Graph, v: Var| g.conv2d(v, w, None, 1, pad);
    let mx = blur(g, x)?;
    let my = blur(g, y)?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let exx = blur(g, xx)?;
    let eyy = blur(g, yy)?;
    let exy = blur(g, xy)?;
    let mx2 = g.mul(mx, mx)?;
    let my2 = g.mul(my, my)?;
    let mxy = g.mul(mx, my)?;
    let sxx = g.sub(exx, mx2)?;
    let syy = g.sub(eyy, my2)?;
    let sxy = g.sub(exy, mxy)?;
    let a = g.scale(mxy, 2.0);
    let a = g.add_scalar(a, SSIM_C1);
    let b = g.scale(sxy, 2.0);
    let b = g.add_scalar(b, SSIM_C2);
    let c = g.add(mx2, my2)?;
    let c = g.add_scalar(c, SSIM_C1);
    let d = g.add(sxx, syy)?;
    let d = g.add_scalar(d, SSIM_C2);
    let num = g.mul(a, b)?;
    let den = g.mul(c, d)?;
    let map = g.div(num, den)?;
    Ok(g.mean_all(map))
}

/// Batch mean of `(I + ε) / (U + ε)` with `I = Σ p·t`, `U = Σ p + Σ t − I`.
pub fn soft_iou(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape("soft_iou", format!("{:?} vs {:?}", g.shape(pred), g.shape(target))));
    }
    let b = g.shape(pred)[0];
    let n = g.value(pred).numel() / b;
    let flat = |g: &mut Graph, v: Var| -> Result<Var> {
        let r = g.reshape(v, &[b, n])?;
        g.sum_last(r)
    };
    let pt = g.mul(pred, target)?;
    let inter = flat(g, pt)?;
    let sp = flat(g, pred)?;
    let st = flat(g, target)?;
    let tot = g.add(sp, st)?;
    let union = g.sub(tot, inter)?;
    let num = g.add_scalar(inter, IOU_EPS);
    let den = g.add_scalar(union, IOU_EPS);
    let r = g.div(num, den)?;
    Ok(g.mean_all(r))
}

/// Which term aligns predictions with the mask distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    /// Transport/distance term on or off.
    pub sg: bool,
    pub distance: DistanceKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            sg: true,
            distance: DistanceKind::Em,
        }
    }
}

/// Logged values of every term. `total = alpha·original + mse − d_em + distance`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct JointTerms {
    pub bce: f64,
    pub iou_loss: f64,
    pub ssim_loss: f64,
    pub original: f64,
    pub mse: f64,
    pub d_em: f64,
    pub distance: f64,
    pub total: f64,
}

impl JointTerms {
    pub fn recombine(&self, alpha: f64) -> f64 {
        alpha * self.original + self.mse - self.d_em + self.distance
    }

    /// First non-finite term, by name.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("bce", self.bce),
            ("iou", self.iou_loss),
            ("ssim", self.ssim_loss),
            ("mse", self.mse),
            ("d_em", self.d_em),
            ("distance", self.distance),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `alpha·(BCE + 1 − IoU + 1 − SSIM) + MSE − mean φ(pred)`.
///
/// With an ablation distance the critic term is replaced by `+ D(pred, gt)`;
/// with `sg` off it is dropped. `critic` is only consulted for EM and should
/// be bound frozen.
pub fn joint_loss(
    g: &mut Graph,
    pred: Var,
    gt: Var,
    critic: Option<(&Critic, &mut Binder)>,
    cfg: &LossConfig,
) -> Result<(Var, JointTerms)> {
    if g.shape(pred) != g.shape(gt) {
        return Err(Error::shape("joint_loss", format!("{:?} vs {:?}", g.shape(pred), g.shape(gt))));
    }
    if g.value(gt).data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("ground truth must lie in [0, 1]".into()));
    }
    if !(cfg.alpha >= 0.0) {
        return Err(Error::Param(format!("alpha must be nonnegative, got {}", cfg.alpha)));
    }
    let bce = g.bce(pred, gt, BCE_EPS)?;
    let iou = soft_iou(g, pred, gt)?;
    let iou_loss = {
        let n = g.neg(iou);
        g.add_scalar(n, 1.0)
    };
    let ssim = ssim_graph(g, pred, gt)?;
    let ssim_loss = {
        let n = g.neg(ssim);
        g.add_scalar(n, 1.0)
    };
    let orig = g.add(bce, iou_loss)?;
    let orig = g.add(orig, ssim_loss)?;
    let weighted = g.scale(orig, cfg.alpha);
    let mut terms = JointTerms {
        bce: g.value(bce).item(),
        iou_loss: g.value(iou_loss).item(),
        ssim_loss: g.value(ssim_loss).item(),
        original: g.value(orig).item(),
        ..JointTerms::default()
    };
    let total = match (cfg.sg, cfg.distance) {
        (true, DistanceKind::Em) => {
            let (critic, params) =
                critic.ok_or_else(|| Error::Param("the EM term needs a critic".into()))?;
            // mse(gt, pred) − mean φ(pred)
            let t = t_net_loss(g, critic, params, pred, gt)?;
            let mse = g.mse(pred, gt)?;
            terms.mse = g.value(mse).item();
            terms.d_em = terms.mse - g.value(t).item();
            g.add(weighted, t)?
        }
        (true, kind) => {
            let mse = g.mse(pred, gt)?;
            let d = distance_loss(g, kind, pred, gt)?;
            terms.mse = g.value(mse).item();
            terms.distance = g.value(d).item();
            let s = g.add(weighted, mse)?;
            g.add(s, d)?
        }
        (false, _) => {
            let mse = g.mse(pred, gt)?;
            terms.mse = g.value(mse).item();
            g.add(weighted, mse)?
        }
    };
    terms.total = g.value(total).item();
    Ok((total, terms))
}
