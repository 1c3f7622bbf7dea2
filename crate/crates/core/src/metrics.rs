//! Saliency metrics on single-channel maps in `[0, 1]`.
//!
//! F-measures binarise an 8-bit quantised copy of the prediction
//! (`round(255·p) / 255`), the way predictions saved as images are scored,
//! and count a pixel as positive when it reaches the threshold and is
//! nonzero. The maximum F-measure is taken per image over the thresholds
//! `k/255, k = 1..=255`, then averaged, so it never falls below the
//! adaptive-threshold score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{gaussian_window, SSIM_C1, SSIM_C2, SSIM_WINDOW};

pub const BETA2: f64 = 0.3;
pub const PSNR_CAP: f64 = 99.0;
pub const SALIENT_THRESHOLD: f64 = 0.5;
const S_ALPHA: f64 = 0.5;

fn check(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("metric", format!("{} vs {} pixels", pred.len(), gt.len())));
    }
    Ok(())
}

pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

/// `(1 + β²)·P·R / (β²·P + R)`, zero when both vanish.
pub fn f_beta_from_pr(precision: f64, recall: f64) -> f64 {
    let den = BETA2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA2) * precision * recall / den
    }
}

fn quantise(p: f64) -> f64 {
    (p.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// F-measure of `pred ≥ threshold` against `gt > 0.5`. An empty prediction
/// of an empty mask scores 1.
pub fn f_beta_at(pred: &[f64], gt: &[f64], threshold: f64) -> Result<f64> {
    check(pred, gt)?;
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let q = quantise(p);
        let pos = q >= threshold && q > 0.0;
        match (pos, g > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    if tp + fp == 0 && tp + fnn == 0 {
        return Ok(1.0);
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fnn == 0 { 0.0 } else { tp as f64 / (tp + fnn) as f64 };
    Ok(f_beta_from_pr(precision, recall))
}

/// F-measure at the adaptive threshold `min(2·mean(pred), 1)`.
pub fn mean_f_beta(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check(pred, gt)?;
    let m = pred.iter().map(|&p| quantise(p)).sum::<f64>() / pred.len() as f64;
    f_beta_at(pred, gt, (2.0 * m).min(1.0))
}

pub fn max_f_beta(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let mut best = 0.0f64;
    for k in 1..=255 {
        best = best.max(f_beta_at(pred, gt, k as f64 / 255.0)?);
    }
    Ok(best)
}

/// PSNR with peak 1, capped at [`PSNR_CAP`] dB.
pub fn psnr(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check(pred, gt)?;
    let mse = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / pred.len() as f64;
    Ok(if mse == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

/// Gaussian-weighted SSIM (11×11, σ = 1.5, zero padding) averaged over pixels.
pub fn ssim(pred: &[f64], gt: &[f64], width: usize, height: usize) -> Result<f64> {
    check(pred, gt)?;
    if width * height != pred.len() {
        return Err(Error::shape("ssim", format!("{width}x{height} does not hold {} pixels", pred.len())));
    }
    let win = gaussian_window();
    let r = (SSIM_WINDOW / 2) as isize;
    let mut total = 0.0;
    for y in 0..height as isize {
        for x in 0..width as isize {
            let (mut mx, mut my, mut exx, mut eyy, mut exy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= height as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x + dx;
                    if xx < 0 || xx >= width as isize {
                        continue;
                    }
                    let w = win[((dy + r) as usize) * SSIM_WINDOW + (dx + r) as usize];
                    let i = yy as usize * width + xx as usize;
                    let (a, b) = (pred[i], gt[i]);
                    mx += w * a;
                    my += w * b;
                    exx += w * a * a;
                    eyy += w * b * b;
                    exy += w * a * b;
                }
            }
            let (sxx, syy, sxy) = (exx - mx * mx, eyy - my * my, exy - mx * my);
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2));
        }
    }
    Ok(total / pred.len() as f64)
}

// ---- S-measure ------------------------------------------------------------

const S_EPS: f64 = f64::EPSILON;

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let x = values.iter().sum::<f64>() / n;
    let sigma = if values.len() > 1 {
        (values.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + S_EPS)
}

fn s_object(pred: &[f64], gt: &[f64]) -> f64 {
    let fg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g > 0.5).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g <= 0.5).map(|(&p, _)| 1.0 - p).collect();
    let u = fg.len() as f64 / pred.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// Structural similarity of one region, as used by the region term.
fn region_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    if pred.len() < 2 {
        return 0.0;
    }
    let x = pred.iter().sum::<f64>() / n;
    let y = gt.iter().sum::<f64>() / n;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        sx += (p - x) * (p - x);
        sy += (g - y) * (g - y);
        sxy += (p - x) * (g - y);
    }
    let (sx, sy, sxy) = (sx / (n - 1.0), sy / (n - 1.0), sxy / (n - 1.0));
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + S_EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pred: &[f64], gt: &[f64], width: usize, height: usize) -> f64 {
    let fg: Vec<(usize, usize)> = (0..pred.len()).filter(|&i| gt[i] > 0.5).map(|i| (i % width, i / width)).collect();
    let (cx, cy) = if fg.is_empty() {
        ((width as f64 / 2.0).round_ties_even() as usize, (height as f64 / 2.0).round_ties_even() as usize)
    } else {
        let n = fg.len() as f64;
        let mx = fg.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let my = fg.iter().map(|p| p.1 as f64).sum::<f64>() / n;
        (mx.round_ties_even() as usize + 1, my.round_ties_even() as usize + 1)
    };
    let (cx, cy) = (cx.min(width), cy.min(height));
    let area = (width * height) as f64;
    let quads = [(0, cx, 0, cy), (cx, width, 0, cy), (0, cx, cy, height), (cx, width, cy, height)];
    let mut score = 0.0;
    for (x0, x1, y0, y1) in quads {
        let weight = ((x1 - x0) * (y1 - y0)) as f64 / area;
        if weight == 0.0 {
            continue;
        }
        let mut p = Vec::new();
        let mut g = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                p.push(pred[y * width + x]);
                g.push(gt[y * width + x]);
            }
        }
        score += weight * region_ssim(&p, &g);
    }
    score
}

/// Structure measure with object/region balance 0.5.
pub fn s_measure(pred: &[f64], gt: &[f64], width: usize, height: usize) -> Result<f64> {
    check(pred, gt)?;
    if width * height != pred.len() {
        return Err(Error::shape("s_measure", format!("{width}x{height} does not hold {} pixels", pred.len())));
    }
    let gt: Vec<f64> = gt.iter().map(|&g| if g > 0.5 { 1.0 } else { 0.0 }).collect();
    let y = gt.iter().sum::<f64>() / gt.len() as f64;
    let mean_p = pred.iter().sum::<f64>() / pred.len() as f64;
    let s = if y == 0.0 {
        1.0 - mean_p
    } else if y == 1.0 {
        mean_p
    } else {
        S_ALPHA * s_object(pred, &gt) + (1.0 - S_ALPHA) * s_region(pred, &gt, width, height)
    };
    Ok(s.clamp(0.0, 1.0))
}

// ---- aggregation ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPixelRatio {
    pub class: String,
    pub samples: usize,
    /// Mean fraction of pixels predicted salient.
    pub predicted: f64,
    /// Mean fraction of mask pixels.
    pub ground_truth: f64,
}

/// Per class, the mean fraction of pixels above [`SALIENT_THRESHOLD`] in
/// predictions and masks. Classes without samples are absent.
pub fn pixel_ratio_analysis(preds: &[Vec<f64>], gts: &[Vec<f64>], classes: &[String]) -> Result<Vec<ClassPixelRatio>> {
    if preds.len() != gts.len() || preds.len() != classes.len() {
        return Err(Error::shape(
            "pixel_ratio_analysis",
            format!("{} predictions, {} masks, {} labels", preds.len(), gts.len(), classes.len()),
        ));
    }
    let frac = |v: &[f64]| v.iter().filter(|&&x| x > SALIENT_THRESHOLD).count() as f64 / v.len().max(1) as f64;
    let mut acc: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
    for ((p, g), c) in preds.iter().zip(gts).zip(classes) {
        check(p, g)?;
        let e = acc.entry(c.as_str()).or_default();
        e.0 += 1;
        e.1 += frac(p);
        e.2 += frac(g);
    }
    Ok(acc
        .into_iter()
        .map(|(c, (n, p, g))| ClassPixelRatio {
            class: c.to_string(),
            samples: n,
            predicted: p / n as f64,
            ground_truth: g / n as f64,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub mae: f64,
    pub mean_f_beta: f64,
    pub max_f_beta: f64,
    pub s_measure: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Mean energy per sample, when estimated.
    pub energy_mj: Option<f64>,
    pub per_class_pixel_ratio: Vec<ClassPixelRatio>,
}

/// Average every per-image metric over a set of `(pred, gt, class)` maps of one size.
pub fn summarise(preds: &[Vec<f64>], gts: &[Vec<f64>], classes: &[String], width: usize, height: usize) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::Input("no samples to evaluate".into()));
    }
    let n = preds.len() as f64;
    let mut r = MetricsReport {
        samples: preds.len(),
        mae: 0.0,
        mean_f_beta: 0.0,
        max_f_beta: 0.0,
        s_measure: 0.0,
        psnr: 0.0,
        ssim: 0.0,
        energy_mj: None,
        per_class_pixel_ratio: pixel_ratio_analysis(preds, gts, classes)?,
    };
    for (p, g) in preds.iter().zip(gts) {
        r.mae += mae(p, g)? / n;
        r.mean_f_beta += mean_f_beta(p, g)? / n;
        r.max_f_beta += max_f_beta(p, g)? / n;
        r.s_measure += s_measure(p, g, width, height)? / n;
        r.psnr += psnr(p, g)? / n;
        r.ssim += ssim(p, g, width, height)? / n;
    }
    Ok(r)
}
