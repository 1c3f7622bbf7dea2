//! Naive reference implementations shared by the integration tests.

#![allow(dead_code)]

use rand::Rng;

pub const BETA2: f64 = 0.3;

pub fn naive_mae(p: &[f64], g: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - g[i]).abs();
    }
    s / p.len() as f64
}

pub fn naive_psnr(p: &[f64], g: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - g[i]).powi(2);
    }
    let mse = s / p.len() as f64;
    if mse == 0.0 {
        99.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(99.0)
    }
}

fn levels(p: &[f64]) -> Vec<u32> {
    p.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u32).collect()
}

fn f_from_counts(tp: usize, fp: usize, fnn: usize) -> f64 {
    if tp + fp == 0 && tp + fnn == 0 {
        return 1.0;
    }
    let prec = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let rec = if tp + fnn > 0 { tp as f64 / (tp + fnn) as f64 } else { 0.0 };
    if prec == 0.0 && rec == 0.0 {
        0.0
    } else {
        (1.0 + BETA2) * prec * rec / (BETA2 * prec + rec)
    }
}

/// F-measure at the adaptive threshold, by direct counting.
pub fn naive_mean_f(p: &[f64], g: &[f64]) -> f64 {
    let q = levels(p);
    let mean = q.iter().map(|&v| v as f64 / 255.0).sum::<f64>() / q.len() as f64;
    let thr = (2.0 * mean).min(1.0);
    let (mut tp, mut fp, mut fnn) = (0, 0, 0);
    for i in 0..q.len() {
        let pos = q[i] > 0 && q[i] as f64 / 255.0 >= thr;
        let truth = g[i] > 0.5;
        match (pos, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    f_from_counts(tp, fp, fnn)
}

/// Best F-measure over the 255 nonzero levels, from cumulative level histograms.
pub fn naive_max_f(p: &[f64], g: &[f64]) -> f64 {
    let q = levels(p);
    let mut hist_pos = [0usize; 257];
    let mut hist_neg = [0usize; 257];
    for i in 0..q.len() {
        if g[i] > 0.5 {
            hist_pos[q[i] as usize] += 1;
        } else {
            hist_neg[q[i] as usize] += 1;
        }
    }
    let total_pos: usize = hist_pos.iter().sum();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = 0.0f64;
    for k in (1..=255).rev() {
        tp += hist_pos[k];
        fp += hist_neg[k];
        best = best.max(f_from_counts(tp, fp, total_pos - tp));
    }
    best
}

fn gauss_1d() -> Vec<f64> {
    let w: Vec<f64> = (-5..=5).map(|i: i32| (-(i * i) as f64 / (2.0 * 1.5 * 1.5)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Separable blur with zero padding.
fn blur(img: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gauss_1d();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = x as i64 + j as i64 - 5;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * img[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = y as i64 + j as i64 - 5;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Gaussian SSIM built from blurred moment maps.
pub fn naive_ssim(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = blur(a, w, h);
    let mu_b = blur(b, w, h);
    let e_aa = blur(&prod(&|x, _| x * x), w, h);
    let e_bb = blur(&prod(&|_, y| y * y), w, h);
    let e_ab = blur(&prod(&|x, y| x * y), w, h);
    let mut total = 0.0;
    for i in 0..w * h {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / (w * h) as f64
}

/// A random prediction/mask pair of `n` pixels; some masks are empty and
/// some predictions are noisy copies of the mask.
pub fn random_pair<R: Rng>(rng: &mut R, n: usize) -> (Vec<f64>, Vec<f64>) {
    let density: f64 = [0.0, 0.1, 0.3, 0.5, 0.9][rng.gen_range(0..5)];
    let gt: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < density { 1.0 } else { 0.0 }).collect();
    let pred = if rng.gen_bool(0.5) {
        (0..n).map(|_| rng.gen::<f64>()).collect()
    } else {
        gt.iter().map(|&g| (g * 0.8 + rng.gen::<f64>() * 0.3).clamp(0.0, 1.0)).collect()
    };
    (pred, gt)
}

/// Minimum transport cost between integer histograms on unit-spaced bins,
/// by enumerating every integer coupling.
pub fn brute_force_em(a: &[usize], b: &[usize]) -> usize {
    fn rec(i: usize, rows: &[usize], cols: &mut Vec<usize>, cost: usize, best: &mut usize) {
        if i == rows.len() {
            if cols.iter().all(|&c| c == 0) {
                *best = (*best).min(cost);
            }
            return;
        }
        fill(i, 0, rows[i], rows, cols, cost, best);
    }
    fn fill(i: usize, j: usize, left: usize, rows: &[usize], cols: &mut Vec<usize>, cost: usize, best: &mut usize) {
        if j == cols.len() {
            if left == 0 {
                rec(i + 1, rows, cols, cost, best);
            }
            return;
        }
        for x in 0..=left.min(cols[j]) {
            cols[j] -= x;
            fill(i, j + 1, left - x, rows, cols, cost + x * i.abs_diff(j), best);
            cols[j] += x;
        }
    }
    let mut best = usize::MAX;
    rec(0, a, &mut b.to_vec(), 0, &mut best);
    best
}

/// All ways to put `total` units into `bins` bins.
pub fn compositions(total: usize, bins: usize) -> Vec<Vec<usize>> {
    if bins == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 0..=total {
        for mut rest in compositions(total - first, bins - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}
