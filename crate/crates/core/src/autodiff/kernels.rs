//! Forward and backward numeric kernels for the spatial operators.
//!
//! Every kernel works per batch element and reduces cross-batch
//! contributions in batch order, so results do not depend on whether the
//! batch loop runs on one thread or many.

use rayon::prelude::*;

use crate::parallel;

/// Geometry shared by the strided 2-D window operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn in_sample(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_sample(&self) -> usize {
        self.c_out * self.oh * self.ow
    }
}

fn for_each_sample<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    if parallel::is_serial() {
        out.chunks_mut(chunk).enumerate().for_each(|(n, o)| f(n, o));
    } else {
        out.par_chunks_mut(chunk).enumerate().for_each(|(n, o)| f(n, o));
    }
}

fn map_samples<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if parallel::is_serial() {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &xin[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let dxin = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dxin[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n]` with arbitrary strides; `c` is overwritten.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices fully contained in the slices,
    // checked by the callers' shape arithmetic.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain row-major matrix product `[m×k]·[k×n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, &mut c);
    c
}

/// `aᵀ·b` for row-major `a[k×m]`, `b[k×n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, 1, m as isize, b, n as isize, 1, &mut c);
    c
}

/// `a·bᵀ` for row-major `a[m×k]`, `b[n×k]`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, k as isize, 1, b, 1, k as isize, &mut c);
    c
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.out_sample()];
    let rows = g.cols_rows();
    let plane = g.out_plane();
    for_each_sample(&mut out, g.out_sample(), |n, o| {
        let mut cols = vec![0.0; rows * plane];
        im2col(&x[n * g.in_sample()..(n + 1) * g.in_sample()], g, &mut cols);
        gemm(
            g.c_out, rows, plane, w, rows as isize, 1, &cols, plane as isize, 1, o,
        );
        if let Some(b) = bias {
            for (co, chunk) in o.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    });
    out
}

/// Gradient of a convolution with respect to its input; equivalently the
/// transposed convolution of `gy` with `w`.
pub(crate) fn conv2d_backward_input(gy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dx = vec![0.0; g.n * g.in_sample()];
    let rows = g.cols_rows();
    let plane = g.out_plane();
    for_each_sample(&mut dx, g.in_sample(), |n, d| {
        let gyn = &gy[n * g.out_sample()..(n + 1) * g.out_sample()];
        let mut dcols = vec![0.0; rows * plane];
        // dcols[rows×plane] = wᵀ[rows×c_out] · gy[c_out×plane]
        gemm(
            rows,
            g.c_out,
            plane,
            w,
            1,
            rows as isize,
            gyn,
            plane as isize,
            1,
            &mut dcols,
        );
        col2im_add(&dcols, g, d);
    });
    dx
}

pub(crate) fn conv2d_backward_weight(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let rows = g.cols_rows();
    let plane = g.out_plane();
    let partials = map_samples(g.n, |n| {
        let mut cols = vec![0.0; rows * plane];
        im2col(&x[n * g.in_sample()..(n + 1) * g.in_sample()], g, &mut cols);
        let gyn = &gy[n * g.out_sample()..(n + 1) * g.out_sample()];
        let mut dw = vec![0.0; g.c_out * rows];
        // dw[c_out×rows] = gy[c_out×plane] · colsᵀ[plane×rows]
        gemm(
            g.c_out, plane, rows, gyn, plane as isize, 1, &cols, 1, plane as isize, &mut dw,
        );
        dw
    });
    reduce_in_order(partials, g.c_out * rows)
}

pub(crate) fn conv2d_backward_bias(gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_plane();
    let mut db = vec![0.0; g.c_out];
    for n in 0..g.n {
        for (co, d) in db.iter_mut().enumerate() {
            let off = (n * g.c_out + co) * plane;
            *d += gy[off..off + plane].iter().sum::<f64>();
        }
    }
    db
}

fn reduce_in_order(partials: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for p in partials {
        acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
    }
    acc
}

/// Depthwise convolution: `g.c_in == g.c_out`, one `k×k` filter per channel.
pub(crate) fn dwconv2d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.out_sample()];
    for_each_sample(&mut out, g.out_sample(), |n, o| {
        for c in 0..g.c_in {
            let xin = &x[(n * g.c_in + c) * g.h * g.w..(n * g.c_in + c + 1) * g.h * g.w];
            let wk = &w[c * g.k * g.k..(c + 1) * g.k * g.k];
            let oc = &mut o[c * g.out_plane()..(c + 1) * g.out_plane()];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut s = 0.0;
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                s += wk[ky * g.k + kx] * xin[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                    oc[oy * g.ow + ox] = s;
                }
            }
        }
    });
    out
}

pub(crate) fn dwconv2d_backward(x: &[f64], w: &[f64], gy: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; g.n * g.in_sample()];
    let partials = map_samples(g.n, |n| {
        let mut dxn = vec![0.0; g.in_sample()];
        let mut dwn = vec![0.0; g.c_in * g.k * g.k];
        for c in 0..g.c_in {
            let xoff = (n * g.c_in + c) * g.h * g.w;
            let goff = (n * g.c_in + c) * g.out_plane();
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gv = gy[goff + oy * g.ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                let xi = iy as usize * g.w + ix as usize;
                                dwn[(c * g.k + ky) * g.k + kx] += gv * x[xoff + xi];
                                dxn[c * g.h * g.w + xi] += gv * w[(c * g.k + ky) * g.k + kx];
                            }
                        }
                    }
                }
            }
        }
        (dxn, dwn)
    });
    let mut dws = Vec::with_capacity(g.n);
    for (n, (dxn, dwn)) in partials.into_iter().enumerate() {
        dx[n * g.in_sample()..(n + 1) * g.in_sample()].copy_from_slice(&dxn);
        dws.push(dwn);
    }
    (dx, reduce_in_order(dws, g.c_in * g.k * g.k))
}

/// Non-overlapping `size×size` max pooling over `[planes, h, w]`.
///
/// Returns the pooled values and, per output, the flat input index that won.
/// Ties go to the first index in row-major window order.
pub(crate) fn maxpool2d_forward(x: &[f64], planes: usize, h: usize, w: usize, size: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Separable interpolation weights for one axis (half-pixel centres,
/// no corner alignment).
#[derive(Debug, Clone)]
pub(crate) struct AxisInterp {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

pub(crate) fn axis_interp(input: usize, output: usize) -> AxisInterp {
    let scale = input as f64 / output as f64;
    let mut lo = Vec::with_capacity(output);
    let mut hi = Vec::with_capacity(output);
    let mut frac = Vec::with_capacity(output);
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        lo.push(i0);
        hi.push(i1);
        frac.push(src - i0 as f64);
    }
    AxisInterp { lo, hi, frac }
}

pub(crate) fn upsample_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    ry: &AxisInterp,
    rx: &AxisInterp,
) -> Vec<f64> {
    let (oh, ow) = (ry.lo.len(), rx.lo.len());
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = (ry.lo[oy], ry.hi[oy], ry.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (rx.lo[ox], rx.hi[ox], rx.frac[ox]);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(
    gy: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    ry: &AxisInterp,
    rx: &AxisInterp,
) -> Vec<f64> {
    let (oh, ow) = (ry.lo.len(), rx.lo.len());
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &gy[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = (ry.lo[oy], ry.hi[oy], ry.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (rx.lo[ox], rx.hi[ox], rx.frac[ox]);
                let v = g[oy * ow + ox];
                d[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                d[y0 * w + x1] += v * (1.0 - fy) * fx;
                d[y1 * w + x0] += v * fy * (1.0 - fx);
                d[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    dx
}

/// Batch statistics per channel of an `[n, c, plane]` tensor.
pub(crate) fn channel_moments(x: &[f64], n: usize, c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            s += x[off..off + plane].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            v += x[off..off + plane].iter().map(|&t| (t - mu) * (t - mu)).sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.c_out * g.oh * g.ow];
        for n in 0..g.n {
            for co in 0..g.c_out {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut s = 0.0;
                        for ci in 0..g.c_in {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                        s += w[((co * g.c_in + ci) * g.k + ky) * g.k + kx]
                                            * x[((n * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize];
                                    }
                                }
                            }
                        }
                        out[((n * g.c_out + co) * g.oh + oy) * g.ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_loops_with_padding() {
        let g = ConvGeom {
            n: 2,
            c_in: 3,
            h: 7,
            w: 6,
            c_out: 4,
            k: 3,
            stride: 2,
            pad: 1,
            oh: 4,
            ow: 3,
        };
        let x: Vec<f64> = (0..g.n * g.in_sample()).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect();
        let w: Vec<f64> = (0..g.c_out * g.cols_rows()).map(|i| ((i * 13 % 29) as f64) / 14.0 - 1.0).collect();
        let fast = conv2d_forward(&x, &w, None, &g);
        let slow = naive_conv(&x, &w, &g);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_ties_pick_first_index() {
        let x = vec![1.0, 1.0, 1.0, 1.0];
        let (out, arg) = maxpool2d_forward(&x, 1, 2, 2, 2);
        assert_eq!(out, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn upsample_constant_plane_stays_constant() {
        let ry = axis_interp(3, 6);
        let rx = axis_interp(2, 4);
        let out = upsample_forward(&[2.5; 6], 1, (3, 2), &ry, &rx);
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }
}
