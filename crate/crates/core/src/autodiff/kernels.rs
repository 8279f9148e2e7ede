//! Raw numeric kernels behind the graph ops. Plain slices in, plain vectors
//! out; every reduction runs in a fixed order so results are bit-stable.

use crate::error::{Error, Result};

pub(crate) struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    out_shape: [usize; 4],
}

impl ConvGeom {
    pub(crate) fn new(xs: &[usize], ks: &[usize], stride: usize, padding: usize) -> Self {
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ks[0], ks[2], ks[3]);
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        Self {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
            out_shape: [n, f, oh, ow],
        }
    }

    pub(crate) fn out_shape(&self) -> &[usize; 4] {
        &self.out_shape
    }

    /// Output index range `[lo, hi)` whose input coordinate
    /// `o * stride + k - padding` falls inside `0..extent`.
    fn valid(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = k as isize - self.padding as isize;
        // o*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        // o*s + shift <= extent - 1
        let top = extent as isize - 1 - shift;
        let hi = if top < 0 { 0 } else { top / s + 1 };
        let lo = (lo as usize).min(out_extent);
        let hi = (hi as usize).min(out_extent).max(lo);
        (lo, hi)
    }

    fn in_coord(&self, o: usize, k: usize) -> usize {
        o * self.stride + k - self.padding
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.f * plane];
    for b in 0..g.n {
        for f in 0..g.f {
            let o = &mut out[(b * g.f + f) * plane..(b * g.f + f + 1) * plane];
            if let Some(bias) = bias {
                o.fill(bias[f]);
            }
            for c in 0..g.c {
                let x = &input[(b * g.c + c) * g.h * g.w..(b * g.c + c + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = kernel[((f * g.c + c) * g.kh + ky) * g.kw + kx];
                        let (ox0, ox1) = g.valid(kx, g.w, g.ow);
                        for oy in oy0..oy1 {
                            let iy = g.in_coord(oy, ky);
                            let orow = &mut o[oy * g.ow..(oy + 1) * g.ow];
                            let xrow = &x[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let ix0 = g.in_coord(ox0, kx);
                                for (ov, xv) in orow[ox0..ox1]
                                    .iter_mut()
                                    .zip(&xrow[ix0..ix0 + (ox1 - ox0)])
                                {
                                    *ov += wv * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * xrow[g.in_coord(ox, kx)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward_input(g: &ConvGeom, gout: &[f64], kernel: &[f64], gin: &mut [f64]) {
    let plane = g.oh * g.ow;
    for b in 0..g.n {
        for f in 0..g.f {
            let go = &gout[(b * g.f + f) * plane..(b * g.f + f + 1) * plane];
            for c in 0..g.c {
                let gx = &mut gin[(b * g.c + c) * g.h * g.w..(b * g.c + c + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = kernel[((f * g.c + c) * g.kh + ky) * g.kw + kx];
                        let (ox0, ox1) = g.valid(kx, g.w, g.ow);
                        for oy in oy0..oy1 {
                            let iy = g.in_coord(oy, ky);
                            let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                            let xrow = &mut gx[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let ix0 = g.in_coord(ox0, kx);
                                for (xv, gv) in xrow[ix0..ix0 + (ox1 - ox0)]
                                    .iter_mut()
                                    .zip(&grow[ox0..ox1])
                                {
                                    *xv += wv * gv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    xrow[g.in_coord(ox, kx)] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward_kernel(g: &ConvGeom, gout: &[f64], input: &[f64], gk: &mut [f64]) {
    let plane = g.oh * g.ow;
    for b in 0..g.n {
        for f in 0..g.f {
            let go = &gout[(b * g.f + f) * plane..(b * g.f + f + 1) * plane];
            for c in 0..g.c {
                let x = &input[(b * g.c + c) * g.h * g.w..(b * g.c + c + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let (ox0, ox1) = g.valid(kx, g.w, g.ow);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = g.in_coord(oy, ky);
                            let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                            let xrow = &x[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let ix0 = g.in_coord(ox0, kx);
                                for (gv, xv) in grow[ox0..ox1]
                                    .iter()
                                    .zip(&xrow[ix0..ix0 + (ox1 - ox0)])
                                {
                                    acc += gv * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    acc += grow[ox] * xrow[g.in_coord(ox, kx)];
                                }
                            }
                        }
                        gk[((f * g.c + c) * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward_bias(g: &ConvGeom, gout: &[f64], gb: &mut [f64]) {
    let plane = g.oh * g.ow;
    for b in 0..g.n {
        for (f, slot) in gb.iter_mut().enumerate() {
            *slot += gout[(b * g.f + f) * plane..(b * g.f + f + 1) * plane]
                .iter()
                .sum::<f64>();
        }
    }
}

/// Returns pooled values, the flat source index of each winner, and the
/// smallest margin between a winner and a runner-up in its window.
pub(crate) fn max_pool_forward(xs: &[usize], size: usize, x: &[f64]) -> (Vec<f64>, Vec<usize>, f64) {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let mut gap = f64::INFINITY;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                let mut arg = 0;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        let v = x[idx];
                        if v > best {
                            second = best;
                            best = v;
                            arg = idx;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                if size > 1 {
                    gap = gap.min(best - second);
                }
                out.push(best);
                argmax.push(arg);
            }
        }
    }
    (out, argmax, gap)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// `log((d + 1) / (d + eps))` written as `ln_1p((1 - eps) / (d + eps))`.
pub(crate) fn log_similarity(d: f64, eps: f64) -> f64 {
    ((1.0 - eps) / (d + eps)).ln_1p()
}

pub(crate) fn log_similarity_grad(d: f64, eps: f64) -> f64 {
    1.0 / (d + 1.0) - 1.0 / (d + eps)
}

pub(crate) fn sq_distance_map(latent: &[f64], proto: &[f64], channels: usize, cells: usize) -> Vec<f64> {
    let mut out = vec![0.0; cells];
    for ch in 0..channels {
        let p = proto[ch];
        for (o, &z) in out.iter_mut().zip(&latent[ch * cells..(ch + 1) * cells]) {
            let diff = z - p;
            *o += diff * diff;
        }
    }
    out
}

/// Indices of the `k` largest (or smallest) entries, ordered by value with
/// ties resolved towards the lower index, plus the gap between the k-th and
/// (k+1)-th values.
pub(crate) fn select_k(x: &[f64], k: usize, largest: bool) -> (Vec<usize>, f64) {
    let mut order: Vec<usize> = (0..x.len()).collect();
    if largest {
        order.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    } else {
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    }
    let gap = if k < x.len() {
        (x[order[k - 1]] - x[order[k]]).abs()
    } else {
        f64::INFINITY
    };
    order.truncate(k);
    (order, gap)
}

/// Source index pair and interpolation weight for each output coordinate
/// under corner alignment: output 0 maps to input 0 and output `out - 1` to
/// input `len - 1`.
pub(crate) fn axis_weights(len: usize, out: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|o| {
            if out == 1 || len == 1 {
                return (0, 0, 0.0);
            }
            let num = o * (len - 1);
            let den = out - 1;
            let i0 = num / den;
            let frac = (num - i0 * den) as f64 / den as f64;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, frac)
        })
        .collect()
}

pub(crate) fn bilinear_upsample(
    x: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>> {
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!(
            "bilinear_upsample needs at least a 2x2 map, got {h}x{w}"
        )));
    }
    if out_h < h || out_w < w {
        return Err(Error::Shape(format!(
            "bilinear_upsample output {out_h}x{out_w} is smaller than input {h}x{w}"
        )));
    }
    let ys = axis_weights(h, out_h);
    let xs = axis_weights(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let a = x[y0 * w + x0];
            let b = x[y0 * w + x1];
            let c = x[y1 * w + x0];
            let d = x[y1 * w + x1];
            let top = a + fx * (b - a);
            let bottom = c + fx * (d - c);
            let v = top + fy * (bottom - top);
            // Keep the result inside the hull of its four corners even at the
            // last ulp.
            let lo = a.min(b).min(c).min(d);
            let hi = a.max(b).max(c).max(d);
            out.push(v.clamp(lo, hi));
        }
    }
    Ok(out)
}

pub(crate) fn bilinear_upsample_backward(
    gout: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    gin: &mut [f64],
) {
    let ys = axis_weights(h, out_h);
    let xs = axis_weights(w, out_w);
    let mut k = 0;
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let g = gout[k];
            k += 1;
            let top = g * (1.0 - fy);
            let bottom = g * fy;
            gin[y0 * w + x0] += top * (1.0 - fx);
            gin[y0 * w + x1] += top * fx;
            gin[y1 * w + x0] += bottom * (1.0 - fx);
            gin[y1 * w + x1] += bottom * fx;
        }
    }
}
