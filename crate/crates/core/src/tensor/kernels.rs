//! Raw numeric kernels behind the graph ops.
//!
//! Layouts: activations `[B, H, W, C]`, kernels `[kh, kw, Cin, Cout]`, all
//! row-major. Every kernel *accumulates* into its output slice; callers pass
//! zeroed buffers for a plain evaluation. Parallel chunking is always over
//! disjoint output rows with a fixed inner summation order, so results do
//! not depend on thread count.

use crate::error::{Error, Result};
use crate::parallel::for_each_chunk_mut;
use crate::tensor::Padding;

/// Resolved convolution geometry shared by forward and both backward passes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_c: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub(crate) fn conv_geom(
    xs: &[usize; 4],
    ks: &[usize; 4],
    stride: usize,
    pad: Padding,
) -> Result<ConvGeom> {
    let [batch, in_h, in_w, in_c] = *xs;
    let [kh, kw, kc, out_c] = *ks;
    if kc != in_c {
        return Err(Error::Dimension(format!(
            "kernel expects {} input channels, image has {}",
            kc, in_c
        )));
    }
    if stride < 1 {
        return Err(Error::Dimension("stride must be >= 1".into()));
    }
    let (out_h, out_w, pad_top, pad_left) = match pad {
        Padding::Same => {
            let out_h = in_h.div_ceil(stride);
            let out_w = in_w.div_ceil(stride);
            let total_h = ((out_h - 1) * stride + kh).saturating_sub(in_h);
            let total_w = ((out_w - 1) * stride + kw).saturating_sub(in_w);
            (out_h, out_w, total_h / 2, total_w / 2)
        }
        Padding::Valid => {
            if kh > in_h || kw > in_w {
                return Err(Error::Dimension(format!(
                    "kernel {}x{} larger than input {}x{}",
                    kh, kw, in_h, in_w
                )));
            }
            ((in_h - kh) / stride + 1, (in_w - kw) / stride + 1, 0, 0)
        }
    };
    if kh > in_h + 2 * pad_top + 1 || kw > in_w + 2 * pad_left + 1 {
        return Err(Error::Dimension(format!(
            "kernel {}x{} larger than padded input",
            kh, kw
        )));
    }
    Ok(ConvGeom {
        batch,
        in_h,
        in_w,
        in_c,
        kh,
        kw,
        out_c,
        stride,
        pad_top,
        pad_left,
        out_h,
        out_w,
    })
}

/// y[b,oh,ow,co] += sum_{i,j,ci} x[b, oh*s+i-pt, ow*s+j-pl, ci] * k[i,j,ci,co]
pub(crate) fn conv_fwd(x: &[f64], k: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let row = g.out_w * g.out_c;
    for_each_chunk_mut(out, row, |idx, orow| {
        let b = idx / g.out_h;
        let oh = idx % g.out_h;
        let xb = &x[b * g.in_h * g.in_w * g.in_c..(b + 1) * g.in_h * g.in_w * g.in_c];
        for ow in 0..g.out_w {
            let acc = &mut orow[ow * g.out_c..(ow + 1) * g.out_c];
            for i in 0..g.kh {
                let ih = (oh * g.stride + i) as isize - g.pad_top as isize;
                if ih < 0 || ih >= g.in_h as isize {
                    continue;
                }
                let xrow = &xb[ih as usize * g.in_w * g.in_c..];
                for j in 0..g.kw {
                    let iw = (ow * g.stride + j) as isize - g.pad_left as isize;
                    if iw < 0 || iw >= g.in_w as isize {
                        continue;
                    }
                    let xpix = &xrow[iw as usize * g.in_c..iw as usize * g.in_c + g.in_c];
                    let krow = &k[(i * g.kw + j) * g.in_c * g.out_c..];
                    for (ci, &xv) in xpix.iter().enumerate() {
                        let kk = &krow[ci * g.out_c..ci * g.out_c + g.out_c];
                        for (a, &kv) in acc.iter_mut().zip(kk) {
                            *a += xv * kv;
                        }
                    }
                }
            }
        }
    });
}

/// dx[b,ih,iw,ci] += sum_{i,j,co valid} dy[b,oh,ow,co] * k[i,j,ci,co]
///
/// Also the forward pass of the transpose convolution (adjoint of
/// `conv_fwd` with the same kernel and geometry).
pub(crate) fn conv_bwd_input(dy: &[f64], k: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let row = g.in_w * g.in_c;
    for_each_chunk_mut(dx, row, |idx, xrow| {
        let b = idx / g.in_h;
        let ih = idx % g.in_h;
        let dyb = &dy[b * g.out_h * g.out_w * g.out_c..(b + 1) * g.out_h * g.out_w * g.out_c];
        for i in 0..g.kh {
            // oh * stride = ih + pad_top - i
            let num = ih as isize + g.pad_top as isize - i as isize;
            if num < 0 || num % g.stride as isize != 0 {
                continue;
            }
            let oh = (num / g.stride as isize) as usize;
            if oh >= g.out_h {
                continue;
            }
            let dyrow = &dyb[oh * g.out_w * g.out_c..];
            for iw in 0..g.in_w {
                for j in 0..g.kw {
                    let num = iw as isize + g.pad_left as isize - j as isize;
                    if num < 0 || num % g.stride as isize != 0 {
                        continue;
                    }
                    let ow = (num / g.stride as isize) as usize;
                    if ow >= g.out_w {
                        continue;
                    }
                    let dypix = &dyrow[ow * g.out_c..ow * g.out_c + g.out_c];
                    let kbase = &k[(i * g.kw + j) * g.in_c * g.out_c..];
                    let xpix = &mut xrow[iw * g.in_c..(iw + 1) * g.in_c];
                    for (ci, xv) in xpix.iter_mut().enumerate() {
                        let kk = &kbase[ci * g.out_c..ci * g.out_c + g.out_c];
                        let mut acc = 0.0;
                        for (&dv, &kv) in dypix.iter().zip(kk) {
                            acc += dv * kv;
                        }
                        *xv += acc;
                    }
                }
            }
        }
    });
}

/// dk[i,j,ci,co] += sum_{b,oh,ow} x[b,ih,iw,ci] * dy[b,oh,ow,co]
pub(crate) fn conv_bwd_kernel(x: &[f64], dy: &[f64], g: &ConvGeom, dk: &mut [f64]) {
    // One task per (i, j, ci) row of the kernel gradient.
    for_each_chunk_mut(dk, g.out_c, |idx, krow| {
        let ci = idx % g.in_c;
        let ij = idx / g.in_c;
        let i = ij / g.kw;
        let j = ij % g.kw;
        for b in 0..g.batch {
            let xb = &x[b * g.in_h * g.in_w * g.in_c..];
            let dyb = &dy[b * g.out_h * g.out_w * g.out_c..];
            for oh in 0..g.out_h {
                let ih = (oh * g.stride + i) as isize - g.pad_top as isize;
                if ih < 0 || ih >= g.in_h as isize {
                    continue;
                }
                let xrow = &xb[ih as usize * g.in_w * g.in_c..];
                let dyrow = &dyb[oh * g.out_w * g.out_c..];
                for ow in 0..g.out_w {
                    let iw = (ow * g.stride + j) as isize - g.pad_left as isize;
                    if iw < 0 || iw >= g.in_w as isize {
                        continue;
                    }
                    let xv = xrow[iw as usize * g.in_c + ci];
                    if xv == 0.0 {
                        continue;
                    }
                    let dypix = &dyrow[ow * g.out_c..ow * g.out_c + g.out_c];
                    for (kv, &dv) in krow.iter_mut().zip(dypix) {
                        *kv += xv * dv;
                    }
                }
            }
        }
    });
}

/// Align-corners source coordinate mapping for a 1-d resize.
#[inline]
fn resize_src(o: usize, out_n: usize, in_n: usize) -> (usize, usize, f64) {
    if out_n == 1 || in_n == 1 {
        return (0, 0, 0.0);
    }
    let scale = (in_n - 1) as f64 / (out_n - 1) as f64;
    let src = o as f64 * scale;
    let i0 = (src.floor() as usize).min(in_n - 1);
    let i1 = (i0 + 1).min(in_n - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize with align-corners sampling.
///
/// Interpolation uses the lerp form `a + f*(b - a)` so constant images stay
/// exactly constant and integer source positions read exact values.
pub(crate) fn resize_fwd(x: &[f64], dims: &[usize; 4], oh: usize, ow: usize, out: &mut [f64]) {
    let [_batch, in_h, in_w, c] = *dims;
    let row = ow * c;
    for_each_chunk_mut(out, row, |idx, orow| {
        let b = idx / oh;
        let o_i = idx % oh;
        let (y0, y1, fy) = resize_src(o_i, oh, in_h);
        let xb = &x[b * in_h * in_w * c..];
        let top_row = &xb[y0 * in_w * c..];
        let bot_row = &xb[y1 * in_w * c..];
        for o_j in 0..ow {
            let (x0, x1, fx) = resize_src(o_j, ow, in_w);
            let opix = &mut orow[o_j * c..(o_j + 1) * c];
            for ch in 0..c {
                let t0 = top_row[x0 * c + ch];
                let t1 = top_row[x1 * c + ch];
                let b0 = bot_row[x0 * c + ch];
                let b1 = bot_row[x1 * c + ch];
                let top = t0 + fx * (t1 - t0);
                let bot = b0 + fx * (b1 - b0);
                opix[ch] += top + fy * (bot - top);
            }
        }
    });
}

/// Adjoint of [`resize_fwd`]: scatters output gradients back to the source
/// grid. Sequential; resize gradients are never on the hot path.
pub(crate) fn resize_bwd(dy: &[f64], dims: &[usize; 4], oh: usize, ow: usize, dx: &mut [f64]) {
    let [batch, in_h, in_w, c] = *dims;
    for b in 0..batch {
        let dxb = &mut dx[b * in_h * in_w * c..(b + 1) * in_h * in_w * c];
        let dyb = &dy[b * oh * ow * c..];
        for o_i in 0..oh {
            let (y0, y1, fy) = resize_src(o_i, oh, in_h);
            for o_j in 0..ow {
                let (x0, x1, fx) = resize_src(o_j, ow, in_w);
                let dpix = &dyb[(o_i * ow + o_j) * c..(o_i * ow + o_j) * c + c];
                for ch in 0..c {
                    let g = dpix[ch];
                    dxb[(y0 * in_w + x0) * c + ch] += g * (1.0 - fy) * (1.0 - fx);
                    dxb[(y0 * in_w + x1) * c + ch] += g * (1.0 - fy) * fx;
                    dxb[(y1 * in_w + x0) * c + ch] += g * fy * (1.0 - fx);
                    dxb[(y1 * in_w + x1) * c + ch] += g * fy * fx;
                }
            }
        }
    }
}

#[inline]
fn sample_at(img: &[f64], h: usize, w: usize, c: usize, y: isize, x: isize, ch: usize) -> f64 {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        img[(y as usize * w + x as usize) * c + ch]
    }
}

/// Bilinear lookup of `img[b]` at fractional coordinates
/// `coords[b,i,j,:] = (x, y)`. Out-of-bounds neighbours read as zero.
pub(crate) fn bsample_fwd(img: &[f64], dims: &[usize; 4], coords: &[f64], out: &mut [f64]) {
    let [_batch, h, w, c] = *dims;
    let row = w * c;
    for_each_chunk_mut(out, row, |idx, orow| {
        let b = idx / h;
        let i = idx % h;
        let imgb = &img[b * h * w * c..(b + 1) * h * w * c];
        let crow = &coords[(b * h + i) * w * 2..];
        for j in 0..w {
            let x = crow[j * 2];
            let y = crow[j * 2 + 1];
            let x0 = x.floor();
            let y0 = y.floor();
            let fx = x - x0;
            let fy = y - y0;
            let (xi, yi) = (x0 as isize, y0 as isize);
            let opix = &mut orow[j * c..(j + 1) * c];
            for ch in 0..c {
                let v00 = sample_at(imgb, h, w, c, yi, xi, ch);
                let v01 = sample_at(imgb, h, w, c, yi, xi + 1, ch);
                let v10 = sample_at(imgb, h, w, c, yi + 1, xi, ch);
                let v11 = sample_at(imgb, h, w, c, yi + 1, xi + 1, ch);
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                opix[ch] += top + fy * (bot - top);
            }
        }
    });
}

/// Gradient of [`bsample_fwd`] with respect to the image values.
pub(crate) fn bsample_bwd_img(dy: &[f64], dims: &[usize; 4], coords: &[f64], dimg: &mut [f64]) {
    let [batch, h, w, c] = *dims;
    for b in 0..batch {
        let dimgb = &mut dimg[b * h * w * c..(b + 1) * h * w * c];
        let dyb = &dy[b * h * w * c..];
        let cb = &coords[b * h * w * 2..];
        for i in 0..h {
            for j in 0..w {
                let x = cb[(i * w + j) * 2];
                let y = cb[(i * w + j) * 2 + 1];
                let x0 = x.floor();
                let y0 = y.floor();
                let fx = x - x0;
                let fy = y - y0;
                let (xi, yi) = (x0 as isize, y0 as isize);
                let dpix = &dyb[(i * w + j) * c..(i * w + j) * c + c];
                let mut scatter = |yy: isize, xx: isize, wgt: f64| {
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize && wgt != 0.0 {
                        let base = (yy as usize * w + xx as usize) * c;
                        for (ch, &g) in dpix.iter().enumerate() {
                            dimgb[base + ch] += g * wgt;
                        }
                    }
                };
                scatter(yi, xi, (1.0 - fy) * (1.0 - fx));
                scatter(yi, xi + 1, (1.0 - fy) * fx);
                scatter(yi + 1, xi, fy * (1.0 - fx));
                scatter(yi + 1, xi + 1, fy * fx);
            }
        }
    }
}
