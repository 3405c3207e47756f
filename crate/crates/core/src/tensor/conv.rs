//! Stride-1 zero-padded cross-correlation (no kernel flip), depthwise
//! variants, and bilinear upsampling.
//!
//! Weight gradients of shared kernels are accumulated per image and then
//! summed in image order, so the result does not depend on scheduling.

use std::sync::Arc;

use super::{gemm_into, Real, Tensor, Var};
use crate::error::{dim_err, Result};
use crate::par;

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

fn geometry(x: &[usize], c_w: usize, k: usize, pad: usize, op: &str) -> Result<Geom> {
    if x.len() != 4 {
        return Err(dim_err!("{op}: input must be N×C×H×W, got {x:?}"));
    }
    if x[1] != c_w {
        return Err(dim_err!("{op}: input has {} channels, kernel expects {c_w}", x[1]));
    }
    if k.is_multiple_of(2) {
        return Err(dim_err!("{op}: kernel size {k} must be odd"));
    }
    let (h, w) = (x[2], x[3]);
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(dim_err!("{op}: {h}×{w} input too small for {k}×{k} kernel with pad {pad}"));
    }
    Ok(Geom { n: x[0], c: x[1], h, w, k, pad, oh: h + 2 * pad - k + 1, ow: w + 2 * pad - k + 1 })
}

/// Output columns `[j0, j1)` whose tap `v` lands inside a row of width `w`.
fn valid_cols(g: &Geom, v: usize) -> (usize, usize) {
    let j0 = g.pad.saturating_sub(v).min(g.ow);
    let j1 = (g.w + g.pad).saturating_sub(v).min(g.ow).max(j0);
    (j0, j1)
}

/// Unfolds one image (C×H×W) into a (C·k·k)×(OH·OW) matrix.
fn im2col<T: Real>(img: &[T], g: &Geom, cols: &mut [T]) {
    let (k, p, ohw) = (g.k, g.pad as isize, g.oh * g.ow);
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for u in 0..k {
            for v in 0..k {
                let row = &mut cols[((c * k + u) * k + v) * ohw..][..ohw];
                let (j0, j1) = valid_cols(g, v);
                for i in 0..g.oh {
                    let y = i as isize + u as isize - p;
                    let dst = &mut row[i * g.ow..(i + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let x0 = (j0 + v) - g.pad;
                    let src = &plane[y as usize * g.w + x0..][..j1 - j0];
                    dst[..j0].fill(T::zero());
                    dst[j0..j1].copy_from_slice(src);
                    dst[j1..].fill(T::zero());
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: scatters column gradients back onto the image.
fn col2im<T: Real>(cols: &[T], g: &Geom, img: &mut [T]) {
    let (k, p, ohw) = (g.k, g.pad as isize, g.oh * g.ow);
    img.fill(T::zero());
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for u in 0..k {
            for v in 0..k {
                let row = &cols[((c * k + u) * k + v) * ohw..][..ohw];
                let (j0, j1) = valid_cols(g, v);
                for i in 0..g.oh {
                    let y = i as isize + u as isize - p;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let x0 = (j0 + v) - g.pad;
                    let dst = &mut plane[y as usize * g.w + x0..][..j1 - j0];
                    for (d, &s) in dst.iter_mut().zip(&row[i * g.ow + j0..i * g.ow + j1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &Geom) -> bool {
    g.k == 1 && g.pad == 0
}

fn conv_impl<T: Real>(x: &Var<T>, w: &Var<T>, pad: usize, per_image: bool) -> Result<Var<T>> {
    let op = if per_image { "per-image conv2d" } else { "conv2d" };
    let ws = w.shape();
    let kshape = if per_image {
        if ws.len() != 5 || ws[0] != x.shape().first().copied().unwrap_or(0) {
            return Err(dim_err!("{op}: kernel must be N×O×C×k×k matching input {:?}, got {ws:?}", x.shape()));
        }
        &ws[1..]
    } else {
        if ws.len() != 4 {
            return Err(dim_err!("{op}: kernel must be O×C×k×k, got {ws:?}"));
        }
        ws
    };
    if kshape[2] != kshape[3] {
        return Err(dim_err!("{op}: kernel must be square, got {ws:?}"));
    }
    let o = kshape[0];
    let g = geometry(x.shape(), kshape[1], kshape[2], pad, op)?;
    let (xv, wv) = (x.value_arc(), w.value_arc());
    let ckk = g.c * g.k * g.k;
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let wsize = o * ckk;
    let kernel_of = move |n: usize| if per_image { n * wsize } else { 0 };

    let mut out = vec![T::zero(); g.n * o * ohw];
    par::for_each_chunk(&mut out, o * ohw, |n, dst| {
        let img = &xv.data()[n * g.c * hw..(n + 1) * g.c * hw];
        let kern = &wv.data()[kernel_of(n)..kernel_of(n) + wsize];
        if is_pointwise(&g) {
            gemm_into(kern, false, img, false, o, ckk, ohw, dst, false);
        } else {
            let mut cols = vec![T::zero(); ckk * ohw];
            im2col(img, &g, &mut cols);
            gemm_into(kern, false, &cols, false, o, ckk, ohw, dst, false);
        }
    });

    let out = Tensor::from_parts(vec![g.n, o, g.oh, g.ow], out);
    let wshape = ws.to_vec();
    Ok(Var::from_op(out, &[x, w], move |gout, needs| {
        let gd = gout.data();
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); g.n * g.c * hw];
            par::for_each_chunk(&mut dx, g.c * hw, |n, dst| {
                let kern = &wv.data()[kernel_of(n)..kernel_of(n) + wsize];
                let go = &gd[n * o * ohw..(n + 1) * o * ohw];
                if is_pointwise(&g) {
                    gemm_into(kern, true, go, false, ckk, o, ohw, dst, false);
                } else {
                    let mut cols = vec![T::zero(); ckk * ohw];
                    gemm_into(kern, true, go, false, ckk, o, ohw, &mut cols, false);
                    col2im(&cols, &g, dst);
                }
            });
            Tensor::from_parts(vec![g.n, g.c, g.h, g.w], dx)
        });
        let dw = needs[1].then(|| {
            let partials: Vec<Vec<T>> = par::map_range(g.n, |n| {
                let img = &xv.data()[n * g.c * hw..(n + 1) * g.c * hw];
                let go = &gd[n * o * ohw..(n + 1) * o * ohw];
                let mut dwn = vec![T::zero(); wsize];
                if is_pointwise(&g) {
                    gemm_into(go, false, img, true, o, ohw, ckk, &mut dwn, false);
                } else {
                    let mut cols = vec![T::zero(); ckk * ohw];
                    im2col(img, &g, &mut cols);
                    gemm_into(go, false, &cols, true, o, ohw, ckk, &mut dwn, false);
                }
                dwn
            });
            let data = if per_image {
                partials.concat()
            } else {
                let mut acc = vec![T::zero(); wsize];
                for p in &partials {
                    for (a, &v) in acc.iter_mut().zip(p) {
                        *a += v;
                    }
                }
                acc
            };
            Tensor::from_parts(wshape.clone(), data)
        });
        vec![dx, dw]
    }))
}

fn depthwise_impl<T: Real>(x: &Var<T>, w: &Var<T>, pad: usize, per_image: bool) -> Result<Var<T>> {
    let op = if per_image { "per-image depthwise conv2d" } else { "depthwise conv2d" };
    let ws = w.shape();
    let kshape = if per_image {
        if ws.len() != 4 || ws[0] != x.shape().first().copied().unwrap_or(0) {
            return Err(dim_err!("{op}: kernel must be N×C×k×k matching input {:?}, got {ws:?}", x.shape()));
        }
        &ws[1..]
    } else {
        if ws.len() != 3 {
            return Err(dim_err!("{op}: kernel must be C×k×k, got {ws:?}"));
        }
        ws
    };
    if kshape[1] != kshape[2] {
        return Err(dim_err!("{op}: kernel must be square, got {ws:?}"));
    }
    let g = geometry(x.shape(), kshape[0], kshape[1], pad, op)?;
    let (xv, wv) = (x.value_arc(), w.value_arc());
    let (hw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);
    let kernel_of = move |n: usize, c: usize| if per_image { (n * g.c + c) * kk } else { c * kk };

    let mut out = vec![T::zero(); g.n * g.c * ohw];
    par::for_each_chunk(&mut out, ohw, |plane, dst| {
        let (n, c) = (plane / g.c, plane % g.c);
        let src = &xv.data()[plane * hw..(plane + 1) * hw];
        let kern = &wv.data()[kernel_of(n, c)..kernel_of(n, c) + kk];
        depthwise_plane(src, kern, &g, dst);
    });

    let out = Tensor::from_parts(vec![g.n, g.c, g.oh, g.ow], out);
    let wshape = ws.to_vec();
    Ok(Var::from_op(out, &[x, w], move |gout, needs| {
        let gd = gout.data();
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); g.n * g.c * hw];
            par::for_each_chunk(&mut dx, hw, |plane, dst| {
                let (n, c) = (plane / g.c, plane % g.c);
                let kern = &wv.data()[kernel_of(n, c)..kernel_of(n, c) + kk];
                let go = &gd[plane * ohw..(plane + 1) * ohw];
                for i in 0..g.oh {
                    for j in 0..g.ow {
                        let gv = go[i * g.ow + j];
                        for u in 0..g.k {
                            let y = (i + u) as isize - g.pad as isize;
                            if y < 0 || y >= g.h as isize {
                                continue;
                            }
                            for v in 0..g.k {
                                let xx = (j + v) as isize - g.pad as isize;
                                if xx >= 0 && xx < g.w as isize {
                                    dst[y as usize * g.w + xx as usize] += gv * kern[u * g.k + v];
                                }
                            }
                        }
                    }
                }
            });
            Tensor::from_parts(vec![g.n, g.c, g.h, g.w], dx)
        });
        let dw = needs[1].then(|| {
            let partials: Vec<Vec<T>> = par::map_range(g.n * g.c, |plane| {
                let src = &xv.data()[plane * hw..(plane + 1) * hw];
                let go = &gd[plane * ohw..(plane + 1) * ohw];
                let mut dk = vec![T::zero(); kk];
                for u in 0..g.k {
                    for v in 0..g.k {
                        let mut acc = T::zero();
                        for i in 0..g.oh {
                            let y = (i + u) as isize - g.pad as isize;
                            if y < 0 || y >= g.h as isize {
                                continue;
                            }
                            for j in 0..g.ow {
                                let xx = (j + v) as isize - g.pad as isize;
                                if xx >= 0 && xx < g.w as isize {
                                    acc += go[i * g.ow + j] * src[y as usize * g.w + xx as usize];
                                }
                            }
                        }
                        dk[u * g.k + v] = acc;
                    }
                }
                dk
            });
            let data = if per_image {
                partials.concat()
            } else {
                let mut acc = vec![T::zero(); g.c * kk];
                for (plane, p) in partials.iter().enumerate() {
                    let c = plane % g.c;
                    for (a, &v) in acc[c * kk..(c + 1) * kk].iter_mut().zip(p) {
                        *a += v;
                    }
                }
                acc
            };
            Tensor::from_parts(wshape.clone(), data)
        });
        vec![dx, dw]
    }))
}

fn depthwise_plane<T: Real>(src: &[T], kern: &[T], g: &Geom, dst: &mut [T]) {
    for i in 0..g.oh {
        for j in 0..g.ow {
            let mut acc = T::zero();
            for u in 0..g.k {
                let y = (i + u) as isize - g.pad as isize;
                if y < 0 || y >= g.h as isize {
                    continue;
                }
                let row = &src[y as usize * g.w..(y as usize + 1) * g.w];
                for v in 0..g.k {
                    let xx = (j + v) as isize - g.pad as isize;
                    if xx >= 0 && xx < g.w as isize {
                        acc += kern[u * g.k + v] * row[xx as usize];
                    }
                }
            }
            dst[i * g.ow + j] = acc;
        }
    }
}

/// Per-axis source taps for align-corners=false bilinear resampling.
fn taps(src: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..src * factor)
        .map(|d| {
            let s = ((d as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

impl<T: Real> Var<T> {
    /// Cross-correlation of `x: N×C×H×W` with `w: O×C×k×k`, stride 1.
    pub fn conv2d(&self, w: &Var<T>, pad: usize) -> Result<Var<T>> {
        conv_impl(self, w, pad, false)
    }

    /// Like [`Var::conv2d`] but image `n` uses its own kernel `w[n]`
    /// (`w: N×O×C×k×k`).
    pub fn conv2d_per_image(&self, w: &Var<T>, pad: usize) -> Result<Var<T>> {
        conv_impl(self, w, pad, true)
    }

    /// Channel-wise cross-correlation with `w: C×k×k`.
    pub fn depthwise_conv2d(&self, w: &Var<T>, pad: usize) -> Result<Var<T>> {
        depthwise_impl(self, w, pad, false)
    }

    /// Channel-wise cross-correlation with a kernel per image (`w: N×C×k×k`).
    pub fn depthwise_conv2d_per_image(&self, w: &Var<T>, pad: usize) -> Result<Var<T>> {
        depthwise_impl(self, w, pad, true)
    }

    /// Bilinear upsampling by an integer factor, align-corners=false.
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Var<T>> {
        let s = self.shape();
        if s.len() != 4 || factor == 0 {
            return Err(dim_err!("upsample: need N×C×H×W and factor >= 1, got {s:?} ×{factor}"));
        }
        if factor == 1 {
            return self.reshape(s);
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let ty = Arc::new(taps(h, factor));
        let tx = Arc::new(taps(w, factor));
        let planes = s[0] * s[1];
        let xv = self.value_arc();
        let mut out = vec![T::zero(); planes * oh * ow];
        {
            let (ty, tx) = (Arc::clone(&ty), Arc::clone(&tx));
            par::for_each_chunk(&mut out, oh * ow, |p, dst| {
                let src = &xv.data()[p * h * w..(p + 1) * h * w];
                for (i, &(y0, y1, ly)) in ty.iter().enumerate() {
                    let ly = T::lit(ly);
                    for (j, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let lx = T::lit(lx);
                        let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                        let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                        dst[i * ow + j] = top * (T::one() - ly) + bot * ly;
                    }
                }
            });
        }
        let in_shape = s.to_vec();
        let out = Tensor::from_parts(vec![s[0], s[1], oh, ow], out);
        Ok(Var::from_op(out, &[self], move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); planes * h * w];
            par::for_each_chunk(&mut dx, h * w, |p, dst| {
                let go = &gd[p * oh * ow..(p + 1) * oh * ow];
                for (i, &(y0, y1, ly)) in ty.iter().enumerate() {
                    let ly = T::lit(ly);
                    for (j, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let lx = T::lit(lx);
                        let gv = go[i * ow + j];
                        dst[y0 * w + x0] += gv * (T::one() - ly) * (T::one() - lx);
                        dst[y0 * w + x1] += gv * (T::one() - ly) * lx;
                        dst[y1 * w + x0] += gv * ly * (T::one() - lx);
                        dst[y1 * w + x1] += gv * ly * lx;
                    }
                }
            });
            vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
        }))
    }
}
