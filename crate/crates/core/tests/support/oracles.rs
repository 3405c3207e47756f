//! Direct-formula oracles shared by the property and acceptance tests.

#![allow(dead_code)]

use cadc::rng::seeded;
use cadc::synthesis::{Blend, LabeledImage};
use cadc::{Tensor, Var};
use rand::Rng;

pub const EPS: f64 = f64::EPSILON;

pub fn random_pair(seed: u64, h: usize, w: usize) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = seeded(seed);
    let fg = rng.gen_range(0.05..0.95);
    let pred = Tensor::from_fn(&[1, h, w], |_| rng.gen::<f32>());
    let gt = Tensor::from_fn(&[1, h, w], |_| if rng.gen::<f64>() < fg { 1.0 } else { 0.0 });
    (pred, gt)
}

pub fn grid(t: &Tensor<f32>, h: usize, w: usize) -> Vec<Vec<f64>> {
    (0..h).map(|y| (0..w).map(|x| t.data()[y * w + x] as f64).collect()).collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Direct per-pixel enhanced-alignment matrix, maximised over thresholds.
pub fn e_oracle(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> f64 {
    let flat_gt: Vec<f64> = gt.concat();
    let mu_g = mean(&flat_gt);
    let mut best: f64 = 0.0;
    for k in 0..256 {
        let t = k as f64 / 255.0;
        let fm: Vec<f64> = pred.concat().iter().map(|&p| if p > t { 1.0 } else { 0.0 }).collect();
        let score = if mu_g == 0.0 {
            mean(&fm.iter().map(|f| 1.0 - f).collect::<Vec<_>>())
        } else if mu_g == 1.0 {
            mean(&fm)
        } else {
            let mu_f = mean(&fm);
            let m: Vec<f64> = fm
                .iter()
                .zip(&flat_gt)
                .map(|(&f, &g)| {
                    let (a, b) = (f - mu_f, g - mu_g);
                    let align = 2.0 * a * b / (a * a + b * b + EPS);
                    (align + 1.0).powi(2) / 4.0
                })
                .collect();
            mean(&m)
        };
        best = best.max(score);
    }
    best
}

pub fn std1(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

pub fn object_term(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let x = mean(v);
    let s = if v.len() > 1 { std1(v) } else { 0.0 };
    2.0 * x / (x * x + 1.0 + s + EPS)
}

pub fn ssim_term(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let (x, y) = (mean(p), mean(g));
    let var_x = p.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (n - 1.0 + EPS);
    let var_y = g.iter().map(|v| (v - y).powi(2)).sum::<f64>() / (n - 1.0 + EPS);
    let cov = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / (n - 1.0 + EPS);
    let alpha = 4.0 * x * y * cov;
    let beta = (x * x + y * y) * (var_x + var_y);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn s_oracle(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> f64 {
    let (h, w) = (gt.len(), gt[0].len());
    let y = mean(&gt.concat());
    if y == 0.0 {
        return 1.0 - mean(&pred.concat());
    }
    if y == 1.0 {
        return mean(&pred.concat());
    }
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    let (mut rows, mut cols) = (Vec::new(), Vec::new());
    for r in 0..h {
        for c in 0..w {
            if gt[r][c] == 1.0 {
                fg.push(pred[r][c]);
                rows.push(r as f64);
                cols.push(c as f64);
            } else {
                bg.push(1.0 - pred[r][c]);
            }
        }
    }
    let object = y * object_term(&fg) + (1.0 - y) * object_term(&bg);
    let cx = (mean(&cols).round_ties_even() as usize + 1).min(w);
    let cy = (mean(&rows).round_ties_even() as usize + 1).min(h);
    let mut region = 0.0;
    for (rs, cs) in [(0..cy, 0..cx), (0..cy, cx..w), (cy..h, 0..cx), (cy..h, cx..w)] {
        let (mut p, mut g) = (Vec::new(), Vec::new());
        for r in rs.clone() {
            for c in cs.clone() {
                p.push(pred[r][c]);
                g.push(gt[r][c]);
            }
        }
        if !p.is_empty() {
            region += p.len() as f64 / (h * w) as f64 * ssim_term(&p, &g);
        }
    }
    (0.5 * object + 0.5 * region).max(0.0)
}

/// Zero-padded 3×3 cross-correlation with the dense kernel `P[o,c]·D[c,ky,kx]`.
pub fn composed_dense(x: &Tensor<f32>, depth: &[f64], point: &[f64], n: usize, c1: usize) -> Vec<f64> {
    let (c, h, w) = (x.dim(1), x.dim(2), x.dim(3));
    let mut out = vec![0.0; c1 * h * w];
    for o in 0..c1 {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for ch in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let k = point[o * c + ch] * depth[ch * 9 + ky * 3 + kx];
                            acc += k * x.at(&[n, ch, sy as usize, sx as usize]) as f64;
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct Instance {
    pub n: usize,
    pub c: usize,
    pub c1: usize,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
}

pub fn separable_error(inst: Instance) -> f64 {
    let Instance { n, c, c1, h, w, seed } = inst;
    let mut rng = seeded(seed);
    let x = Tensor::<f32>::uniform(&[n, c, h, w], -1.0, 1.0, &mut rng);
    let depth = Tensor::<f32>::uniform(&[n, c, 3, 3], -1.0, 1.0, &mut rng);
    let point = Tensor::<f32>::uniform(&[n, c1, c, 1, 1], -1.0, 1.0, &mut rng);
    let cdepth = Tensor::<f32>::uniform(&[c, 3, 3], -1.0, 1.0, &mut rng);
    let cpoint = Tensor::<f32>::uniform(&[c1, c, 1, 1], -1.0, 1.0, &mut rng);
    let xv = Var::constant(x.clone());
    let adaptive = xv
        .depthwise_conv2d_per_image(&Var::constant(depth.clone()), 1)
        .and_then(|y| y.conv2d_per_image(&Var::constant(point.clone()), 0))
        .unwrap();
    let common = xv
        .depthwise_conv2d(&Var::constant(cdepth.clone()), 1)
        .and_then(|y| y.conv2d(&Var::constant(cpoint.clone()), 0))
        .unwrap();
    let f64s = |t: &[f32]| t.iter().map(|&v| v as f64).collect::<Vec<_>>();
    let plane = c1 * h * w;
    let mut worst: f64 = 0.0;
    for img in 0..n {
        let d = f64s(&depth.data()[img * c * 9..(img + 1) * c * 9]);
        let p = f64s(&point.data()[img * c1 * c..(img + 1) * c1 * c]);
        let dense = composed_dense(&x, &d, &p, img, c1);
        let common_dense = composed_dense(&x, &f64s(cdepth.data()), &f64s(cpoint.data()), img, c1);
        for i in 0..plane {
            worst = worst.max((adaptive.value().data()[img * plane + i] as f64 - dense[i]).abs());
            worst = worst.max((common.value().data()[img * plane + i] as f64 - common_dense[i]).abs());
        }
    }
    worst
}

/// Residual of the discrete Poisson equation recomputed from the patch
/// pixels, with the canvas itself as the Dirichlet data.
pub fn independent_residual(b: &Blend, canvas: &LabeledImage) -> f64 {
    let (h, w) = (canvas.height(), canvas.width());
    let (oy, ox) = b.offset;
    let mut worst: f64 = 0.0;
    for c in 0..3 {
        let u = &b.clone.solutions[c];
        let src = |y: usize, x: usize| b.patch.rgb.at(&[c, y, x]) as f64;
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                if !b.clone.region[y * w + x] {
                    continue;
                }
                let (py, px) = (y - oy, x - ox);
                let guide = 4.0 * src(py, px) - src(py - 1, px) - src(py + 1, px) - src(py, px - 1) - src(py, px + 1);
                let lap =
                    4.0 * u[y * w + x] - u[(y - 1) * w + x] - u[(y + 1) * w + x] - u[y * w + x - 1] - u[y * w + x + 1];
                worst = worst.max((lap - guide).abs());
            }
        }
    }
    worst
}

/// First broken blend invariant: residual, bitwise exterior, exact
/// Dirichlet data on the ring around the region.
pub fn blend_violation(b: &Blend, canvas: &LabeledImage) -> Option<String> {
    let (h, w) = (canvas.height(), canvas.width());
    let region = &b.clone.region;
    if !region.iter().any(|&r| r) {
        return Some("empty region".into());
    }
    if b.clone.residual >= 1e-4 {
        return Some(format!("reported residual {:.2e}", b.clone.residual));
    }
    let r = independent_residual(b, canvas);
    if r >= 1e-4 {
        return Some(format!("recomputed residual {r:.2e}"));
    }
    for c in 0..3 {
        for i in (0..h * w).filter(|&i| !region[i]) {
            let orig = canvas.rgb.data()[c * h * w + i];
            if b.image.rgb.data()[c * h * w + i].to_bits() != orig.to_bits() {
                return Some(format!("exterior pixel {i} of channel {c} changed"));
            }
            if b.clone.solutions[c][i] != orig as f64 {
                return Some(format!("Dirichlet value at {i} of channel {c} differs"));
            }
        }
    }
    None
}
