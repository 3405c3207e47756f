use std::sync::Arc;

use super::{Real, Tensor, Var};
use crate::error::{dim_err, Result};
use crate::par;

/// Half-open source range `[floor(i·n/out), ceil((i+1)·n/out))` of bin `i`.
pub(crate) fn bin_range(i: usize, n: usize, out: usize) -> (usize, usize) {
    (i * n / out, ((i + 1) * n).div_ceil(out))
}

impl<T: Real> Var<T> {
    /// Adaptive max pooling of `N×C×H×W` to `N×C×out_h×out_w`. The gradient of
    /// each bin goes to the first maximal position in row-major order.
    pub fn adaptive_max_pool2d(&self, out_h: usize, out_w: usize) -> Result<Var<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(dim_err!("adaptive_max_pool2d: need N×C×H×W, got {s:?}"));
        }
        let (h, w) = (s[2], s[3]);
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(dim_err!("adaptive_max_pool2d: target {out_h}×{out_w} for input {h}×{w}"));
        }
        let planes = s[0] * s[1];
        let bins = out_h * out_w;
        let xv = self.value_arc();
        let mut argmax = vec![0usize; planes * bins];
        par::for_each_chunk(&mut argmax, bins, |p, dst| {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            for i in 0..out_h {
                let (y0, y1) = bin_range(i, h, out_h);
                for j in 0..out_w {
                    let (x0, x1) = bin_range(j, w, out_w);
                    let mut best = y0 * w + x0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            if src[y * w + x] > src[best] {
                                best = y * w + x;
                            }
                        }
                    }
                    dst[i * out_w + j] = best;
                }
            }
        });
        let out: Vec<T> = argmax.iter().enumerate().map(|(i, &a)| xv.data()[(i / bins) * h * w + a]).collect();
        let argmax = Arc::new(argmax);
        let in_shape = s.to_vec();
        let out = Tensor::from_parts(vec![s[0], s[1], out_h, out_w], out);
        Ok(Var::from_op(out, &[self], move |g, _| {
            let mut dx = vec![T::zero(); planes * h * w];
            par::for_each_chunk(&mut dx, h * w, |p, dst| {
                for b in 0..bins {
                    dst[argmax[p * bins + b]] += g.data()[p * bins + b];
                }
            });
            vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
        }))
    }
}
