use std::sync::Arc;

use super::{axis_layout, channel_layout, gemm_into, Real, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::par;

fn same_shape<T: Real>(op: &str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

/// Generic N-d transpose: `out.shape[i] = x.shape[axes[i]]`.
fn permute_raw<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

impl<T: Real> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        same_shape("add", self, other)?;
        let out = zip_with(self.value(), other.value(), |a, b| a + b);
        Ok(Var::from_op(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        same_shape("sub", self, other)?;
        let out = zip_with(self.value(), other.value(), |a, b| a - b);
        Ok(Var::from_op(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", self, other)?;
        let (a, b) = (self.value_arc(), other.value_arc());
        let out = zip_with(&a, &b, |x, y| x * y);
        Ok(Var::from_op(out, &[self, other], move |g, needs| {
            vec![needs[0].then(|| zip_with(g, &b, |g, y| g * y)), needs[1].then(|| zip_with(g, &a, |g, x| g * x))]
        }))
    }

    pub fn scale(&self, s: T) -> Var<T> {
        let out = self.value().map(|v| v * s);
        Var::from_op(out, &[self], move |g, _| vec![Some(g.map(|v| v * s))])
    }

    pub fn add_scalar(&self, s: T) -> Var<T> {
        let out = self.value().map(|v| v + s);
        Var::from_op(out, &[self], |g, _| vec![Some(g.clone())])
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        let out = Tensor::scalar(self.value().sum_all());
        Var::from_op(out, &[self], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::from_usize(self.value().len()).unwrap();
        self.sum().scale(T::one() / n)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<T>> {
        let (outer, len, inner) = axis_layout(self.shape(), axis)?;
        let src = self.value().data();
        let mut acc = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (a, &v) in acc[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *a += v.to_f64().unwrap();
                }
            }
        }
        let out: Vec<T> = acc.into_iter().map(T::lit).collect();
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        let in_shape = self.shape().to_vec();
        Ok(Var::from_op(Tensor::from_parts(shape, out), &[self], move |g, _| {
            let gd = g.data();
            let mut dx = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                for _ in 0..len {
                    dx.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let out = (*self.value()).clone().reshape(shape)?;
        let in_shape = self.shape().to_vec();
        Ok(Var::from_op(out, &[self], move |g, _| vec![Some(Tensor::from_parts(in_shape.clone(), g.data().to_vec()))]))
    }

    /// Axis permutation; `axes` must be a permutation of `0..rank`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<T>> {
        let rank = self.value().rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(dim_err!("invalid permutation {axes:?} for shape {:?}", self.shape()));
        }
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out = permute_raw(self.value(), axes);
        Ok(Var::from_op(out, &[self], move |g, _| vec![Some(permute_raw(g, &inverse))]))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let base = first.shape();
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == base.len()
                && axis < s.len()
                && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err!("concat along {axis}: {:?} vs {:?}", s, base));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = axis_layout(base, axis)?;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.value().data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Ok(Var::from_op(Tensor::from_parts(shape, out), parts, move |g, needs| {
            let gd = g.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(lens.len());
            for (i, &l) in lens.iter().enumerate() {
                if needs[i] {
                    let mut d = Vec::with_capacity(outer * l * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[start..start + l * inner]);
                    }
                    grads.push(Some(Tensor::from_parts(shapes[i].clone(), d)));
                } else {
                    grads.push(None);
                }
                offset += l;
            }
            grads
        }))
    }

    /// `out[i] = self[indices[i]]` along the leading axis.
    pub fn select_axis0(&self, indices: &[usize]) -> Result<Var<T>> {
        let out = self.value().select_axis0(indices)?;
        let in_shape = self.shape().to_vec();
        let indices = indices.to_vec();
        Ok(Var::from_op(out, &[self], move |g, _| {
            let inner = g.len() / indices.len();
            let mut dx = Tensor::zeros(&in_shape);
            let d = dx.data_mut();
            for (i, &src) in indices.iter().enumerate() {
                for (acc, &v) in d[src * inner..(src + 1) * inner].iter_mut().zip(&g.data()[i * inner..]) {
                    *acc += v;
                }
            }
            vec![Some(dx)]
        }))
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul: {sa:?} · {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (a, b) = (self.value_arc(), other.value_arc());
        let mut out = vec![T::zero(); m * n];
        gemm_into(a.data(), false, b.data(), false, m, k, n, &mut out, false);
        Ok(Var::from_op(Tensor::from_parts(vec![m, n], out), &[self, other], move |g, needs| {
            let da = needs[0].then(|| {
                let mut d = vec![T::zero(); m * k];
                gemm_into(g.data(), false, b.data(), true, m, n, k, &mut d, false);
                Tensor::from_parts(vec![m, k], d)
            });
            let db = needs[1].then(|| {
                let mut d = vec![T::zero(); k * n];
                gemm_into(a.data(), true, g.data(), false, k, m, n, &mut d, false);
                Tensor::from_parts(vec![k, n], d)
            });
            vec![da, db]
        }))
    }

    /// Batched matrix product over a shared leading axis: `B×M×K · B×K×P`.
    pub fn bmm(&self, other: &Var<T>) -> Result<Var<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(dim_err!("bmm: {sa:?} · {sb:?}"));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (a, b) = (self.value_arc(), other.value_arc());
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            gemm_into(
                &a.data()[i * m * k..],
                false,
                &b.data()[i * k * n..],
                false,
                m,
                k,
                n,
                &mut out[i * m * n..],
                false,
            );
        }
        Ok(Var::from_op(Tensor::from_parts(vec![bs, m, n], out), &[self, other], move |g, needs| {
            let gd = g.data();
            let da = needs[0].then(|| {
                let mut d = vec![T::zero(); bs * m * k];
                for i in 0..bs {
                    gemm_into(
                        &gd[i * m * n..],
                        false,
                        &b.data()[i * k * n..],
                        true,
                        m,
                        n,
                        k,
                        &mut d[i * m * k..],
                        false,
                    );
                }
                Tensor::from_parts(vec![bs, m, k], d)
            });
            let db = needs[1].then(|| {
                let mut d = vec![T::zero(); bs * k * n];
                for i in 0..bs {
                    gemm_into(
                        &a.data()[i * m * k..],
                        true,
                        &gd[i * m * n..],
                        false,
                        k,
                        m,
                        n,
                        &mut d[i * k * n..],
                        false,
                    );
                }
                Tensor::from_parts(vec![bs, k, n], d)
            });
            vec![da, db]
        }))
    }

    /// Affine map along the last axis: `x · weightᵀ + bias`, with
    /// `weight: D_out×D_in`. Without a bias this is a plain linear map.
    pub fn fc(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let xs = self.shape();
        let ws = weight.shape();
        let d_in = *xs.last().ok_or_else(|| dim_err!("fc on a scalar"))?;
        if ws.len() != 2 || ws[1] != d_in {
            return Err(dim_err!("fc: input {xs:?} vs weight {ws:?}"));
        }
        let d_out = ws[0];
        if let Some(b) = bias {
            if b.shape() != [d_out] {
                return Err(dim_err!("fc: bias {:?} vs output width {d_out}", b.shape()));
            }
        }
        let rows = self.value().len() / d_in;
        let (x, w) = (self.value_arc(), weight.value_arc());
        let mut out = vec![T::zero(); rows * d_out];
        if let Some(b) = bias {
            for r in 0..rows {
                out[r * d_out..(r + 1) * d_out].copy_from_slice(b.value().data());
            }
        }
        gemm_into(x.data(), false, w.data(), true, rows, d_in, d_out, &mut out, bias.is_some());
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = d_out;
        let in_shape = xs.to_vec();
        let backward = move |g: &Tensor<T>, needs: &[bool]| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let mut d = vec![T::zero(); rows * d_in];
                gemm_into(gd, false, w.data(), false, rows, d_out, d_in, &mut d, false);
                Tensor::from_parts(in_shape.clone(), d)
            });
            let dw = needs[1].then(|| {
                let mut d = vec![T::zero(); d_out * d_in];
                gemm_into(gd, true, x.data(), false, d_out, rows, d_in, &mut d, false);
                Tensor::from_parts(vec![d_out, d_in], d)
            });
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut d = vec![T::zero(); d_out];
                    for r in 0..rows {
                        for (acc, &v) in d.iter_mut().zip(&gd[r * d_out..(r + 1) * d_out]) {
                            *acc += v;
                        }
                    }
                    Tensor::from_parts(vec![d_out], d)
                }));
            }
            grads
        };
        let out = Tensor::from_parts(shape, out);
        Ok(match bias {
            Some(b) => Var::from_op(out, &[self, weight, b], backward),
            None => Var::from_op(out, &[self, weight], backward),
        })
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<T>> {
        let (outer, len, inner) = axis_layout(self.shape(), axis)?;
        let src = self.value().data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).fold(T::neg_infinity(), |m, l| m.max(src[at(l)]));
                let mut sum = 0.0f64;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    out[at(l)] = e;
                    sum += e.to_f64().unwrap();
                }
                let sum = T::lit(sum);
                for l in 0..len {
                    out[at(l)] = out[at(l)] / sum;
                }
            }
        }
        let y = Arc::new(Tensor::from_parts(self.shape().to_vec(), out));
        let y_keep = Arc::clone(&y);
        Ok(Var::from_op((*y).clone(), &[self], move |g, _| {
            let (yd, gd) = (y_keep.data(), g.data());
            let mut dx = vec![T::zero(); yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot = (0..len).fold(T::zero(), |s, l| s + gd[at(l)] * yd[at(l)]);
                    for l in 0..len {
                        dx[at(l)] = yd[at(l)] * (gd[at(l)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(y_keep.shape().to_vec(), dx))]
        }))
    }

    pub fn relu(&self) -> Var<T> {
        let x = self.value_arc();
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        Var::from_op(out, &[self], move |g, _| {
            vec![Some(zip_with(g, &x, |g, v| if v > T::zero() { g } else { T::zero() }))]
        })
    }

    pub fn sigmoid(&self) -> Var<T> {
        let y = Arc::new(self.value().map(|v| T::one() / (T::one() + (-v).exp())));
        let y_keep = Arc::clone(&y);
        Var::from_op((*y).clone(), &[self], move |g, _| vec![Some(zip_with(g, &y_keep, |g, y| g * y * (T::one() - y)))])
    }

    /// Parametric ReLU with one learnable slope per channel (axis 1).
    pub fn prelu(&self, slope: &Var<T>) -> Result<Var<T>> {
        let (outer, c, inner) = channel_layout(self.shape())?;
        if slope.shape() != [c] {
            return Err(dim_err!("prelu: slope {:?} for {c} channels", slope.shape()));
        }
        let (x, a) = (self.value_arc(), slope.value_arc());
        let mut out = x.data().to_vec();
        for o in 0..outer {
            for ch in 0..c {
                let s = a.data()[ch];
                for v in &mut out[(o * c + ch) * inner..(o * c + ch + 1) * inner] {
                    if *v < T::zero() {
                        *v = s * *v;
                    }
                }
            }
        }
        let shape = x.shape().to_vec();
        Ok(Var::from_op(Tensor::from_parts(shape.clone(), out), &[self, slope], move |g, needs| {
            let (gd, xd, ad) = (g.data(), x.data(), a.data());
            let mut dx = vec![T::zero(); gd.len()];
            let mut da = vec![T::zero(); c];
            for o in 0..outer {
                for ch in 0..c {
                    for i in (o * c + ch) * inner..(o * c + ch + 1) * inner {
                        if xd[i] < T::zero() {
                            dx[i] = gd[i] * ad[ch];
                            da[ch] += gd[i] * xd[i];
                        } else {
                            dx[i] = gd[i];
                        }
                    }
                }
            }
            vec![
                needs[0].then(|| Tensor::from_parts(shape.clone(), dx)),
                needs[1].then(|| Tensor::from_parts(vec![c], da)),
            ]
        }))
    }

    /// Overwrites every position where `mask` is set with `value`; those
    /// positions receive no gradient.
    pub fn masked_fill(&self, mask: &[bool], value: T) -> Result<Var<T>> {
        if mask.len() != self.value().len() {
            return Err(dim_err!("masked_fill: mask of {} for {} values", mask.len(), self.value().len()));
        }
        let mut out = self.value().data().to_vec();
        for (v, &m) in out.iter_mut().zip(mask) {
            if m {
                *v = value;
            }
        }
        let mask = mask.to_vec();
        let shape = self.shape().to_vec();
        Ok(Var::from_op(Tensor::from_parts(shape, out), &[self], move |g, _| {
            let mut dx = g.clone();
            for (v, &m) in dx.data_mut().iter_mut().zip(&mask) {
                if m {
                    *v = T::zero();
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Adds a per-channel bias along axis 1.
    pub fn add_channel_bias(&self, bias: &Var<T>) -> Result<Var<T>> {
        let (outer, c, inner) = channel_layout(self.shape())?;
        if bias.shape() != [c] {
            return Err(dim_err!("channel bias {:?} for {c} channels", bias.shape()));
        }
        let mut out = self.value().data().to_vec();
        for o in 0..outer {
            for ch in 0..c {
                let b = bias.value().data()[ch];
                for v in &mut out[(o * c + ch) * inner..(o * c + ch + 1) * inner] {
                    *v += b;
                }
            }
        }
        Ok(Var::from_op(Tensor::from_parts(self.shape().to_vec(), out), &[self, bias], move |g, needs| {
            let db = needs[1].then(|| {
                let mut d = vec![T::zero(); c];
                for o in 0..outer {
                    for (ch, acc) in d.iter_mut().enumerate() {
                        for &v in &g.data()[(o * c + ch) * inner..(o * c + ch + 1) * inner] {
                            *acc += v;
                        }
                    }
                }
                Tensor::from_parts(vec![c], d)
            });
            vec![Some(g.clone()), db]
        }))
    }

    /// `x (N×C×H×W) ⊙ a (N×1×H×W)`, broadcasting `a` over channels.
    pub fn mul_channel_broadcast(&self, attn: &Var<T>) -> Result<Var<T>> {
        let s = self.shape();
        let sa = attn.shape();
        if s.len() != 4 || sa != [s[0], 1, s[2], s[3]] {
            return Err(dim_err!("channel broadcast: {s:?} ⊙ {sa:?}"));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let (x, a) = (self.value_arc(), attn.value_arc());
        let mut out = x.data().to_vec();
        par::for_each_chunk(&mut out, c * hw, |i, chunk| {
            let am = &a.data()[i * hw..(i + 1) * hw];
            for plane in chunk.chunks_mut(hw) {
                for (v, &w) in plane.iter_mut().zip(am) {
                    *v *= w;
                }
            }
        });
        let shape = s.to_vec();
        Ok(Var::from_op(Tensor::from_parts(shape.clone(), out), &[self, attn], move |g, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let mut d = gd.to_vec();
                for i in 0..n {
                    let am = &a.data()[i * hw..(i + 1) * hw];
                    for plane in d[i * c * hw..(i + 1) * c * hw].chunks_mut(hw) {
                        for (v, &w) in plane.iter_mut().zip(am) {
                            *v *= w;
                        }
                    }
                }
                Tensor::from_parts(shape.clone(), d)
            });
            let da = needs[1].then(|| {
                let mut d = vec![T::zero(); n * hw];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for p in 0..hw {
                            d[i * hw + p] += gd[base + p] * x.data()[base + p];
                        }
                    }
                }
                Tensor::from_parts(vec![n, 1, shape[2], shape[3]], d)
            });
            vec![dx, da]
        }))
    }

    /// Mean binary cross-entropy against a fixed target, with predictions
    /// clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_mean(&self, target: &Tensor<T>) -> Result<Var<T>> {
        if self.shape() != target.shape() {
            return Err(dim_err!("bce: prediction {:?} vs target {:?}", self.shape(), target.shape()));
        }
        let lo = T::lit(1e-7);
        let hi = T::one() - lo;
        let p = self.value_arc();
        let t = Arc::new(target.clone());
        let n = T::from_usize(p.len()).unwrap();
        let mut total = T::zero();
        for (&pv, &tv) in p.data().iter().zip(t.data()) {
            let q = pv.max(lo).min(hi);
            total += -(tv * q.ln() + (T::one() - tv) * (T::one() - q).ln());
        }
        Ok(Var::from_op(Tensor::scalar(total / n), &[self], move |g, _| {
            let scale = g.item() / n;
            let dx = zip_with(&p, &t, |pv, tv| {
                if pv < lo || pv > hi {
                    T::zero()
                } else {
                    scale * (pv - tv) / (pv * (T::one() - pv))
                }
            });
            vec![Some(dx)]
        }))
    }
}
