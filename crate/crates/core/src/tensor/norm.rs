use std::sync::Arc;

use super::{channel_layout, Real, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::par;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with batch statistics and update the running estimates.
    Train,
    /// Normalise with the running estimates.
    Eval,
}

/// Running mean and (unbiased) variance per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Real> Var<T> {
    /// Batch normalisation over axis 1 of a `B×D` or `N×C×H×W` tensor.
    ///
    /// In [`BnMode::Train`] the running statistics in `stats` are created on
    /// first use and updated with momentum 0.1; [`BnMode::Eval`] requires them.
    pub fn batch_norm(
        &self,
        gamma: &Var<T>,
        beta: &Var<T>,
        mode: BnMode,
        stats: &mut Option<BatchNormStats<T>>,
    ) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(dim_err!("batch_norm: need B×D or N×C×H×W, got {shape:?}"));
        }
        let (outer, c, inner) = channel_layout(&shape)?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(dim_err!("batch_norm: gamma {:?} / beta {:?} for {c} channels", gamma.shape(), beta.shape()));
        }
        let count = outer * inner;
        let cnt = T::from_usize(count).unwrap();
        let eps = T::lit(BN_EPS);
        let x = self.value().data();
        let at = move |o: usize, ch: usize| (o * c + ch) * inner;

        let (mean, var) = match mode {
            BnMode::Train => {
                let stats_per_channel: Vec<(T, T)> = par::map_range(c, |ch| {
                    let mut sum = 0.0f64;
                    for o in 0..outer {
                        for &v in &x[at(o, ch)..at(o, ch) + inner] {
                            sum += v.to_f64().unwrap();
                        }
                    }
                    let m = sum / count as f64;
                    let mut sq = 0.0f64;
                    for o in 0..outer {
                        for &v in &x[at(o, ch)..at(o, ch) + inner] {
                            let d = v.to_f64().unwrap() - m;
                            sq += d * d;
                        }
                    }
                    (T::lit(m), T::lit(sq / count as f64))
                });
                let (mean, var): (Vec<T>, Vec<T>) = stats_per_channel.into_iter().unzip();
                let mom = T::lit(BN_MOMENTUM);
                let unbias = if count > 1 { cnt / (cnt - T::one()) } else { T::one() };
                let st =
                    stats.get_or_insert_with(|| BatchNormStats { mean: Tensor::zeros(&[c]), var: Tensor::ones(&[c]) });
                if st.mean.shape() != [c] {
                    return Err(Error::State(format!(
                        "running stats hold {:?} channels, input has {c}",
                        st.mean.shape()
                    )));
                }
                for ch in 0..c {
                    let rm = &mut st.mean.data_mut()[ch];
                    *rm = (T::one() - mom) * *rm + mom * mean[ch];
                    let rv = &mut st.var.data_mut()[ch];
                    *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
                }
                (mean, var)
            }
            BnMode::Eval => {
                let st = stats
                    .as_ref()
                    .ok_or_else(|| Error::State("batch_norm in eval mode without running statistics".into()))?;
                if st.mean.shape() != [c] {
                    return Err(Error::State(format!(
                        "running stats hold {:?} channels, input has {c}",
                        st.mean.shape()
                    )));
                }
                (st.mean.data().to_vec(), st.var.data().to_vec())
            }
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (gamma.value().data(), beta.value().data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for ch in 0..c {
                for i in at(o, ch)..at(o, ch) + inner {
                    let h = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let xhat = Arc::new(xhat);
        let gamma_v = gamma.value_arc();
        let out = Tensor::from_parts(shape.clone(), out);
        Ok(Var::from_op(out, &[self, gamma, beta], move |g, needs| {
            let gd = g.data();
            let mut dgamma64 = vec![0.0f64; c];
            let mut dbeta64 = vec![0.0f64; c];
            for o in 0..outer {
                for ch in 0..c {
                    for i in at(o, ch)..at(o, ch) + inner {
                        let gi = gd[i].to_f64().unwrap();
                        dgamma64[ch] += gi * xhat[i].to_f64().unwrap();
                        dbeta64[ch] += gi;
                    }
                }
            }
            let dgamma: Vec<T> = dgamma64.into_iter().map(T::lit).collect();
            let dbeta: Vec<T> = dbeta64.into_iter().map(T::lit).collect();
            let dx = needs[0].then(|| {
                let gm = gamma_v.data();
                let mut dx = vec![T::zero(); gd.len()];
                for o in 0..outer {
                    for ch in 0..c {
                        let k = gm[ch] * inv_std[ch];
                        for i in at(o, ch)..at(o, ch) + inner {
                            dx[i] = match mode {
                                BnMode::Train => k * (gd[i] - dbeta[ch] / cnt - xhat[i] * dgamma[ch] / cnt),
                                BnMode::Eval => k * gd[i],
                            };
                        }
                    }
                }
                Tensor::from_parts(shape.clone(), dx)
            });
            vec![
                dx,
                needs[1].then(|| Tensor::from_parts(vec![c], dgamma.clone())),
                needs[2].then(|| Tensor::from_parts(vec![c], dbeta.clone())),
            ]
        }))
    }
}
