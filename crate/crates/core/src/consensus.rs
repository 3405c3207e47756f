//! Group summarisation: every image is pooled to 46 features, then all 46·N
//! features attend to each other with intra-image pairs suppressed, and the
//! attended result is added back as a residual.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::nn::{join, Linear, Module, Slot};
use crate::tensor::{Real, Tensor, Var};

/// Adaptive max-pool output sizes, concatenated in this order.
pub const POOL_SCALES: [usize; 3] = [1, 3, 6];

/// `1 + 9 + 36` pooled features per image.
pub const FEATURES_PER_IMAGE: usize = 46;

/// Logit written over every same-image affinity before the softmax.
pub const SUPPRESSION: f64 = -1e4;

/// Pools `x: N×C×H×W` at 1×1, 3×3 and 6×6, flattens, concatenates and
/// returns the `N×46×C` feature.
pub fn multi_scale_pool<T: Real>(x: &Var<T>) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(dim_err!("multi_scale_pool: need N×C×H×W, got {s:?}"));
    }
    if s[2] < 6 || s[3] < 6 {
        return Err(dim_err!("multi_scale_pool: spatial size {}×{} is below 6×6", s[2], s[3]));
    }
    let (n, c) = (s[0], s[1]);
    let pooled = POOL_SCALES
        .iter()
        .map(|&k| x.adaptive_max_pool2d(k, k)?.reshape(&[n, c, k * k]))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Var<T>> = pooled.iter().collect();
    Var::concat(&refs, 2)?.permute(&[0, 2, 1])
}

/// Query/key/value projections `C → C/2` (no bias) and the output
/// projection `C/2 → C` (with bias).
#[derive(Debug)]
pub struct AttentionProjection<T: Real> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

impl<T: Real> AttentionProjection<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(2) {
            return Err(dim_err!("attention needs an even channel count, got {channels}"));
        }
        let half = channels / 2;
        Ok(AttentionProjection {
            query: Linear::new(channels, half, false, rng),
            key: Linear::new(channels, half, false, rng),
            value: Linear::new(channels, half, false, rng),
            output: Linear::new(half, channels, true, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.output.d_out()
    }
}

impl<T: Real> Module<T> for AttentionProjection<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }
}

/// The summarised group.
#[derive(Clone, Debug)]
pub struct ConsensusFeature<T: Real> {
    /// `N×46×C` consensus feature.
    pub z: Var<T>,
    /// `46N×46N` query·key affinities after suppression.
    pub affinity: Var<T>,
    /// Row-normalised affinity.
    pub attention: Var<T>,
    /// `N×46` column means of `attention`; sums to one.
    pub common_weight: Var<T>,
}

impl<T: Real> ConsensusFeature<T> {
    pub fn group_size(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.z.shape()[2]
    }
}

/// Row-major `46N×46N` mask of query/key pairs drawn from the same image.
pub fn same_image_mask(n: usize) -> Vec<bool> {
    let m = FEATURES_PER_IMAGE * n;
    (0..m * m).map(|i| (i / m) / FEATURES_PER_IMAGE == (i % m) / FEATURES_PER_IMAGE).collect()
}

fn check_pooled<T: Real>(f: &Var<T>, proj: &AttentionProjection<T>) -> Result<(usize, usize)> {
    let s = f.shape();
    if s.len() != 3 || s[1] != FEATURES_PER_IMAGE {
        return Err(dim_err!("pooled feature must be N×46×C, got {s:?}"));
    }
    if s[2] != proj.channels() {
        return Err(dim_err!("pooled feature has {} channels, projection expects {}", s[2], proj.channels()));
    }
    Ok((s[0], s[2]))
}

/// Query·key affinities over all `46N` pooled features and their softmax over
/// the key axis. Same-image entries are overwritten with `suppression`
/// unless the group has a single image, in which case suppression would mask
/// every key and is skipped with a warning.
pub fn compute_affinity<T: Real>(
    f: &Var<T>,
    proj: &AttentionProjection<T>,
    suppression: T,
) -> Result<(Var<T>, Var<T>)> {
    let (n, c) = check_pooled(f, proj)?;
    let rows = f.reshape(&[n * FEATURES_PER_IMAGE, c])?;
    let q = proj.query.forward(&rows)?;
    let k = proj.key.forward(&rows)?;
    let raw = q.matmul(&k.permute(&[1, 0])?)?;
    let affinity = if n >= 2 {
        raw.masked_fill(&same_image_mask(n), suppression)?
    } else {
        log::warn!("group of one image: intra-image suppression disabled");
        raw
    };
    let attention = affinity.softmax(1)?;
    Ok((affinity, attention))
}

/// Self-attention over the pooled features of the whole group with the
/// default suppression constant.
pub fn aggregate_consensus<T: Real>(f: &Var<T>, proj: &AttentionProjection<T>) -> Result<ConsensusFeature<T>> {
    aggregate_consensus_with(f, proj, T::lit(SUPPRESSION))
}

pub fn aggregate_consensus_with<T: Real>(
    f: &Var<T>,
    proj: &AttentionProjection<T>,
    suppression: T,
) -> Result<ConsensusFeature<T>> {
    let (n, c) = check_pooled(f, proj)?;
    let m = n * FEATURES_PER_IMAGE;
    let (affinity, attention) = compute_affinity(f, proj, suppression)?;
    let rows = f.reshape(&[m, c])?;
    let v = proj.value.forward(&rows)?;
    let y = attention.matmul(&v)?;
    let residual = proj.output.forward(&y)?.reshape(&[n, FEATURES_PER_IMAGE, c])?;
    let z = f.add(&residual)?;
    let common_weight =
        attention.sum_axis(0)?.scale(T::one() / T::from_usize(m).unwrap()).reshape(&[n, FEATURES_PER_IMAGE])?;
    Ok(ConsensusFeature { z, affinity, attention, common_weight })
}

/// Reorders the image axis: `out[i] = x[perm[i]]`.
pub fn permute_group<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    validate_permutation(perm, x.shape().first().copied().unwrap_or(0))?;
    x.select_axis0(perm)
}

pub fn validate_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    let ok = perm.len() == n && perm.iter().all(|&p| p < n && !std::mem::replace(&mut seen[p], true));
    if ok {
        Ok(())
    } else {
        Err(Error::Usage(format!("{perm:?} is not a permutation of 0..{n}")))
    }
}
