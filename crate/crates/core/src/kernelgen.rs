//! Dynamic kernels generated from a consensus feature.
//!
//! Two kinds exist. Vanilla kernels are 1×1 only. Large kernels are
//! depthwise 3×3 followed by pointwise 1×1. Each kind has a per-image
//! (adaptive) and a group-wide (common) branch.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::consensus::{ConsensusFeature, FEATURES_PER_IMAGE};
use crate::error::{dim_err, Error, Result};
use crate::nn::{join, BatchNorm, Linear, Module, PRelu, Slot};
use crate::tensor::{BnMode, Real, Var};

/// Hidden width of the three feature-attention stacks.
pub const ATTENTION_HIDDEN: usize = 1024;

/// Taps of a 3×3 depthwise kernel.
const DEPTH_TAPS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelKind {
    Vanilla,
    Large,
}

impl FromStr for KernelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(KernelKind::Vanilla),
            "large" => Ok(KernelKind::Large),
            _ => Err(Error::Usage(format!("unknown kernel kind `{s}` (vanilla|large)"))),
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Vanilla => "vanilla",
            KernelKind::Large => "large",
        })
    }
}

/// Which of the two kernel branches are generated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Branches {
    pub adaptive: bool,
    pub common: bool,
}

impl Branches {
    pub const BOTH: Branches = Branches { adaptive: true, common: true };
    pub const ADAPTIVE: Branches = Branches { adaptive: true, common: false };
    pub const COMMON: Branches = Branches { adaptive: false, common: true };

    pub fn count(self) -> usize {
        self.adaptive as usize + self.common as usize
    }
}

impl FromStr for Branches {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Branches::BOTH),
            "adaptive" => Ok(Branches::ADAPTIVE),
            "common" => Ok(Branches::COMMON),
            _ => Err(Error::Usage(format!("unknown branch set `{s}` (adaptive|common|both)"))),
        }
    }
}

impl fmt::Display for Branches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match (self.adaptive, self.common) {
            (true, true) => "both",
            (true, false) => "adaptive",
            (false, true) => "common",
            (false, false) => "none",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    PRelu,
}

/// `FC → [BN] → ReLU|PReLU → FC`, applied row-wise to a `B×D_in` input.
#[derive(Debug)]
pub struct FcStack<T: Real> {
    pub fc1: Linear<T>,
    pub bn: Option<BatchNorm<T>>,
    pub prelu: Option<PRelu<T>>,
    pub fc2: Linear<T>,
}

impl<T: Real> FcStack<T> {
    pub fn new<R: Rng + ?Sized>(
        d_in: usize,
        hidden: usize,
        d_out: usize,
        bn: bool,
        act: Activation,
        rng: &mut R,
    ) -> Self {
        FcStack {
            fc1: Linear::new(d_in, hidden, true, rng),
            bn: bn.then(|| BatchNorm::new(hidden)),
            prelu: (act == Activation::PRelu).then(|| PRelu::new(hidden)),
            fc2: Linear::new(hidden, d_out, true, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fc1.d_out()
    }

    pub fn forward(&self, x: &Var<T>, mode: BnMode) -> Result<Var<T>> {
        let mut h = self.fc1.forward(x)?;
        if let Some(bn) = &self.bn {
            h = bn.forward(&h, mode)?;
        }
        h = match &self.prelu {
            Some(p) => h.prelu(p.slope.var())?,
            None => h.relu(),
        };
        self.fc2.forward(&h)
    }
}

impl<T: Real> Module<T> for FcStack<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        if let Some(bn) = &mut self.bn {
            bn.visit(&join(prefix, "bn"), f);
        }
        if let Some(p) = &mut self.prelu {
            p.visit(&join(prefix, "prelu"), f);
        }
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
}

/// Kernels for one group at one decoder level. Absent branches are `None`.
#[derive(Clone, Debug)]
pub struct DynamicKernelSet<T: Real> {
    pub kind: KernelKind,
    pub c1: usize,
    /// `N×C1×C×1×1`.
    pub adaptive_point: Option<Var<T>>,
    /// `C1×C×1×1`.
    pub common_point: Option<Var<T>>,
    /// `N×C×3×3`, large kind only.
    pub adaptive_depth: Option<Var<T>>,
    /// `C×3×3`, large kind only.
    pub common_depth: Option<Var<T>>,
}

impl<T: Real> DynamicKernelSet<T> {
    pub fn branches(&self) -> Branches {
        Branches { adaptive: self.adaptive_point.is_some(), common: self.common_point.is_some() }
    }

    /// Element count of one generated kernel (one image's adaptive kernel, or
    /// the common kernel).
    pub fn params_per_kernel(&self) -> usize {
        let point = self.adaptive_point.as_ref().or(self.common_point.as_ref());
        let c = point.map_or(0, |v| v.shape()[v.shape().len() - 3]);
        let depth = if self.kind == KernelKind::Large { c * DEPTH_TAPS } else { 0 };
        self.c1 * c + depth
    }

    pub fn is_finite(&self) -> bool {
        [&self.adaptive_point, &self.common_point, &self.adaptive_depth, &self.common_depth]
            .iter()
            .all(|k| k.as_ref().is_none_or(|v| v.value().is_finite()))
    }
}

/// Element count of a dense `C1×C×3×3` kernel.
pub fn naive_large_params(c: usize, c1: usize) -> usize {
    c1 * c * DEPTH_TAPS
}

/// Element count of a separable large kernel.
pub fn separable_large_params(c: usize, c1: usize) -> usize {
    c * DEPTH_TAPS + c1 * c
}

/// Learnable stacks of every kernel generator at one level.
#[derive(Debug)]
pub struct KernelGenParams<T: Real> {
    pub kind: KernelKind,
    pub branches: Branches,
    pub c: usize,
    pub c1: usize,
    /// Feature attention over the 46 pooled features: `46C → hidden → 46`.
    pub alpha: Option<FcStack<T>>,
    /// Adaptive pointwise kernel: `C → C → C1·C`.
    pub adaptive_point: Option<FcStack<T>>,
    /// Common pointwise kernel: `C → C → C1·C`, no BN.
    pub common_point: Option<FcStack<T>>,
    /// Adaptive depthwise kernel: `46 → 46 → 9`.
    pub adaptive_depth: Option<FcStack<T>>,
    /// Channel attention `46C → hidden → C`.
    pub alpha1: Option<FcStack<T>>,
    /// Feature attention `46C → hidden → 46`.
    pub alpha2: Option<FcStack<T>>,
    /// Common depthwise kernel: `46 → 46 → 9`.
    pub common_depth: Option<FcStack<T>>,
}

impl<T: Real> KernelGenParams<T> {
    pub fn new<R: Rng + ?Sized>(
        c: usize,
        c1: usize,
        kind: KernelKind,
        branches: Branches,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if c == 0 || c1 == 0 || hidden == 0 {
            return Err(dim_err!("kernel generator widths must be positive (C={c}, C1={c1}, hidden={hidden})"));
        }
        if branches.count() == 0 {
            return Err(Error::Usage("kernel generator needs at least one branch".into()));
        }
        let f = FEATURES_PER_IMAGE;
        let large = kind == KernelKind::Large;
        let (a, cm) = (branches.adaptive, branches.common);
        use Activation::{PRelu, Relu};
        Ok(KernelGenParams {
            kind,
            branches,
            c,
            c1,
            alpha: a.then(|| FcStack::new(f * c, hidden, f, true, Relu, rng)),
            adaptive_point: a.then(|| FcStack::new(c, c, c1 * c, true, PRelu, rng)),
            common_point: cm.then(|| FcStack::new(c, c, c1 * c, false, PRelu, rng)),
            adaptive_depth: (a && large).then(|| FcStack::new(f, f, DEPTH_TAPS, true, PRelu, rng)),
            alpha1: (cm && large).then(|| FcStack::new(f * c, hidden, c, true, Relu, rng)),
            alpha2: (cm && large).then(|| FcStack::new(f * c, hidden, f, true, Relu, rng)),
            common_depth: (cm && large).then(|| FcStack::new(f, f, DEPTH_TAPS, true, PRelu, rng)),
        })
    }

    /// Generates every enabled kernel.
    pub fn generate(&self, z: &ConsensusFeature<T>, mode: BnMode) -> Result<DynamicKernelSet<T>> {
        self.check(z)?;
        let (adaptive_point, adaptive_depth) = if self.branches.adaptive {
            match self.kind {
                KernelKind::Vanilla => (Some(vanilla_adaptive(z, self, mode)?), None),
                KernelKind::Large => {
                    let (d, p) = large_adaptive(z, self, mode)?;
                    (Some(p), Some(d))
                }
            }
        } else {
            (None, None)
        };
        let (common_point, common_depth) = if self.branches.common {
            match self.kind {
                KernelKind::Vanilla => (Some(vanilla_common(z, self, mode)?), None),
                KernelKind::Large => {
                    let (d, p) = large_common(z, self, mode)?;
                    (Some(p), Some(d))
                }
            }
        } else {
            (None, None)
        };
        Ok(DynamicKernelSet {
            kind: self.kind,
            c1: self.c1,
            adaptive_point,
            common_point,
            adaptive_depth,
            common_depth,
        })
    }

    fn check(&self, z: &ConsensusFeature<T>) -> Result<()> {
        if z.channels() != self.c {
            return Err(dim_err!(
                "consensus feature has {} channels, kernel generator expects {}",
                z.channels(),
                self.c
            ));
        }
        Ok(())
    }
}

fn stack<'a, T: Real>(s: &'a Option<FcStack<T>>, name: &str) -> Result<&'a FcStack<T>> {
    s.as_ref().ok_or_else(|| Error::State(format!("kernel generator was built without the {name} stack")))
}

impl<T: Real> Module<T> for KernelGenParams<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        let stacks = [
            ("alpha", &mut self.alpha),
            ("adaptive_point", &mut self.adaptive_point),
            ("common_point", &mut self.common_point),
            ("adaptive_depth", &mut self.adaptive_depth),
            ("alpha1", &mut self.alpha1),
            ("alpha2", &mut self.alpha2),
            ("common_depth", &mut self.common_depth),
        ];
        for (name, s) in stacks {
            if let Some(s) = s {
                s.visit(&join(prefix, name), f);
            }
        }
    }
}

/// `Z` flattened to `N×46C`.
fn flat<T: Real>(z: &Var<T>) -> Result<Var<T>> {
    let s = z.shape();
    z.reshape(&[s[0], s[1] * s[2]])
}

/// `F_a[n] = Σ_j α[n,j]·Z[n,j,:]` for `α: N×46`.
pub fn adaptive_feature<T: Real>(z: &Var<T>, alpha: &Var<T>) -> Result<Var<T>> {
    let (n, c) = (z.shape()[0], z.shape()[2]);
    alpha.reshape(&[n, 1, FEATURES_PER_IMAGE])?.bmm(z)?.reshape(&[n, c])
}

/// `F_c = Σ_{n,j} W[n,j]·Z[n,j,:]`, returned as `1×C`.
pub fn common_feature<T: Real>(z: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
    let (n, c) = (z.shape()[0], z.shape()[2]);
    let m = n * FEATURES_PER_IMAGE;
    w.reshape(&[1, m])?.matmul(&z.reshape(&[m, c])?)
}

/// `α₃[n] = Σ_j α₂[n,j]·Σ_c α₁[n,c]·Z[n,j,c]`, returned as `N`.
pub fn alpha3<T: Real>(z: &Var<T>, a1: &Var<T>, a2: &Var<T>) -> Result<Var<T>> {
    let (n, c) = (z.shape()[0], z.shape()[2]);
    let per_feature = z.bmm(&a1.reshape(&[n, c, 1])?)?;
    a2.reshape(&[n, 1, FEATURES_PER_IMAGE])?.bmm(&per_feature)?.reshape(&[n])
}

/// `F_dc = Σ_n softmax(α₃)[n]·Z[n]ᵀ`, returned as `C×46`.
pub fn depth_common_feature<T: Real>(z: &Var<T>, a3: &Var<T>) -> Result<Var<T>> {
    let (n, c) = (z.shape()[0], z.shape()[2]);
    let w = a3.reshape(&[1, n])?.softmax(1)?;
    w.matmul(&flat(z)?)?.reshape(&[FEATURES_PER_IMAGE, c])?.permute(&[1, 0])
}

/// Feature attention `α: N×46`, softmax over the 46 axis.
pub fn feature_attention<T: Real>(z: &ConsensusFeature<T>, p: &KernelGenParams<T>, mode: BnMode) -> Result<Var<T>> {
    stack(&p.alpha, "alpha")?.forward(&flat(&z.z)?, mode)?.softmax(1)
}

/// Per-image 1×1 kernels `N×C1×C×1×1`.
pub fn vanilla_adaptive<T: Real>(z: &ConsensusFeature<T>, p: &KernelGenParams<T>, mode: BnMode) -> Result<Var<T>> {
    p.check(z)?;
    let n = z.group_size();
    let alpha = feature_attention(z, p, mode)?;
    let fa = adaptive_feature(&z.z, &alpha)?;
    stack(&p.adaptive_point, "adaptive_point")?.forward(&fa, mode)?.reshape(&[n, p.c1, p.c, 1, 1])
}

/// Group 1×1 kernel `C1×C×1×1`.
pub fn vanilla_common<T: Real>(z: &ConsensusFeature<T>, p: &KernelGenParams<T>, mode: BnMode) -> Result<Var<T>> {
    p.check(z)?;
    let fc = common_feature(&z.z, &z.common_weight)?;
    stack(&p.common_point, "common_point")?.forward(&fc, mode)?.reshape(&[p.c1, p.c, 1, 1])
}

/// Per-image depthwise `N×C×3×3` and pointwise `N×C1×C×1×1` kernels.
pub fn large_adaptive<T: Real>(
    z: &ConsensusFeature<T>,
    p: &KernelGenParams<T>,
    mode: BnMode,
) -> Result<(Var<T>, Var<T>)> {
    let point = vanilla_adaptive(z, p, mode)?;
    let (n, c) = (z.group_size(), p.c);
    let rows = z.z.permute(&[0, 2, 1])?.reshape(&[n * c, FEATURES_PER_IMAGE])?;
    let depth = stack(&p.adaptive_depth, "adaptive_depth")?.forward(&rows, mode)?.reshape(&[n, c, 3, 3])?;
    Ok((depth, point))
}

/// Group depthwise `C×3×3` and pointwise `C1×C×1×1` kernels.
pub fn large_common<T: Real>(
    z: &ConsensusFeature<T>,
    p: &KernelGenParams<T>,
    mode: BnMode,
) -> Result<(Var<T>, Var<T>)> {
    let point = vanilla_common(z, p, mode)?;
    let flat_z = flat(&z.z)?;
    let a1 = stack(&p.alpha1, "alpha1")?.forward(&flat_z, mode)?.softmax(1)?;
    let a2 = stack(&p.alpha2, "alpha2")?.forward(&flat_z, mode)?.softmax(1)?;
    let a3 = alpha3(&z.z, &a1, &a2)?;
    let fdc = depth_common_feature(&z.z, &a3)?;
    let depth = stack(&p.common_depth, "common_depth")?.forward(&fdc, mode)?.reshape(&[p.c, 3, 3])?;
    Ok((depth, point))
}
