//! Seamless cloning and the two copy-and-blend directions.

use rand::Rng;

use super::poisson::{laplacian, poisson_solve, PoissonProblem, DEFAULT_TOLERANCE};
use crate::error::{Error, Result};
use crate::image_io::{binarize, resize_bilinear};
use crate::tensor::Tensor;

/// Rejection-sampling attempts per placement.
pub const PLACEMENT_ATTEMPTS: usize = 20;
/// Largest tolerated overlap of the pasted mask with the destination GT, as a
/// fraction of the pasted area.
pub const MAX_OVERLAP: f64 = 0.10;
/// Range of the object scale factor.
pub const SCALE_RANGE: (f64, f64) = (0.5, 1.0);

/// An image with its binary ground truth and class label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `3×H×W` in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `1×H×W`, strictly binary.
    pub mask: Tensor<f32>,
    pub class_id: String,
}

impl LabeledImage {
    pub fn new(rgb: Tensor<f32>, mask: Tensor<f32>, class_id: impl Into<String>) -> Result<Self> {
        let (rs, ms) = (rgb.shape(), mask.shape());
        if rs.len() != 3 || rs[0] != 3 || ms.len() != 3 || ms[0] != 1 || rs[1..] != ms[1..] {
            return Err(Error::Data(format!("labeled image: rgb {rs:?} and mask {ms:?} disagree")));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("labeled image: mask is not binary".into()));
        }
        Ok(LabeledImage { rgb, mask, class_id: class_id.into() })
    }

    pub fn height(&self) -> usize {
        self.rgb.dim(1)
    }

    pub fn width(&self) -> usize {
        self.rgb.dim(2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthMode {
    Normal,
    Reverse,
}

impl SynthMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthMode::Normal => "normal",
            SynthMode::Reverse => "reverse",
        }
    }
}

/// A source object patch: `3×h×w` colors and a `1×h×w` binary mask whose
/// foreground stays at least one pixel away from the patch border.
#[derive(Clone, Debug)]
pub struct Patch {
    pub rgb: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Patch {
    pub fn height(&self) -> usize {
        self.rgb.dim(1)
    }

    pub fn width(&self) -> usize {
        self.rgb.dim(2)
    }

    pub fn area(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v > 0.5).count()
    }
}

/// Outcome of one seamless clone.
#[derive(Clone, Debug)]
pub struct CloneResult {
    /// Target with the region replaced by the clamped solution.
    pub rgb: Tensor<f32>,
    /// Unclamped per-channel solutions over the full target grid.
    pub solutions: Vec<Vec<f64>>,
    /// Region in target coordinates.
    pub region: Vec<bool>,
    /// Largest residual ∞-norm across channels.
    pub residual: f64,
    pub iterations: usize,
}

/// Region of `patch` placed at `(oy, ox)` in an `h×w` target.
pub fn placed_region(patch: &Patch, h: usize, w: usize, oy: usize, ox: usize) -> Result<Vec<bool>> {
    let (ph, pw) = (patch.height(), patch.width());
    if oy + ph > h || ox + pw > w {
        return Err(Error::Placement(format!("{ph}×{pw} patch at ({oy}, {ox}) exceeds the {h}×{w} target")));
    }
    let mut region = vec![false; h * w];
    for y in 0..ph {
        for x in 0..pw {
            if patch.mask.data()[y * pw + x] > 0.5 {
                region[(oy + y) * w + ox + x] = true;
            }
        }
    }
    Ok(region)
}

/// Per-channel guidance: the source Laplacian, placed into target coordinates.
pub fn placed_guidance(patch: &Patch, h: usize, w: usize, oy: usize, ox: usize) -> Vec<Vec<f64>> {
    let (ph, pw) = (patch.height(), patch.width());
    (0..3)
        .map(|c| {
            let src: Vec<f64> = patch.rgb.data()[c * ph * pw..(c + 1) * ph * pw].iter().map(|&v| v as f64).collect();
            let lap = laplacian(&src, ph, pw);
            let mut g = vec![0.0; h * w];
            for y in 0..ph {
                g[(oy + y) * w + ox..(oy + y) * w + ox + pw].copy_from_slice(&lap[y * pw..(y + 1) * pw]);
            }
            g
        })
        .collect()
}

/// Pastes `patch` into `target` (`3×H×W`) with its top-left corner at
/// `(oy, ox)`, solving one Poisson problem per channel.
pub fn seamless_clone(patch: &Patch, target: &Tensor<f32>, oy: usize, ox: usize) -> Result<CloneResult> {
    let (h, w) = (target.dim(1), target.dim(2));
    let region = placed_region(patch, h, w, oy, ox)?;
    let guidance = placed_guidance(patch, h, w, oy, ox);
    let mut rgb = target.clone();
    let mut solutions = Vec::with_capacity(3);
    let (mut residual, mut iterations) = (0.0f64, 0);
    for (c, g) in guidance.iter().enumerate() {
        let plane = &target.data()[c * h * w..(c + 1) * h * w];
        let boundary: Vec<f64> = plane.iter().map(|&v| v as f64).collect();
        let sol = poisson_solve(
            &PoissonProblem { h, w, region: &region, guidance: g, boundary: &boundary },
            DEFAULT_TOLERANCE,
        )?;
        let out = &mut rgb.data_mut()[c * h * w..(c + 1) * h * w];
        for i in (0..h * w).filter(|&i| region[i]) {
            out[i] = sol.values[i].clamp(0.0, 1.0) as f32;
        }
        residual = residual.max(sol.residual);
        iterations = iterations.max(sol.iterations);
        solutions.push(sol.values);
    }
    Ok(CloneResult { rgb, solutions, region, residual, iterations })
}

/// Tight bounding box `(y0, x0, y1, x1)` (exclusive ends) of a `1×H×W` mask.
pub fn bounding_box(mask: &Tensor<f32>) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = (mask.dim(1), mask.dim(2));
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if mask.data()[y * w + x] > 0.5 {
                bb = Some(match bb {
                    None => (y, x, y + 1, x + 1),
                    Some((a, b, c, d)) => (a.min(y), b.min(x), c.max(y + 1), d.max(x + 1)),
                });
            }
        }
    }
    bb
}

fn crop(t: &Tensor<f32>, y0: usize, x0: usize, y1: usize, x1: usize) -> Tensor<f32> {
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    let (oh, ow) = (y1 - y0, x1 - x0);
    let d = t.data();
    Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
        d[(ch * h + y0 + y) * w + x0 + x]
    })
}

/// Pads by one pixel on every side, replicating colors and zeroing the mask.
fn pad_one(rgb: &Tensor<f32>, mask: &Tensor<f32>) -> Patch {
    let (h, w) = (rgb.dim(1), rgb.dim(2));
    let (ph, pw) = (h + 2, w + 2);
    let d = rgb.data();
    let prgb = Tensor::from_fn(&[3, ph, pw], |i| {
        let (c, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
        let sy = y.saturating_sub(1).min(h - 1);
        let sx = x.saturating_sub(1).min(w - 1);
        d[(c * h + sy) * w + sx]
    });
    let m = mask.data();
    let pmask = Tensor::from_fn(&[1, ph, pw], |i| {
        let (y, x) = (i / pw, i % pw);
        if y == 0 || x == 0 || y == ph - 1 || x == pw - 1 {
            0.0
        } else {
            m[(y - 1) * w + x - 1]
        }
    });
    Patch { rgb: prgb, mask: pmask }
}

/// Cuts the salient object of `src` and rescales it for a `dst_h×dst_w`
/// destination. The object keeps its size relative to its own image, times
/// `scale`, and shrinks further if the padded patch would not fit.
pub fn object_patch(src: &LabeledImage, dst_h: usize, dst_w: usize, scale: f64) -> Result<Patch> {
    let (y0, x0, y1, x1) = bounding_box(&src.mask).ok_or_else(|| Error::Data("source mask is empty".into()))?;
    let (bh, bw) = ((y1 - y0) as f64, (x1 - x0) as f64);
    let rel = dst_h.min(dst_w) as f64 / src.height().min(src.width()) as f64;
    let mut f = scale * rel;
    let fit = ((dst_h as f64 - 2.0) / bh).min((dst_w as f64 - 2.0) / bw);
    if f > fit {
        f = fit;
    }
    let oh = ((bh * f).round() as usize).clamp(1, dst_h.saturating_sub(2).max(1));
    let ow = ((bw * f).round() as usize).clamp(1, dst_w.saturating_sub(2).max(1));
    let rgb = resize_bilinear(&crop(&src.rgb, y0, x0, y1, x1), oh, ow)?;
    let mask = binarize(&resize_bilinear(&crop(&src.mask, y0, x0, y1, x1), oh, ow)?);
    let patch = pad_one(&rgb, &mask);
    if patch.area() == 0 {
        return Err(Error::Placement("object vanished after rescaling".into()));
    }
    if patch.height() > dst_h || patch.width() > dst_w {
        return Err(Error::Placement(format!("object patch does not fit a {dst_h}×{dst_w} image")));
    }
    Ok(patch)
}

/// Pixels shared by the placed patch mask and `gt`.
pub fn overlap(patch: &Patch, gt: &Tensor<f32>, oy: usize, ox: usize) -> usize {
    let (pw, w) = (patch.width(), gt.dim(2));
    let mut n = 0;
    for y in 0..patch.height() {
        for x in 0..pw {
            if patch.mask.data()[y * pw + x] > 0.5 && gt.data()[(oy + y) * w + ox + x] > 0.5 {
                n += 1;
            }
        }
    }
    n
}

/// A finished blend together with its placement.
#[derive(Clone, Debug)]
pub struct Blend {
    pub image: LabeledImage,
    pub patch: Patch,
    pub offset: (usize, usize),
    pub scale: f64,
    pub clone: CloneResult,
}

fn place_and_clone<R: Rng + ?Sized>(
    src: &LabeledImage,
    dst: &LabeledImage,
    rng: &mut R,
) -> Result<(Patch, (usize, usize), f64, CloneResult)> {
    let (h, w) = (dst.height(), dst.width());
    let scale = rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    let patch = object_patch(src, h, w, scale)?;
    let area = patch.area() as f64;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let oy = rng.gen_range(0..=h - patch.height());
        let ox = rng.gen_range(0..=w - patch.width());
        if overlap(&patch, &dst.mask, oy, ox) as f64 <= MAX_OVERLAP * area {
            let clone = seamless_clone(&patch, &dst.rgb, oy, ox)?;
            return Ok((patch, (oy, ox), scale, clone));
        }
    }
    Err(Error::Placement(format!("no placement within {PLACEMENT_ATTEMPTS} attempts keeps overlap ≤ {MAX_OVERLAP}")))
}

fn check_classes(target: &LabeledImage, donor: &LabeledImage) -> Result<()> {
    if target.class_id == donor.class_id {
        return Err(Error::Usage(format!("donor and target share class {}", target.class_id)));
    }
    Ok(())
}

/// Pastes the donor's object into the target as a distractor; the target GT
/// is kept. An empty donor mask yields the target unchanged.
pub fn synthesize_normal<R: Rng + ?Sized>(
    target: &LabeledImage,
    donor: &LabeledImage,
    rng: &mut R,
) -> Result<Option<Blend>> {
    check_classes(target, donor)?;
    if bounding_box(&donor.mask).is_none() {
        return Ok(None);
    }
    let (patch, offset, scale, clone) = place_and_clone(donor, target, rng)?;
    let image = LabeledImage { rgb: clone.rgb.clone(), mask: target.mask.clone(), class_id: target.class_id.clone() };
    Ok(Some(Blend { image, patch, offset, scale, clone }))
}

/// Pastes the target's object into the donor image; the GT becomes the pasted
/// mask.
pub fn synthesize_reverse<R: Rng + ?Sized>(target: &LabeledImage, donor: &LabeledImage, rng: &mut R) -> Result<Blend> {
    check_classes(target, donor)?;
    if bounding_box(&target.mask).is_none() {
        return Err(Error::Data("target mask is empty: nothing to paste".into()));
    }
    let (patch, offset, scale, clone) = place_and_clone(target, donor, rng)?;
    let (h, w) = (donor.height(), donor.width());
    let mask = Tensor::from_fn(&[1, h, w], |i| if clone.region[i] { 1.0 } else { 0.0 });
    let image = LabeledImage { rgb: clone.rgb.clone(), mask, class_id: target.class_id.clone() };
    Ok(Blend { image, patch, offset, scale, clone })
}
