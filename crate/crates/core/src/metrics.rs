//! Saliency evaluation: MAE, max F-measure, S-measure and E-measure.
//!
//! Maps are `1×H×W` tensors; predictions lie in `[0, 1]`, ground truth is
//! binary. Thresholds are `k/255` for `k = 0..=255` and a pixel is
//! foreground at threshold `t` when `pred > t`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{dim_err, Error, Result};
use crate::image_io::{binarize, read_pgm, GT_SUFFIX};
use crate::par;
use crate::tensor::Tensor;

pub const THRESHOLDS: usize = 256;
pub const BETA2: f64 = 0.3;

/// Guard in the structural and alignment ratios (machine epsilon).
const EPS: f64 = f64::EPSILON;

/// A prediction and its ground truth.
#[derive(Clone, Copy, Debug)]
pub struct EvalPair<'a> {
    pub pred: &'a Tensor<f32>,
    pub gt: &'a Tensor<f32>,
}

impl<'a> EvalPair<'a> {
    pub fn new(pred: &'a Tensor<f32>, gt: &'a Tensor<f32>) -> Result<Self> {
        if pred.shape() != gt.shape() {
            return Err(dim_err!("prediction {:?} and ground truth {:?} differ", pred.shape(), gt.shape()));
        }
        if let Some(v) = gt.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("ground truth value {v} is not binary")));
        }
        Ok(EvalPair { pred, gt })
    }

    fn size(&self) -> (usize, usize) {
        let s = self.gt.shape();
        (s[s.len() - 2], s[s.len() - 1])
    }
}

pub fn mae(p: EvalPair) -> f64 {
    let n = p.pred.len() as f64;
    p.pred.data().iter().zip(p.gt.data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>() / n
}

/// Number of thresholds `k/255` strictly below `v`.
pub fn threshold_count(v: f32) -> usize {
    let v = v as f64;
    let mut c = (v * 255.0).ceil().clamp(0.0, THRESHOLDS as f64) as usize;
    while c > 0 && v <= (c - 1) as f64 / 255.0 {
        c -= 1;
    }
    while c < THRESHOLDS && v > c as f64 / 255.0 {
        c += 1;
    }
    c
}

/// Confusion counts of one image at every threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub positives: u64,
    pub total: u64,
}

impl ThresholdCounts {
    pub fn new(p: EvalPair) -> Self {
        let mut fg_hist = [0u64; THRESHOLDS + 1];
        let mut bg_hist = [0u64; THRESHOLDS + 1];
        for (&pv, &g) in p.pred.data().iter().zip(p.gt.data()) {
            let c = threshold_count(pv);
            if g > 0.5 {
                fg_hist[c] += 1;
            } else {
                bg_hist[c] += 1;
            }
        }
        // A pixel with count c is foreground at thresholds k < c.
        let mut tp = vec![0u64; THRESHOLDS];
        let mut fp = vec![0u64; THRESHOLDS];
        let (mut acc_t, mut acc_f) = (0, 0);
        for k in (0..THRESHOLDS).rev() {
            acc_t += fg_hist[k + 1];
            acc_f += bg_hist[k + 1];
            tp[k] = acc_t;
            fp[k] = acc_f;
        }
        let positives = fg_hist.iter().sum();
        let total = positives + bg_hist.iter().sum::<u64>();
        ThresholdCounts { tp, fp, positives, total }
    }

    pub fn precision(&self, k: usize) -> f64 {
        let d = self.tp[k] + self.fp[k];
        if d == 0 {
            0.0
        } else {
            self.tp[k] as f64 / d as f64
        }
    }

    pub fn recall(&self, k: usize) -> f64 {
        if self.positives == 0 {
            0.0
        } else {
            self.tp[k] as f64 / self.positives as f64
        }
    }

    /// Mean enhanced alignment at threshold `k`.
    pub fn e_at(&self, k: usize) -> f64 {
        let n = self.total as f64;
        let (tp, fp) = (self.tp[k] as f64, self.fp[k] as f64);
        let pos = self.positives as f64;
        let mean_pred = (tp + fp) / n;
        if self.positives == 0 {
            return 1.0 - mean_pred;
        }
        if self.positives == self.total {
            return mean_pred;
        }
        let mean_gt = pos / n;
        let fn_ = pos - tp;
        let tn = n - pos - fp;
        let enhanced = |fm: f64, g: f64| {
            let (a, b) = (fm - mean_pred, g - mean_gt);
            let xi = 2.0 * a * b / (a * a + b * b + EPS);
            (xi + 1.0) * (xi + 1.0) / 4.0
        };
        (tp * enhanced(1.0, 1.0) + fp * enhanced(1.0, 0.0) + fn_ * enhanced(0.0, 1.0) + tn * enhanced(0.0, 0.0)) / n
    }

    pub fn e_curve(&self) -> Vec<f64> {
        (0..THRESHOLDS).map(|k| self.e_at(k)).collect()
    }
}

/// `(1+β²)PR / (β²P + R)`, zero when both vanish.
pub fn f_measure(p: f64, r: f64) -> f64 {
    let d = BETA2 * p + r;
    if d == 0.0 {
        0.0
    } else {
        (1.0 + BETA2) * p * r / d
    }
}

/// F-measure at every threshold from image-averaged precision and recall.
pub fn f_curve(counts: &[ThresholdCounts]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::Usage("max_f needs at least one pair".into()));
    }
    let n = counts.len() as f64;
    Ok((0..THRESHOLDS)
        .map(|k| {
            let p = counts.iter().map(|c| c.precision(k)).sum::<f64>() / n;
            let r = counts.iter().map(|c| c.recall(k)).sum::<f64>() / n;
            f_measure(p, r)
        })
        .collect())
}

pub fn max_f(pairs: &[EvalPair]) -> Result<f64> {
    let counts: Vec<ThresholdCounts> = pairs.iter().map(|&p| ThresholdCounts::new(p)).collect();
    Ok(f_curve(&counts)?.into_iter().fold(0.0, f64::max))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EMode {
    Mean,
    #[default]
    Max,
}

impl FromStr for EMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(EMode::Mean),
            "max" => Ok(EMode::Max),
            _ => Err(Error::Usage(format!("unknown e-mode `{s}` (mean|max)"))),
        }
    }
}

impl fmt::Display for EMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if *self == EMode::Mean { "mean" } else { "max" })
    }
}

fn reduce_curve(curve: &[f64], mode: EMode) -> f64 {
    match mode {
        EMode::Max => curve.iter().cloned().fold(0.0, f64::max),
        EMode::Mean => curve.iter().sum::<f64>() / curve.len() as f64,
    }
}

pub fn e_measure(p: EvalPair) -> f64 {
    e_measure_with(p, EMode::Max)
}

pub fn e_measure_with(p: EvalPair, mode: EMode) -> f64 {
    reduce_curve(&ThresholdCounts::new(p).e_curve(), mode)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 { (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (m, s)
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let (x, sigma) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

/// SSIM-style similarity of one quadrant.
fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let x = pred.iter().sum::<f64>() / n;
    let y = gt.iter().sum::<f64>() / n;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        sx += (p - x) * (p - x);
        sy += (g - y) * (g - y);
        sxy += (p - x) * (g - y);
    }
    let d = n - 1.0 + EPS;
    let (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Split column and row: the rounded foreground centroid plus one, or the
/// rounded centre when there is no foreground.
pub fn centroid(gt: &[f64], h: usize, w: usize) -> (usize, usize) {
    let (mut sy, mut sx, mut cnt) = (0.0, 0.0, 0usize);
    for (i, &g) in gt.iter().enumerate() {
        if g > 0.5 {
            sy += (i / w) as f64;
            sx += (i % w) as f64;
            cnt += 1;
        }
    }
    if cnt == 0 {
        ((w as f64 / 2.0).round_ties_even() as usize, (h as f64 / 2.0).round_ties_even() as usize)
    } else {
        let n = cnt as f64;
        ((sx / n).round_ties_even() as usize + 1, (sy / n).round_ties_even() as usize + 1)
    }
}

fn region_score(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    let (cx, cy) = centroid(gt, h, w);
    let (cx, cy) = (cx.min(w), cy.min(h));
    let area = (h * w) as f64;
    let quads = [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)];
    let mut total = 0.0;
    for (y0, y1, x0, x1) in quads {
        if y1 <= y0 || x1 <= x0 {
            continue;
        }
        let mut p = Vec::with_capacity((y1 - y0) * (x1 - x0));
        let mut g = Vec::with_capacity(p.capacity());
        for y in y0..y1 {
            p.extend_from_slice(&pred[y * w + x0..y * w + x1]);
            g.extend_from_slice(&gt[y * w + x0..y * w + x1]);
        }
        total += ((y1 - y0) * (x1 - x0)) as f64 / area * ssim(&p, &g);
    }
    total
}

pub fn s_measure(p: EvalPair) -> f64 {
    let (h, w) = p.size();
    let pred: Vec<f64> = p.pred.data().iter().map(|&v| v as f64).collect();
    let gt: Vec<f64> = p.gt.data().iter().map(|&v| v as f64).collect();
    let n = pred.len() as f64;
    let y = gt.iter().sum::<f64>() / n;
    if y == 0.0 {
        return 1.0 - pred.iter().sum::<f64>() / n;
    }
    if y == 1.0 {
        return pred.iter().sum::<f64>() / n;
    }
    let fg: Vec<f64> = pred.iter().zip(&gt).filter(|(_, &g)| g > 0.5).map(|(&v, _)| v).collect();
    let bg: Vec<f64> = pred.iter().zip(&gt).filter(|(_, &g)| g <= 0.5).map(|(&v, _)| 1.0 - v).collect();
    let object = y * object_score(&fg) + (1.0 - y) * object_score(&bg);
    let region = region_score(&pred, &gt, h, w);
    (0.5 * object + 0.5 * region).max(0.0)
}

/// Scores of one image.
#[derive(Clone, Debug)]
pub struct ImageScores {
    pub s: f64,
    pub mae: f64,
    pub counts: ThresholdCounts,
}

impl ImageScores {
    pub fn new(p: EvalPair) -> Self {
        ImageScores { s: s_measure(p), mae: mae(p), counts: ThresholdCounts::new(p) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupScores {
    pub group: String,
    pub count: usize,
    pub s_measure: f64,
    pub max_f: f64,
    pub e_measure: f64,
    pub mae: f64,
}

impl GroupScores {
    pub fn from_images(group: &str, images: &[ImageScores], mode: EMode) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Usage(format!("group `{group}` has no images")));
        }
        let n = images.len() as f64;
        let counts: Vec<ThresholdCounts> = images.iter().map(|i| i.counts.clone()).collect();
        let max_f = f_curve(&counts)?.into_iter().fold(0.0, f64::max);
        let e_curve: Vec<f64> =
            (0..THRESHOLDS).map(|k| images.iter().map(|i| i.counts.e_at(k)).sum::<f64>() / n).collect();
        Ok(GroupScores {
            group: group.to_string(),
            count: images.len(),
            s_measure: images.iter().map(|i| i.s).sum::<f64>() / n,
            max_f,
            e_measure: reduce_curve(&e_curve, mode),
            mae: images.iter().map(|i| i.mae).sum::<f64>() / n,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub groups: Vec<GroupScores>,
    pub overall: GroupScores,
}

impl MetricReport {
    /// Overall values are image-count-weighted means of the group values.
    pub fn from_groups(groups: Vec<GroupScores>) -> Result<Self> {
        let total: usize = groups.iter().map(|g| g.count).sum();
        if total == 0 {
            return Err(Error::Data("no images were evaluated".into()));
        }
        let t = total as f64;
        let wmean = |f: fn(&GroupScores) -> f64| groups.iter().map(|g| f(g) * g.count as f64).sum::<f64>() / t;
        let overall = GroupScores {
            group: "ALL".into(),
            count: total,
            s_measure: wmean(|g| g.s_measure),
            max_f: wmean(|g| g.max_f),
            e_measure: wmean(|g| g.e_measure),
            mae: wmean(|g| g.mae),
        };
        Ok(MetricReport { groups, overall })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,count,smeasure,maxf,emeasure,mae\n");
        for g in self.groups.iter().chain(std::iter::once(&self.overall)) {
            s +=
                &format!("{},{},{:.6},{:.6},{:.6},{:.6}\n", g.group, g.count, g.s_measure, g.max_f, g.e_measure, g.mae);
        }
        s
    }
}

/// Ground-truth maps under `gt_dir`, grouped by subdirectory (or a single
/// group when `gt_dir` holds `.pgm` files directly). The image name drops a
/// trailing `_gt`.
fn collect_gt(gt_dir: &Path) -> Result<BTreeMap<String, Vec<(String, PathBuf)>>> {
    let list = |d: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> =
            std::fs::read_dir(d).map_err(|e| Error::io(d, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        v.sort();
        Ok(v)
    };
    let is_pgm = |p: &Path| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let entries = list(gt_dir)?;
    let mut dirs: Vec<(String, PathBuf)> = Vec::new();
    if entries.iter().any(|p| is_pgm(p)) {
        dirs.push((String::new(), gt_dir.to_path_buf()));
    }
    for d in entries.iter().filter(|p| p.is_dir()) {
        dirs.push((d.file_name().unwrap().to_string_lossy().into_owned(), d.clone()));
    }
    let mut out = BTreeMap::new();
    for (group, d) in dirs {
        let files: Vec<(String, PathBuf)> = list(&d)?
            .into_iter()
            .filter(|p| is_pgm(p))
            .map(|p| {
                let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
                (stem.strip_suffix(GT_SUFFIX).unwrap_or(&stem).to_string(), p)
            })
            .collect();
        if !files.is_empty() {
            out.insert(group, files);
        }
    }
    Ok(out)
}

/// Scores every ground-truth map against `<pred_dir>/<group>/<name>.pgm`.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path, mode: EMode) -> Result<MetricReport> {
    let gt = collect_gt(gt_dir)?;
    if gt.is_empty() {
        return Err(Error::Data(format!("no ground-truth maps under {}", gt_dir.display())));
    }
    let mut jobs: Vec<(String, PathBuf, PathBuf)> = Vec::new();
    let mut missing = Vec::new();
    for (group, files) in &gt {
        for (name, gpath) in files {
            let ppath = pred_dir.join(group).join(format!("{name}.pgm"));
            if ppath.is_file() {
                jobs.push((group.clone(), ppath, gpath.clone()));
            } else {
                missing.push(ppath.display().to_string());
            }
        }
    }
    if jobs.is_empty() {
        return Err(Error::Data(format!("no predictions in {} match {}", pred_dir.display(), gt_dir.display())));
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing predictions: {}", missing.join(", "))));
    }
    let scores = par::map_range(jobs.len(), |i| -> Result<ImageScores> {
        let (_, ppath, gpath) = &jobs[i];
        let pred = read_pgm(ppath)?;
        let gtm = binarize(&read_pgm(gpath)?);
        if pred.shape() != gtm.shape() {
            return Err(Error::Data(format!(
                "{} is {:?} but {} is {:?}",
                ppath.display(),
                pred.shape(),
                gpath.display(),
                gtm.shape()
            )));
        }
        Ok(ImageScores::new(EvalPair::new(&pred, &gtm)?))
    });
    let mut per_group: BTreeMap<String, Vec<ImageScores>> = BTreeMap::new();
    for ((group, ..), s) in jobs.iter().zip(scores) {
        per_group.entry(group.clone()).or_default().push(s?);
    }
    let groups = per_group
        .iter()
        .map(|(g, imgs)| GroupScores::from_images(if g.is_empty() { "root" } else { g }, imgs, mode))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_groups(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(h: usize, w: usize, v: &[f32]) -> Tensor<f32> {
        Tensor::new(&[1, h, w], v.to_vec()).unwrap()
    }

    #[test]
    fn threshold_count_matches_direct_comparison() {
        for v in [0.0f32, 1e-9, 0.5, 1.0 / 255.0, 128.0 / 255.0, 0.999, 1.0] {
            let direct = (0..THRESHOLDS).filter(|&k| v as f64 > k as f64 / 255.0).count();
            assert_eq!(threshold_count(v), direct, "v={v}");
        }
    }

    #[test]
    fn mae_cases() {
        let gt = t(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let inv = gt.map(|v| 1.0 - v);
        let half = Tensor::full(&[1, 2, 2], 0.5);
        assert_eq!(mae(EvalPair::new(&gt, &gt).unwrap()), 0.0);
        assert_eq!(mae(EvalPair::new(&inv, &gt).unwrap()), 1.0);
        assert_eq!(mae(EvalPair::new(&half, &gt).unwrap()), 0.5);
    }

    #[test]
    fn max_f_closed_forms() {
        let gt = t(2, 4, &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let ones = Tensor::full(&[1, 2, 4], 1.0);
        let r = 3.0 / 8.0;
        let f = max_f(&[EvalPair::new(&ones, &gt).unwrap()]).unwrap();
        assert!((f - 1.3 * r / (0.3 * r + 1.0)).abs() < 1e-9);
        assert_eq!(max_f(&[EvalPair::new(&gt, &gt).unwrap()]).unwrap(), 1.0);
        let zeros = Tensor::zeros(&[1, 2, 4]);
        assert_eq!(max_f(&[EvalPair::new(&zeros, &gt).unwrap()]).unwrap(), 0.0);
        assert!(max_f(&[]).is_err());
    }

    #[test]
    fn s_measure_cases() {
        let gt = t(3, 3, &[0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        assert!((s_measure(EvalPair::new(&gt, &gt).unwrap()) - 1.0).abs() < 1e-6);
        let bg = Tensor::zeros(&[1, 3, 3]);
        assert_eq!(s_measure(EvalPair::new(&bg, &bg).unwrap()), 1.0);
        let fg = Tensor::full(&[1, 3, 3], 1.0);
        let half = Tensor::full(&[1, 3, 3], 0.5);
        assert_eq!(s_measure(EvalPair::new(&half, &fg).unwrap()), 0.5);
    }

    #[test]
    fn e_measure_cases() {
        let gt = t(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        assert!((e_measure(EvalPair::new(&gt, &gt).unwrap()) - 1.0).abs() < 1e-12);
        let inv = gt.map(|v| 1.0 - v);
        let c = ThresholdCounts::new(EvalPair::new(&inv, &gt).unwrap());
        assert!(c.e_at(128).abs() < 1e-12);
    }

    #[test]
    fn non_binary_gt_rejected() {
        let p = Tensor::zeros(&[1, 1, 2]);
        let g = t(1, 2, &[0.5, 1.0]);
        assert!(EvalPair::new(&p, &g).is_err());
        assert!(EvalPair::new(&p, &Tensor::zeros(&[1, 2, 1])).is_err());
    }

    #[test]
    fn weighted_overall() {
        let g = |name: &str, count, mae| GroupScores {
            group: name.into(),
            count,
            s_measure: 1.0,
            max_f: 1.0,
            e_measure: 1.0,
            mae,
        };
        let r = MetricReport::from_groups(vec![g("a", 2, 0.1), g("b", 4, 0.4)]).unwrap();
        assert!((r.overall.mae - 0.3).abs() < 1e-12);
        let csv = r.to_csv();
        assert!(csv.starts_with("group,count,smeasure,maxf,emeasure,mae\n"));
        assert!(csv.trim_end().ends_with("ALL,6,1.000000,1.000000,1.000000,0.300000"));
    }
}
