//! PPM/PGM reading and writing, bilinear resizing and image-group loading.
//!
//! Color images are binary PPM (P6), masks and saliency maps binary PGM
//! (P5), both 8-bit; values map linearly to `[0, 1]` by `/255`.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{dim_err, Error, Result};
use crate::fsutil;
use crate::tensor::Tensor;

/// Suffix marking a ground-truth mask next to its image.
pub const GT_SUFFIX: &str = "_gt";

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fsutil::read(path)?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Pnm).map_err(|e| Error::format(path, e.to_string()))
}

/// `3×H×W` in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    }))
}

/// `1×H×W` in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let img = decode(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(&[1, h, w], |i| img.as_raw()[i] as f32 / 255.0))
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(bytes: &[u8], w: usize, h: usize, color: ExtendedColorType, sub: PnmSubtype) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PnmEncoder::new(Cursor::new(&mut buf))
        .with_subtype(sub)
        .write_image(bytes, w as u32, h as u32, color)
        .map_err(|e| Error::Data(format!("pnm encoding failed: {e}")))?;
    Ok(buf)
}

pub fn write_ppm(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(dim_err!("write_ppm: need 3×H×W, got {s:?}"));
    }
    let (h, w) = (s[1], s[2]);
    let raw: Vec<u8> = (0..h * w * 3).map(|i| quantize(t.data()[(i % 3) * h * w + i / 3])).collect();
    let bytes = encode(&raw, w, h, ExtendedColorType::Rgb8, PnmSubtype::Pixmap(SampleEncoding::Binary))?;
    fsutil::atomic_write(path, &bytes)
}

pub fn write_pgm(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(dim_err!("write_pgm: need 1×H×W, got {s:?}"));
    }
    let raw: Vec<u8> = t.data().iter().map(|&v| quantize(v)).collect();
    let bytes = encode(&raw, s[2], s[1], ExtendedColorType::L8, PnmSubtype::Graymap(SampleEncoding::Binary))?;
    fsutil::atomic_write(path, &bytes)
}

/// Bilinear resize of `C×H×W` to `C×oh×ow`, align-corners=false.
pub fn resize_bilinear(t: &Tensor<f32>, oh: usize, ow: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    if s.len() != 3 || oh == 0 || ow == 0 {
        return Err(dim_err!("resize: need C×H×W and a positive target, got {s:?} → {oh}×{ow}"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (oh, ow) {
        return Ok(t.clone());
    }
    let taps = |src: usize, dst: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|d| {
                let x = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (x.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, (x - i0 as f64) as f32)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let d = t.data();
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[x];
        let at = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }))
}

/// Thresholds at 0.5.
pub fn binarize(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| if v > 0.5 { 1.0 } else { 0.0 })
}

/// Images of one group with their optional masks, at original sizes.
#[derive(Clone, Debug)]
pub struct ImageGroup {
    pub name: String,
    pub names: Vec<String>,
    /// `3×H×W` each.
    pub images: Vec<Tensor<f32>>,
    /// `1×H×W` each, when a `<name>_gt.pgm` exists.
    pub masks: Vec<Option<Tensor<f32>>>,
}

impl ImageGroup {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(H, W)` of image `i`.
    pub fn size_of(&self, i: usize) -> (usize, usize) {
        let s = self.images[i].shape();
        (s[1], s[2])
    }

    /// `N×3×R×R` batch of all images resized to `res`.
    pub fn to_batch(&self, res: usize) -> Result<Tensor<f32>> {
        if self.is_empty() {
            return Err(Error::Usage(format!("group `{}` has no images", self.name)));
        }
        let mut data = Vec::with_capacity(self.len() * 3 * res * res);
        for img in &self.images {
            data.extend_from_slice(resize_bilinear(img, res, res)?.data());
        }
        Tensor::new(&[self.len(), 3, res, res], data)
    }

    /// `N×1×R×R` binary masks resized to `res`; `None` unless every image has one.
    pub fn mask_batch(&self, res: usize) -> Result<Option<Tensor<f32>>> {
        if self.is_empty() || self.masks.iter().any(Option::is_none) {
            return Ok(None);
        }
        let mut data = Vec::with_capacity(self.len() * res * res);
        for m in self.masks.iter().flatten() {
            data.extend_from_slice(binarize(&resize_bilinear(m, res, res)?).data());
        }
        Ok(Some(Tensor::new(&[self.len(), 1, res, res], data)?))
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

fn has_ext(p: &Path, ext: &str) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// Loads `<dir>/<name>.ppm` files (sorted by name) with optional
/// `<dir>/<name>_gt.pgm` masks.
pub fn load_group_dir(dir: &Path) -> Result<ImageGroup> {
    let mut group = ImageGroup {
        name: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        names: Vec::new(),
        images: Vec::new(),
        masks: Vec::new(),
    };
    for p in sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && has_ext(p, "ppm")) {
        let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
        let img = read_ppm(&p)?;
        let gt_path = dir.join(format!("{stem}{GT_SUFFIX}.pgm"));
        let mask = if gt_path.is_file() {
            let m = read_pgm(&gt_path)?;
            if m.shape()[1..] != img.shape()[1..] {
                return Err(Error::Data(format!("{} does not match the size of {}", gt_path.display(), p.display())));
            }
            Some(binarize(&m))
        } else {
            None
        };
        group.names.push(stem);
        group.images.push(img);
        group.masks.push(mask);
    }
    if group.is_empty() {
        return Err(Error::Data(format!("no .ppm images in {}", dir.display())));
    }
    Ok(group)
}

/// Groups under `root`: every subdirectory holding `.ppm` files, or `root`
/// itself when it holds them directly.
pub fn list_group_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = sorted_entries(root)?;
    if entries.iter().any(|p| p.is_file() && has_ext(p, "ppm")) {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for d in entries.into_iter().filter(|p| p.is_dir()) {
        if sorted_entries(&d)?.iter().any(|p| p.is_file() && has_ext(p, "ppm")) {
            dirs.push(d);
        }
    }
    if dirs.is_empty() {
        return Err(Error::Data(format!("no image groups under {}", root.display())));
    }
    Ok(dirs)
}
