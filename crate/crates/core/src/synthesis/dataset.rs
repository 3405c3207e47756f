//! On-disk synthetic dataset builder.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;

use super::blend::{synthesize_normal, synthesize_reverse, Blend, LabeledImage, SynthMode};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::image_io::{list_group_dirs, load_group_dir, write_pgm, write_ppm, GT_SUFFIX};
use crate::{par, rng};

pub const MANIFEST: &str = "manifest.tsv";
/// Donors tried per sample before the sample is skipped.
pub const DONOR_ATTEMPTS: usize = 8;

/// Which synthesis directions to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Modes {
    pub normal: bool,
    pub reverse: bool,
}

impl Modes {
    pub const BOTH: Modes = Modes { normal: true, reverse: true };

    pub fn selected(self) -> Vec<SynthMode> {
        let mut v = Vec::new();
        if self.normal {
            v.push(SynthMode::Normal);
        }
        if self.reverse {
            v.push(SynthMode::Reverse);
        }
        v
    }
}

impl FromStr for Modes {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Modes { normal: true, reverse: false }),
            "reverse" => Ok(Modes { normal: false, reverse: true }),
            "both" => Ok(Modes::BOTH),
            _ => Err(Error::Usage(format!("unknown synthesis mode {s:?} (normal|reverse|both)"))),
        }
    }
}

impl fmt::Display for Modes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match (self.normal, self.reverse) {
            (true, true) => "both",
            (true, false) => "normal",
            (false, true) => "reverse",
            (false, false) => "none",
        })
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ManifestEntry {
    pub group_id: String,
    /// Relative to the dataset root.
    pub image_path: String,
    pub mask_path: String,
    /// `original`, `normal` or `reverse`.
    pub origin: String,
}

impl ManifestEntry {
    fn line(&self) -> String {
        format!("{}\t{}\t{}\t{}\n", self.group_id, self.image_path, self.mask_path, self.origin)
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = String::from_utf8(crate::fsutil::read(path)?).map_err(|_| Error::format(path, "not UTF-8"))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::format(path, format!("expected 4 tab-separated fields: {l:?}")));
            }
            Ok(ManifestEntry {
                group_id: f[0].into(),
                image_path: f[1].into(),
                mask_path: f[2].into(),
                origin: f[3].into(),
            })
        })
        .collect()
}

/// Statistics of one build.
#[derive(Clone, Debug, Default)]
pub struct SynthSummary {
    pub originals: usize,
    pub normal: usize,
    pub reverse: usize,
    pub skipped: usize,
    /// Largest Poisson residual across all emitted blends.
    pub max_residual: f64,
}

struct Corpus {
    classes: Vec<String>,
    images: Vec<Vec<(String, LabeledImage)>>,
}

fn load_corpus(root: &Path) -> Result<Corpus> {
    let dirs = list_group_dirs(root)?;
    let mut corpus = Corpus { classes: Vec::new(), images: Vec::new() };
    for d in dirs {
        let g = load_group_dir(&d)?;
        let mut imgs = Vec::with_capacity(g.len());
        for ((name, rgb), mask) in g.names.into_iter().zip(g.images).zip(g.masks) {
            let mask =
                mask.ok_or_else(|| Error::Data(format!("{}: {name} has no {GT_SUFFIX}.pgm mask", d.display())))?;
            imgs.push((name, LabeledImage::new(rgb, mask, g.name.clone())?));
        }
        corpus.classes.push(g.name);
        corpus.images.push(imgs);
    }
    if corpus.classes.len() < 2 {
        return Err(Error::Usage(format!("synthesis needs at least 2 classes under {}", root.display())));
    }
    Ok(corpus)
}

fn write_sample(out: &Path, class: &str, stem: &str, img: &LabeledImage, origin: &str) -> Result<ManifestEntry> {
    let image_path = format!("{class}/{stem}.ppm");
    let mask_path = format!("{class}/{stem}{GT_SUFFIX}.pgm");
    write_ppm(&out.join(&image_path), &img.rgb)?;
    write_pgm(&out.join(&mask_path), &img.mask)?;
    Ok(ManifestEntry { group_id: class.into(), image_path, mask_path, origin: origin.into() })
}

fn synth_one(
    corpus: &Corpus,
    class: usize,
    target: &LabeledImage,
    mode: SynthMode,
    rng: &mut rng::SeedRng,
) -> Result<Option<Blend>> {
    let n = corpus.classes.len();
    for _ in 0..DONOR_ATTEMPTS {
        let dc = (class + 1 + rng.gen_range(0..n - 1)) % n;
        let pool = &corpus.images[dc];
        let donor = &pool[rng.gen_range(0..pool.len())].1;
        let res = match mode {
            SynthMode::Normal => synthesize_normal(target, donor, rng),
            SynthMode::Reverse => synthesize_reverse(target, donor, rng).map(Some),
        };
        match res {
            Ok(Some(b)) => return Ok(Some(b)),
            // An empty donor object leaves the target untouched; draw another donor.
            Ok(None) => continue,
            Err(Error::Placement(msg)) => log::debug!("{}: {msg}", corpus.classes[class]),
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

/// Builds a synthetic dataset from `corpus_root`, whose subdirectories are
/// classes holding `<name>.ppm` images and `<name>_gt.pgm` masks.
///
/// For every original image and selected mode, `per_image` samples are
/// written next to a copy of the original under `out/<class>/`, and all
/// files are listed in `out/manifest.tsv`.
pub fn build_synth_dataset(
    corpus_root: &Path,
    out: &Path,
    per_image: usize,
    modes: Modes,
    seed: u64,
) -> Result<SynthSummary> {
    let corpus = load_corpus(corpus_root)?;
    let jobs: Vec<(usize, usize)> =
        (0..corpus.classes.len()).flat_map(|c| (0..corpus.images[c].len()).map(move |i| (c, i))).collect();
    let results = par::map_range(jobs.len(), |j| -> Result<(Vec<ManifestEntry>, SynthSummary)> {
        let (c, i) = jobs[j];
        let class = &corpus.classes[c];
        let (name, target) = &corpus.images[c][i];
        let mut entries = vec![write_sample(out, class, name, target, "original")?];
        let mut summary = SynthSummary { originals: 1, ..Default::default() };
        for mode in modes.selected() {
            for k in 0..per_image {
                let mut r = rng::stream(seed, &[c as u64, i as u64, mode as u64, k as u64]);
                match synth_one(&corpus, c, target, mode, &mut r)? {
                    Some(b) => {
                        let stem = format!("{name}_{}{k}", mode.as_str());
                        entries.push(write_sample(out, class, &stem, &b.image, mode.as_str())?);
                        summary.max_residual = summary.max_residual.max(b.clone.residual);
                        match mode {
                            SynthMode::Normal => summary.normal += 1,
                            SynthMode::Reverse => summary.reverse += 1,
                        }
                    }
                    None => {
                        log::warn!("{class}/{name}: no valid {} sample {k}, skipped", mode.as_str());
                        summary.skipped += 1;
                    }
                }
            }
        }
        Ok((entries, summary))
    });
    let mut entries = Vec::new();
    let mut total = SynthSummary::default();
    for r in results {
        let (e, s) = r?;
        entries.extend(e);
        total.originals += s.originals;
        total.normal += s.normal;
        total.reverse += s.reverse;
        total.skipped += s.skipped;
        total.max_residual = total.max_residual.max(s.max_residual);
    }
    entries.sort();
    let text: String = entries.iter().map(ManifestEntry::line).collect();
    atomic_write(&out.join(MANIFEST), text.as_bytes())?;
    Ok(total)
}

/// Writes a toy corpus of `classes` classes with `per_class` images each.
pub fn write_toy_corpus(
    root: &Path,
    classes: usize,
    per_class: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::with_capacity(classes);
    for c in 0..classes {
        let dir = root.join(format!("class{c}"));
        for i in 0..per_class {
            let (rgb, mask) = crate::toy::class_image(c, h, w, rng::mix(seed ^ i as u64));
            write_ppm(&dir.join(format!("img{i}.ppm")), &rgb)?;
            write_pgm(&dir.join(format!("img{i}{GT_SUFFIX}.pgm")), &mask)?;
        }
        dirs.push(dir);
    }
    Ok(dirs)
}
