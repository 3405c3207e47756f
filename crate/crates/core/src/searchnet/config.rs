use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernelgen::{Branches, KernelKind, ATTENTION_HIDDEN};

/// Encoder stages (and decoders).
pub const LEVELS: usize = 6;

/// Decoders eligible for dynamic convolution (the deepest four).
pub const MAX_CADC_LEVELS: usize = 4;

pub const DEFAULT_WIDTHS: [usize; LEVELS] = [16, 32, 64, 64, 96, 128];

/// Smallest spatial size the pyramid pooling accepts.
const MIN_POOLED_SIZE: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Output channels of encoder stages 1..=6.
    pub widths: Vec<usize>,
    /// Dynamic-search output channels for decoders 1..=4; `None` uses the
    /// width of the paired encoder stage.
    pub c1: Option<Vec<usize>>,
    pub kernel_kind: KernelKind,
    pub branches: Branches,
    /// Number of decoders (deepest first) that use dynamic convolution.
    pub cadc_levels: usize,
    pub resolution: usize,
    pub attention_hidden: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            widths: DEFAULT_WIDTHS.to_vec(),
            c1: None,
            kernel_kind: KernelKind::Large,
            branches: Branches::BOTH,
            cadc_levels: MAX_CADC_LEVELS,
            resolution: 256,
            attention_hidden: ATTENTION_HIDDEN,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        if self.widths.len() != LEVELS || self.widths.contains(&0) {
            return bad(format!("widths must be {LEVELS} positive values, got {:?}", self.widths));
        }
        if self.resolution == 0 || !self.resolution.is_multiple_of(32) {
            return bad(format!("resolution {} is not a positive multiple of 32", self.resolution));
        }
        if self.cadc_levels > MAX_CADC_LEVELS {
            return bad(format!("cadc_levels {} exceeds {MAX_CADC_LEVELS}", self.cadc_levels));
        }
        if self.branches.count() == 0 {
            return bad("at least one kernel branch is required".into());
        }
        if self.attention_hidden == 0 {
            return bad("attention_hidden must be positive".into());
        }
        if self.cadc_levels > 0 {
            if self.resolution / 32 < MIN_POOLED_SIZE {
                return bad(format!(
                    "resolution {} leaves the deepest level below {MIN_POOLED_SIZE}×{MIN_POOLED_SIZE}; use at least {}",
                    self.resolution,
                    32 * MIN_POOLED_SIZE
                ));
            }
            for d in 0..self.cadc_levels {
                let w = self.widths[encoder_stage(d)];
                if !w.is_multiple_of(2) {
                    return bad(format!("decoder {} width {w} must be even for attention", d + 1));
                }
            }
        }
        if let Some(c1) = &self.c1 {
            if c1.len() != MAX_CADC_LEVELS || c1.contains(&0) {
                return bad(format!("c1 must be {MAX_CADC_LEVELS} positive values, got {c1:?}"));
            }
        }
        Ok(())
    }

    /// Encoder stage width paired with decoder `d` (0-based, deepest first).
    pub fn decoder_width(&self, d: usize) -> usize {
        self.widths[encoder_stage(d)]
    }

    /// Dynamic-search output width of decoder `d`.
    pub fn c1_for(&self, d: usize) -> usize {
        self.c1.as_ref().map_or(self.decoder_width(d), |c| c[d])
    }

    /// Spatial size at encoder stage `s` (0-based).
    pub fn stage_size(&self, s: usize) -> usize {
        self.resolution >> s
    }

    pub fn is_cadc(&self, d: usize) -> bool {
        d < self.cadc_levels
    }

    /// `key = value` lines understood by [`NetworkConfig::apply`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        s += &format!("widths = {}\n", list(&self.widths));
        if let Some(c1) = &self.c1 {
            s += &format!("c1 = {}\n", list(c1));
        }
        s += &format!("kernel_kind = {}\n", self.kernel_kind);
        s += &format!("branches = {}\n", self.branches);
        s += &format!("cadc_levels = {}\n", self.cadc_levels);
        s += &format!("resolution = {}\n", self.resolution);
        s += &format!("attention_hidden = {}\n", self.attention_hidden);
        s += &format!("seed = {}\n", self.seed);
        s
    }

    /// Sets one field from its textual form.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<usize> {
            v.trim().parse().map_err(|_| Error::Usage(format!("`{key}` expects an integer, got `{v}`")))
        };
        let list = |v: &str| -> Result<Vec<usize>> { v.split(',').map(num).collect() };
        match key {
            "widths" => self.widths = list(value)?,
            "c1" => self.c1 = Some(list(value)?),
            "kernel_kind" => self.kernel_kind = value.parse()?,
            "branches" => self.branches = value.parse()?,
            "cadc_levels" => self.cadc_levels = num(value)?,
            "resolution" => self.resolution = num(value)?,
            "attention_hidden" => self.attention_hidden = num(value)?,
            "seed" => {
                self.seed = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::Usage(format!("`seed` expects an integer, got `{value}`")))?
            }
            _ => return Err(Error::Usage(format!("unknown network key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = NetworkConfig::default();
        for (k, v) in parse_key_values(text)? {
            cfg.apply(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Encoder stage (0-based) paired with decoder `d` (0-based, deepest first).
pub fn encoder_stage(d: usize) -> usize {
    LEVELS - 1 - d
}

/// Parses `key = value` lines with `#` comments. Later keys override earlier ones.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Usage(format!("line {}: empty key", i + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Ablation rows: the plain U-shaped baseline, each single kernel type at
/// the deepest decoder, both large kernels there, and both large kernels at
/// all four CADC decoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Baseline,
    Vak,
    Vck,
    Lak,
    Lck,
    LakLck,
    Ml,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Baseline,
        Ablation::Vak,
        Ablation::Vck,
        Ablation::Lak,
        Ablation::Lck,
        Ablation::LakLck,
        Ablation::Ml,
    ];

    pub fn apply(self, cfg: &mut NetworkConfig) {
        let (kind, branches, levels) = match self {
            Ablation::Baseline => (cfg.kernel_kind, cfg.branches, 0),
            Ablation::Vak => (KernelKind::Vanilla, Branches::ADAPTIVE, 1),
            Ablation::Vck => (KernelKind::Vanilla, Branches::COMMON, 1),
            Ablation::Lak => (KernelKind::Large, Branches::ADAPTIVE, 1),
            Ablation::Lck => (KernelKind::Large, Branches::COMMON, 1),
            Ablation::LakLck => (KernelKind::Large, Branches::BOTH, 1),
            Ablation::Ml => (KernelKind::Large, Branches::BOTH, MAX_CADC_LEVELS),
        };
        cfg.kernel_kind = kind;
        cfg.branches = branches;
        cfg.cadc_levels = levels;
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Usage(format!("unknown ablation `{s}` (baseline|vak|vck|lak|lck|lak+lck|ml)")))
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Baseline => "baseline",
            Ablation::Vak => "vak",
            Ablation::Vck => "vck",
            Ablation::Lak => "lak",
            Ablation::Lck => "lck",
            Ablation::LakLck => "lak+lck",
            Ablation::Ml => "ml",
        })
    }
}
