//! Command-line and config-file parsing.
//!
//! Precedence: flags, then `--config` file keys, then defaults. The config
//! file holds `key = value` lines with `#` comments; keys are the long flag
//! names with `_` or `-`.

use std::path::{Path, PathBuf};

use cadc::kernelgen::{Branches, KernelKind};
use cadc::metrics::EMode;
use cadc::searchnet::config::parse_key_values;
use cadc::searchnet::{Ablation, NetworkConfig};
use cadc::synthesis::Modes;
use cadc::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cadc", version, about = "Co-saliency detection with consensus-aware dynamic convolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Saliency maps for every image group under --group-dir.
    Infer(Flags),
    /// Metrics of predicted maps against ground truth.
    Eval(Flags),
    /// Copy-and-blend synthetic dataset from a class corpus.
    Synth(Flags),
    /// Finite-difference gradient checks of every operation.
    Gradcheck(Flags),
    /// Train on a single group until it is memorised.
    Overfit(Flags),
    /// Toy end-to-end run: synth, overfit, infer, eval.
    Demo(Flags),
}

impl Command {
    pub fn flags(&self) -> &Flags {
        match self {
            Command::Infer(f)
            | Command::Eval(f)
            | Command::Synth(f)
            | Command::Gradcheck(f)
            | Command::Overfit(f)
            | Command::Demo(f) => f,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Infer(_) => "infer",
            Command::Eval(_) => "eval",
            Command::Synth(_) => "synth",
            Command::Gradcheck(_) => "gradcheck",
            Command::Overfit(_) => "overfit",
            Command::Demo(_) => "demo",
        }
    }
}

#[derive(Debug, Default, Args)]
pub struct Flags {
    /// Plain `key = value` file with defaults for any flag below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Image group directory, or a root of group directories.
    #[arg(long)]
    pub group_dir: Option<PathBuf>,
    /// Predicted maps, `<pred>/<group>/<name>.pgm`.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Ground-truth maps, `<gt>/<group>/<name>_gt.pgm`.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Output directory; nothing is written elsewhere.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for synthesis, evaluation and tensor kernels.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Trained network directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// vanilla | large | both (large with adaptive and common kernels).
    #[arg(long)]
    pub kernel_kind: Option<String>,
    /// adaptive | common | both.
    #[arg(long)]
    pub branches: Option<String>,
    /// Number of decoders (deepest first) using dynamic convolution, 0..4.
    #[arg(long)]
    pub cadc_levels: Option<usize>,
    /// baseline | vak | vck | lak | lck | lak+lck | ml.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Six comma-separated encoder widths.
    #[arg(long)]
    pub widths: Option<String>,
    /// Network input resolution (multiple of 32).
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Hidden width of the attention FC stacks.
    #[arg(long)]
    pub attention_hidden: Option<usize>,
    /// Synthesized samples per original and mode.
    #[arg(long)]
    pub per_image: Option<usize>,
    /// normal | reverse | both.
    #[arg(long)]
    pub mode: Option<String>,
    /// mean | max reduction of the E-measure curve.
    #[arg(long)]
    pub e_mode: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Stop training once the last decoder's BCE is below this.
    #[arg(long)]
    pub stop_below: Option<f64>,
    /// Random horizontal flips during training.
    #[arg(long)]
    pub flip: Option<bool>,
    /// Gradient-check seeds (0..N).
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Only gradient checks whose name contains this.
    #[arg(long)]
    pub filter: Option<String>,
}

/// Everything a subcommand needs, after merging flags, file and defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: &'static str,
    pub group_dir: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
    pub threads: usize,
    pub network: NetworkConfig,
    /// Whether any architecture key was given explicitly.
    pub network_overridden: bool,
    pub per_image: usize,
    pub modes: Modes,
    pub e_mode: EMode,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub stop_below: Option<f64>,
    pub flip: Option<bool>,
    pub seeds: u64,
    pub filter: Option<String>,
}

/// Narrower encoder used by `overfit` and `demo` unless overridden.
pub const OVERFIT_WIDTHS: [usize; 6] = [8, 8, 16, 16, 16, 16];
/// Smallest resolution at which all four dynamic-convolution decoders see
/// at least 6×6 features.
pub const OVERFIT_RESOLUTION: usize = 192;

const KEYS: &[&str] = &[
    "group_dir",
    "pred",
    "gt",
    "out",
    "seed",
    "threads",
    "checkpoint",
    "kernel_kind",
    "branches",
    "cadc_levels",
    "ablation",
    "widths",
    "resolution",
    "attention_hidden",
    "per_image",
    "mode",
    "e_mode",
    "steps",
    "lr",
    "stop_below",
    "flip",
    "seeds",
    "filter",
];

fn usage(msg: String) -> Error {
    Error::Usage(msg)
}

fn parse<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.trim().parse().map_err(|_| usage(format!("--{}: malformed value `{v}`", key.replace('_', "-"))))
}

/// `(key, value)` pairs given on the command line, in canonical key form.
fn flag_pairs(f: &Flags) -> Vec<(&'static str, String)> {
    let mut v: Vec<(&'static str, String)> = Vec::new();
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.to_string_lossy().into_owned());
    let mut push = |k: &'static str, val: Option<String>| {
        if let Some(val) = val {
            v.push((k, val));
        }
    };
    push("group_dir", path(&f.group_dir));
    push("pred", path(&f.pred));
    push("gt", path(&f.gt));
    push("out", path(&f.out));
    push("seed", f.seed.map(|x| x.to_string()));
    push("threads", f.threads.map(|x| x.to_string()));
    push("checkpoint", path(&f.checkpoint));
    push("ablation", f.ablation.clone());
    push("kernel_kind", f.kernel_kind.clone());
    push("branches", f.branches.clone());
    push("cadc_levels", f.cadc_levels.map(|x| x.to_string()));
    push("widths", f.widths.clone());
    push("resolution", f.resolution.map(|x| x.to_string()));
    push("attention_hidden", f.attention_hidden.map(|x| x.to_string()));
    push("per_image", f.per_image.map(|x| x.to_string()));
    push("mode", f.mode.clone());
    push("e_mode", f.e_mode.clone());
    push("steps", f.steps.map(|x| x.to_string()));
    push("lr", f.lr.map(|x| x.to_string()));
    push("stop_below", f.stop_below.map(|x| x.to_string()));
    push("flip", f.flip.map(|x| x.to_string()));
    push("seeds", f.seeds.map(|x| x.to_string()));
    push("filter", f.filter.clone());
    v
}

/// Reads a config file into canonical `(key, value)` pairs, rejecting
/// unknown keys.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (k, v) in parse_key_values(&text)? {
        let key = k.replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            return Err(usage(format!("unknown config key `{k}` in {}", path.display())));
        }
        out.push((key, v));
    }
    Ok(out)
}

impl RunConfig {
    fn defaults(command: &'static str) -> Self {
        let mut network = NetworkConfig::default();
        if matches!(command, "overfit" | "demo") {
            network.widths = OVERFIT_WIDTHS.to_vec();
            network.resolution = OVERFIT_RESOLUTION;
        }
        RunConfig {
            command,
            group_dir: None,
            pred: None,
            gt: None,
            out: None,
            checkpoint: None,
            seed: 0,
            threads: 1,
            network,
            network_overridden: false,
            per_image: 3,
            modes: Modes::BOTH,
            e_mode: EMode::Max,
            steps: None,
            lr: None,
            stop_below: None,
            flip: None,
            seeds: 10,
            filter: None,
        }
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "group_dir" => self.group_dir = Some(v.into()),
            "pred" => self.pred = Some(v.into()),
            "gt" => self.gt = Some(v.into()),
            "out" => self.out = Some(v.into()),
            "checkpoint" => self.checkpoint = Some(v.into()),
            "seed" => self.seed = parse(key, v)?,
            "threads" => {
                self.threads = parse(key, v)?;
                if self.threads == 0 {
                    return Err(usage("--threads must be at least 1".into()));
                }
            }
            "ablation" => {
                let a: Ablation = v.parse()?;
                a.apply(&mut self.network);
                self.network_overridden = true;
            }
            "kernel_kind" => {
                if v == "both" {
                    self.network.kernel_kind = KernelKind::Large;
                    self.network.branches = Branches::BOTH;
                } else {
                    self.network.kernel_kind = v.parse()?;
                }
                self.network_overridden = true;
            }
            "branches" | "cadc_levels" | "widths" | "resolution" | "attention_hidden" => {
                self.network.apply(key, v).map_err(|e| usage(format!("--{}: {e}", key.replace('_', "-"))))?;
                self.network_overridden = true;
            }
            "per_image" => self.per_image = parse(key, v)?,
            "mode" => self.modes = v.parse()?,
            "e_mode" => self.e_mode = v.parse()?,
            "steps" => self.steps = Some(parse(key, v)?),
            "lr" => self.lr = Some(parse(key, v)?),
            "stop_below" => self.stop_below = Some(parse(key, v)?),
            "flip" => self.flip = Some(parse(key, v)?),
            "seeds" => self.seeds = parse(key, v)?,
            "filter" => self.filter = Some(v.to_string()),
            _ => return Err(usage(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

/// Applies `pairs` so that an ablation preset is applied before the
/// individual architecture keys it might be combined with.
fn apply_all(cfg: &mut RunConfig, pairs: &[(String, String)]) -> Result<()> {
    for (k, v) in pairs.iter().filter(|(k, _)| k == "ablation") {
        cfg.set(k, v)?;
    }
    for (k, v) in pairs.iter().filter(|(k, _)| k != "ablation") {
        cfg.set(k, v)?;
    }
    Ok(())
}

/// Merges defaults, the optional config file and the flags.
pub fn resolve(command: &Command) -> Result<RunConfig> {
    let f = command.flags();
    let mut cfg = RunConfig::defaults(command.name());
    let flags: Vec<(String, String)> = flag_pairs(f).into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    if let Some(path) = &f.config {
        let file = read_config_file(path)?;
        // Flags override the file, key by key.
        let remaining: Vec<(String, String)> =
            file.into_iter().filter(|(k, _)| !flags.iter().any(|(fk, _)| fk == k)).collect();
        apply_all(&mut cfg, &remaining)?;
    }
    apply_all(&mut cfg, &flags)?;
    cfg.network.seed = cfg.seed;
    cfg.validate_paths()?;
    Ok(cfg)
}

/// Parses `argv` (including the program name) into a [`RunConfig`].
pub fn parse_config<I, S>(argv: I) -> std::result::Result<RunConfig, ParseFailure>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(ParseFailure::Clap)?;
    resolve(&cli.command).map_err(ParseFailure::Config)
}

#[derive(Debug)]
pub enum ParseFailure {
    /// Argument syntax error, or a help/version request.
    Clap(clap::Error),
    Config(Error),
}

impl RunConfig {
    fn require<'a>(&self, p: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
        p.as_ref().ok_or_else(|| usage(format!("`{}` needs --{flag}", self.command)))
    }

    fn existing_dir(&self, p: &Option<PathBuf>, flag: &str) -> Result<()> {
        let d = self.require(p, flag)?;
        if !d.is_dir() {
            return Err(usage(format!("--{flag} {} is not a directory", d.display())));
        }
        Ok(())
    }

    /// Checks that every path the command reads exists and that `--out` is
    /// given where needed.
    pub fn validate_paths(&self) -> Result<()> {
        match self.command {
            "infer" => {
                self.existing_dir(&self.group_dir, "group-dir")?;
                self.require(&self.out, "out")?;
            }
            "eval" => {
                self.existing_dir(&self.pred, "pred")?;
                self.existing_dir(&self.gt, "gt")?;
            }
            "synth" => {
                self.existing_dir(&self.group_dir, "group-dir")?;
                self.require(&self.out, "out")?;
            }
            "gradcheck" | "overfit" | "demo" => {
                self.require(&self.out, "out")?;
            }
            _ => {}
        }
        if let Some(g) = &self.group_dir {
            if self.command == "overfit" && !g.is_dir() {
                return Err(usage(format!("--group-dir {} is not a directory", g.display())));
            }
        }
        if let Some(c) = &self.checkpoint {
            if !c.is_dir() {
                return Err(usage(format!("--checkpoint {} is not a directory", c.display())));
            }
        }
        Ok(())
    }

    pub fn out_dir(&self) -> &Path {
        self.out.as_deref().unwrap_or(Path::new("."))
    }
}
