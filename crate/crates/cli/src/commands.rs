//! Subcommand implementations.

use std::path::Path;
use std::time::Instant;

use cadc::fsutil::atomic_write;
use cadc::gradsuite::{run_suite, to_csv, DEFAULT_COORDS};
use cadc::image_io::{binarize, list_group_dirs, load_group_dir, write_pgm};
use cadc::metrics::{evaluate_dataset, max_f, EvalPair, MetricReport};
use cadc::searchnet::checkpoint;
use cadc::searchnet::{
    forward_group, inference_mode, predict_group, train_toy, Network, TrainConfig, TrainGroup, TrainReport,
};
use cadc::synthesis::{build_synth_dataset, write_toy_corpus, Modes};
use cadc::tensor::{BnMode, Tensor};
use cadc::toy::toy_group;
use cadc::{Error, Result};

use crate::config::RunConfig;

/// A subcommand finished but its numerical outcome is unacceptable.
#[derive(Debug)]
pub enum Failure {
    Lib(Error),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    /// 1 for bad input or usage, 2 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Lib(e) if e.is_numerical() => 2,
            Failure::Lib(_) => 1,
            Failure::Numerical(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Lib(e) => write!(f, "{e}"),
            Failure::Numerical(m) => write!(f, "{m}"),
        }
    }
}

pub type Outcome = std::result::Result<(), Failure>;

pub fn dispatch(cfg: &RunConfig) -> Outcome {
    cadc::par::set_threads(cfg.threads);
    match cfg.command {
        "infer" => infer(cfg),
        "eval" => eval(cfg),
        "synth" => synth(cfg),
        "gradcheck" => gradcheck(cfg),
        "overfit" => overfit(cfg),
        "demo" => demo(cfg),
        other => Err(Error::Usage(format!("unknown command `{other}`")).into()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

fn network(cfg: &RunConfig) -> Result<Network<f32>> {
    match &cfg.checkpoint {
        Some(dir) => {
            if cfg.network_overridden {
                log::warn!("architecture flags are ignored when loading {}", dir.display());
            }
            checkpoint::load(dir)
        }
        None => {
            log::warn!("no --checkpoint given; using an untrained network");
            Network::new(&cfg.network)
        }
    }
}

/// Writes `<out>/<group>/<name>.pgm` for every group under `groups_root`.
fn infer_into(net: &mut Network<f32>, groups_root: &Path, out: &Path) -> Result<usize> {
    let mode = inference_mode(net);
    let mut written = 0;
    for dir in list_group_dirs(groups_root)? {
        let group = load_group_dir(&dir)?;
        let maps = predict_group(net, &group, mode)?;
        for (name, map) in group.names.iter().zip(&maps) {
            write_pgm(&out.join(&group.name).join(format!("{name}.pgm")), map)?;
            written += 1;
        }
        log::info!("{}: {} maps", group.name, maps.len());
    }
    Ok(written)
}

fn infer(cfg: &RunConfig) -> Outcome {
    let mut net = network(cfg)?;
    let n = infer_into(&mut net, cfg.group_dir.as_deref().expect("validated"), cfg.out_dir())?;
    println!("wrote {n} saliency maps to {}", cfg.out_dir().display());
    Ok(())
}

fn print_report(r: &MetricReport) {
    let o = &r.overall;
    println!("{} images: S {:.4}  maxF {:.4}  E {:.4}  MAE {:.4}", o.count, o.s_measure, o.max_f, o.e_measure, o.mae);
}

fn eval(cfg: &RunConfig) -> Outcome {
    let report =
        evaluate_dataset(cfg.pred.as_deref().expect("validated"), cfg.gt.as_deref().expect("validated"), cfg.e_mode)?;
    if let Some(out) = &cfg.out {
        write_text(&out.join("metrics.csv"), &report.to_csv())?;
    } else {
        print!("{}", report.to_csv());
    }
    print_report(&report);
    Ok(())
}

fn synth(cfg: &RunConfig) -> Outcome {
    let s = build_synth_dataset(
        cfg.group_dir.as_deref().expect("validated"),
        cfg.out_dir(),
        cfg.per_image,
        cfg.modes,
        cfg.seed,
    )?;
    println!(
        "{} originals, {} normal, {} reverse, {} skipped; max Poisson residual {:.2e}",
        s.originals, s.normal, s.reverse, s.skipped, s.max_residual
    );
    Ok(())
}

fn gradcheck(cfg: &RunConfig) -> Outcome {
    let seeds: Vec<u64> = (0..cfg.seeds).collect();
    let t = Instant::now();
    let results = run_suite(&seeds, DEFAULT_COORDS, cfg.filter.as_deref())?;
    write_text(&cfg.out_dir().join("gradcheck.csv"), &to_csv(&results))?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    println!("{} checks, {} seeds, {:.1}s", results.len(), seeds.len(), t.elapsed().as_secs_f64());
    if results.is_empty() {
        return Err(Error::Usage("no gradient check matches --filter".into()).into());
    }
    if !failed.is_empty() {
        return Err(Failure::Numerical(format!("gradient checks failed: {}", failed.join(", "))));
    }
    Ok(())
}

/// Result of a single-group training run.
pub struct OverfitSummary {
    pub report: TrainReport,
    pub max_f: f64,
    pub seconds: f64,
}

fn training_group(cfg: &RunConfig, group_dir: Option<&Path>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let r = cfg.network.resolution;
    match group_dir {
        Some(dir) => {
            let g = load_group_dir(dir)?;
            let masks =
                g.mask_batch(r)?.ok_or_else(|| Error::Data(format!("{}: every image needs a mask", dir.display())))?;
            Ok((g.to_batch(r)?, binarize(&masks)))
        }
        None => Ok(toy_group(3, r, cfg.seed)),
    }
}

fn train_and_score(
    cfg: &RunConfig,
    images: &Tensor<f32>,
    masks: &Tensor<f32>,
    tc: &TrainConfig,
    out: &Path,
) -> Result<OverfitSummary> {
    let mut net = Network::<f32>::new(&cfg.network)?;
    let t = Instant::now();
    let report = train_toy(&mut net, &[TrainGroup::new(images.clone(), masks.clone())?], tc)?;
    let seconds = t.elapsed().as_secs_f64();
    checkpoint::save(&mut net, &out.join("checkpoint"))?;
    write_text(&out.join("loss_curve.csv"), &report.to_csv())?;
    let maps = forward_group(&net, images, BnMode::Eval)?;
    let fin = maps.final_maps().value();
    let (n, r) = (images.dim(0), cfg.network.resolution);
    let slice = |t: &Tensor<f32>, i: usize| Tensor::new(&[1, r, r], t.data()[i * r * r..(i + 1) * r * r].to_vec());
    let preds: Vec<Tensor<f32>> = (0..n).map(|i| slice(fin, i)).collect::<Result<_>>()?;
    let gts: Vec<Tensor<f32>> = (0..n).map(|i| slice(masks, i)).collect::<Result<_>>()?;
    let pairs: Vec<EvalPair> = preds.iter().zip(&gts).map(|(p, g)| EvalPair::new(p, g)).collect::<Result<_>>()?;
    let max_f = max_f(&pairs)?;
    Ok(OverfitSummary { report, max_f, seconds })
}

fn summary_text(s: &OverfitSummary) -> String {
    format!(
        "steps = {}\nfinal_bce = {:.6}\nmax_f = {:.6}\nseconds = {:.1}\n",
        s.report.steps_run(),
        s.report.final_bce.last().copied().unwrap_or(f64::NAN),
        s.max_f,
        s.seconds
    )
}

/// Stop threshold for `overfit` when none is given.
pub const OVERFIT_STOP: f64 = 0.04;
/// Target for the last decoder's BCE.
pub const OVERFIT_TARGET: f64 = 0.05;

fn overfit(cfg: &RunConfig) -> Outcome {
    let (images, masks) = training_group(cfg, cfg.group_dir.as_deref())?;
    let tc = TrainConfig {
        steps: cfg.steps.unwrap_or(2000),
        lr: cfg.lr.unwrap_or(0.01),
        flip: cfg.flip.unwrap_or(false),
        stop_below: Some(cfg.stop_below.unwrap_or(OVERFIT_STOP)),
        seed: cfg.seed,
        ..Default::default()
    };
    let out = cfg.out_dir();
    let s = train_and_score(cfg, &images, &masks, &tc, out)?;
    write_text(&out.join("overfit.txt"), &summary_text(&s))?;
    print!("{}", summary_text(&s));
    let last = s.report.final_bce.last().copied().unwrap_or(f64::INFINITY);
    if last >= OVERFIT_TARGET {
        return Err(Failure::Numerical(format!("final BCE {last:.4} did not fall below {OVERFIT_TARGET}")));
    }
    Ok(())
}

fn demo(cfg: &RunConfig) -> Outcome {
    let out = cfg.out_dir();
    let corpus = out.join("corpus");
    let synth_dir = out.join("synth");
    write_toy_corpus(&corpus, 2, 2, 96, 128, cfg.seed)?;
    let s = build_synth_dataset(&corpus, &synth_dir, 1, Modes::BOTH, cfg.seed)?;
    println!("synth: {} originals, {} normal, {} reverse", s.originals, s.normal, s.reverse);

    let first =
        list_group_dirs(&synth_dir)?.into_iter().next().ok_or_else(|| Error::Data("empty synthetic dataset".into()))?;
    let (images, masks) = training_group(cfg, Some(&first))?;
    let tc = TrainConfig {
        steps: cfg.steps.unwrap_or(150),
        lr: cfg.lr.unwrap_or(0.01),
        flip: cfg.flip.unwrap_or(true),
        stop_below: cfg.stop_below.or(Some(OVERFIT_TARGET)),
        max_group_batch: 3,
        seed: cfg.seed,
        ..Default::default()
    };
    let train_out = out.join("train");
    let summary = train_and_score(cfg, &images, &masks, &tc, &train_out)?;
    write_text(&train_out.join("overfit.txt"), &summary_text(&summary))?;
    println!(
        "train: {} steps, final BCE {:.4}",
        summary.report.steps_run(),
        summary.report.final_bce.last().unwrap_or(&f64::NAN)
    );

    let mut net = checkpoint::load::<f32>(&train_out.join("checkpoint"))?;
    let pred = out.join("pred");
    let n = infer_into(&mut net, &synth_dir, &pred)?;
    println!("infer: {n} maps");

    let report = evaluate_dataset(&pred, &synth_dir, cfg.e_mode)?;
    write_text(&out.join("metrics.csv"), &report.to_csv())?;
    print_report(&report);
    Ok(())
}
