#[path = "../../core/tests/support/oracles.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use cadc::consensus::{aggregate_consensus, permute_group, AttentionProjection, FEATURES_PER_IMAGE};
use cadc::image_io::read_pgm;
use cadc::kernelgen::{naive_large_params, separable_large_params, KernelKind};
use cadc::metrics::{e_measure, mae, max_f, s_measure, EvalPair};
use cadc::rng::seeded;
use cadc::searchnet::{forward_group, Ablation, Network, NetworkConfig};
use cadc::synthesis::{read_manifest, synthesize_normal, synthesize_reverse, write_toy_corpus, LabeledImage, MANIFEST};
use cadc::tensor::{BnMode, Real};
use cadc::toy::{class_image, toy_group};
use cadc::{Tensor, Var};
use oracles::{blend_violation, e_oracle, grid, random_pair, s_oracle, separable_error, Instance};
use rand::Rng;

const SMALL: [&str; 6] = ["--widths", "8,8,16,16,16,16", "--resolution", "192", "--attention-hidden", "16"];

type Criterion<'a> = Box<dyn Fn() -> Verdict + 'a>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn cadc(args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_cadc")).args(args).output().expect("spawn cadc");
    let text = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    (out.status.success(), text)
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn gradient_suite(tmp: &Path) -> Verdict {
    let out = tmp.join("grad");
    let t = Instant::now();
    let (ok, text) = cadc(&["gradcheck", "--seeds", "10", "--out", path(&out)]);
    let secs = t.elapsed().as_secs_f64();
    let Ok(csv) = std::fs::read_to_string(out.join("gradcheck.csv")) else {
        return verdict(false, format!("no CSV written: {text}"));
    };
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let failing: Vec<&str> = rows.iter().filter(|r| r[4] != "true").map(|r| r[0]).collect();
    let required = [
        "conv2d",
        "depthwise_conv2d_per_image",
        "aggregate_consensus",
        "vanilla_adaptive",
        "vanilla_common",
        "large_adaptive",
        "large_common",
        "dynamic_search_large",
        "cadc_decoder",
        "deep_supervised_loss",
    ];
    let missing: Vec<&str> = required.iter().copied().filter(|n| !rows.iter().any(|r| r[0] == *n)).collect();
    let worst = |col: usize| rows.iter().map(|r| r[col].parse::<f64>().unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
    verdict(
        ok && failing.is_empty() && missing.is_empty() && rows.iter().all(|r| r[3] == "10") && secs < 300.0,
        format!(
            "{} ops × 10 seeds, worst f64 {:.1e}, worst f32 {:.1e}, {secs:.0}s; failing {failing:?}, missing {missing:?}",
            rows.len(),
            worst(1),
            worst(2)
        ),
    )
}

fn separable_equivalence() -> Verdict {
    let mut rng = seeded(50);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let inst = Instance {
            n: rng.gen_range(1..=4),
            c: rng.gen_range(1..=8),
            c1: rng.gen_range(1..=8),
            h: rng.gen_range(1..=9),
            w: rng.gen_range(1..=9),
            seed: 1000 + i,
        };
        worst = worst.max(separable_error(inst));
    }
    verdict(worst < 1e-5, format!("50 instances, max |Δ| {worst:.2e}"))
}

const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Largest deviation of side outputs and common kernels over all six
/// permutations, per BN mode.
fn equivariance_error<T: Real>(cfg: &NetworkConfig, images: &Tensor<T>) -> Vec<(BnMode, f64, f64)> {
    let net = Network::<T>::new(cfg).unwrap();
    forward_group(&net, images, BnMode::Train).unwrap();
    let f = |t: T| t.to_f64().unwrap();
    [BnMode::Train, BnMode::Eval]
        .into_iter()
        .map(|mode| {
            let (mut out_err, mut kernel_err) = (0.0f64, 0.0f64);
            let base = forward_group(&net, images, mode).unwrap();
            let base_k = net.kernel_sets(&Var::constant(images.clone()), mode).unwrap();
            for perm in PERMS {
                let moved_in = permute_group(images, &perm).unwrap();
                let moved = forward_group(&net, &moved_in, mode).unwrap();
                for (b, m) in base.side_outputs.iter().zip(&moved.side_outputs) {
                    out_err = out_err.max(f(m.value().max_abs_diff(&permute_group(b.value(), &perm).unwrap())));
                }
                for (a, b) in base_k.iter().zip(&net.kernel_sets(&Var::constant(moved_in), mode).unwrap()) {
                    for (x, y) in [(&a.common_point, &b.common_point), (&a.common_depth, &b.common_depth)] {
                        kernel_err =
                            kernel_err.max(f(x.as_ref().unwrap().value().max_abs_diff(y.as_ref().unwrap().value())));
                    }
                }
            }
            (mode, out_err, kernel_err)
        })
        .collect()
}

fn permutation_equivariance() -> Verdict {
    let cfg = NetworkConfig { seed: 3, ..Default::default() };
    let (images, _) = toy_group(3, cfg.resolution, 11);
    let exact = equivariance_error::<f64>(&cfg, &images.cast());
    let single = equivariance_error::<f32>(&cfg, &images);
    let exact_ok = exact.iter().all(|&(_, o, k)| o < 1e-5 && k < 1e-5);
    let eval_ok = single.iter().filter(|r| r.0 == BnMode::Eval).all(|&(_, o, k)| o < 1e-5 && k < 1e-5);
    let fmt = |rows: &[(BnMode, f64, f64)]| {
        rows.iter().map(|(m, o, k)| format!("{m:?} {o:.1e}/{k:.1e}")).collect::<Vec<_>>().join(", ")
    };
    verdict(
        exact_ok && eval_ok,
        format!("default network, 6 permutations, outputs/common kernels: f64 {}; f32 {}", fmt(&exact), fmt(&single)),
    )
}

fn attention_seconds(n: usize, c: usize) -> f64 {
    let proj = AttentionProjection::<f32>::new(c, &mut seeded(1)).unwrap();
    let f = Var::constant(Tensor::uniform(&[n, FEATURES_PER_IMAGE, c], -1.0, 1.0, &mut seeded(2)));
    aggregate_consensus(&f, &proj).unwrap();
    (0..7)
        .map(|_| {
            let t = Instant::now();
            aggregate_consensus(&f, &proj).unwrap();
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

fn scalability() -> Verdict {
    let c = 32;
    let ratio = attention_seconds(8, c) / attention_seconds(4, c);
    let net = Network::<f32>::new(&NetworkConfig::default()).unwrap();
    let (images, _) = toy_group(14, 256, 5);
    let t = Instant::now();
    let out = forward_group(&net, &images, BnMode::Train).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let finite = out.final_maps().value().is_finite();
    verdict(
        (3.0..=6.0).contains(&ratio) && secs < 60.0 && finite,
        format!("attention N=8/N=4 at C={c}: {ratio:.2}×; 14×256² default inference {secs:.1}s"),
    )
}

fn ablation_structure(tmp: &Path) -> Verdict {
    let corpus = tmp.join("ablation_groups");
    write_toy_corpus(&corpus, 1, 3, 120, 160, 2).unwrap();
    let flags = |a: &str, levels: Option<&str>| {
        let mut v = vec!["--ablation".to_string(), a.to_string()];
        v.extend(levels.map(|l| ["--cadc-levels".to_string(), l.to_string()]).into_iter().flatten());
        v
    };
    let mut runs: Vec<(String, Vec<String>)> =
        Ablation::ALL.iter().map(|a| (a.to_string(), flags(&a.to_string(), None))).collect();
    runs.push(("lak+lck, 4 levels".into(), flags("lak+lck", Some("4"))));
    runs.push(("ml, 2 levels".into(), flags("ml", Some("2"))));
    let mut problems = Vec::new();
    for (i, (name, extra)) in runs.iter().enumerate() {
        let out = tmp.join(format!("ablation{i}"));
        let mut args = vec!["infer", "--group-dir", path(&corpus), "--out", path(&out)];
        args.extend(SMALL);
        args.extend(extra.iter().map(String::as_str));
        let (ok, text) = cadc(&args);
        if !ok {
            problems.push(format!("{name}: {}", text.trim()));
            continue;
        }
        for k in 0..3 {
            match read_pgm(&out.join("class0").join(format!("img{k}.pgm"))) {
                Ok(m) if m.shape() == [1, 120, 160] => {}
                other => problems.push(format!("{name}: map {k} {:?}", other.map(|m| m.shape().to_vec()))),
            }
        }
    }

    let mut checked = 0;
    let (images, _) = toy_group(2, 192, 1);
    for ablation in [Ablation::Vak, Ablation::Vck, Ablation::Lak, Ablation::Lck, Ablation::Ml] {
        let mut cfg = NetworkConfig { resolution: 192, attention_hidden: 32, ..Default::default() };
        ablation.apply(&mut cfg);
        let net = Network::<f32>::new(&cfg).unwrap();
        for ks in net.kernel_sets(&Var::constant(images.clone()), BnMode::Train).unwrap() {
            let point = ks.adaptive_point.as_ref().or(ks.common_point.as_ref()).unwrap();
            let s = point.shape();
            let (c1, c) = (s[s.len() - 4], s[s.len() - 3]);
            let per_image = |v: &Option<Var<f32>>, batched: bool| {
                v.as_ref().map_or(0, |v| v.value().len() / if batched { 2 } else { 1 })
            };
            let adaptive = per_image(&ks.adaptive_point, true) + per_image(&ks.adaptive_depth, true);
            let common = per_image(&ks.common_point, false) + per_image(&ks.common_depth, false);
            let expect = match ks.kind {
                KernelKind::Large => separable_large_params(c, c1),
                KernelKind::Vanilla => c1 * c,
            };
            if ks.kind == KernelKind::Large && expect != c * 9 + c1 * c {
                problems.push(format!("{ablation}: separable count formula"));
            }
            for (branch, got) in [("adaptive", adaptive), ("common", common)] {
                if got != 0 && got != expect {
                    problems.push(format!("{ablation} {branch}: {got} elements, expected {expect}"));
                }
            }
            if ks.kind == KernelKind::Large && naive_large_params(c, c1) != c1 * c * 9 {
                problems.push(format!("{ablation}: dense count formula"));
            }
            checked += 1;
        }
    }
    let (c, c1) = (128, 128);
    verdict(
        problems.is_empty(),
        format!(
            "{} CLI configurations ran; {checked} kernel sets counted; at C=C1=128: {} vs {} elements{}",
            runs.len(),
            separable_large_params(c, c1),
            naive_large_params(c, c1),
            if problems.is_empty() { String::new() } else { format!("; problems: {problems:?}") }
        ),
    )
}

fn overfit(tmp: &Path) -> Verdict {
    let out = tmp.join("overfit");
    let (ok, text) = cadc(&["overfit", "--out", path(&out)]);
    let Ok(summary) = std::fs::read_to_string(out.join("overfit.txt")) else {
        return verdict(false, format!("no summary written: {}", text.trim()));
    };
    let fields: BTreeMap<&str, f64> =
        summary.lines().filter_map(|l| l.split_once(" = ")).filter_map(|(k, v)| Some((k, v.parse().ok()?))).collect();
    let get = |k: &str| fields.get(k).copied().unwrap_or(f64::NAN);
    let (steps, bce, f, secs) = (get("steps"), get("final_bce"), get("max_f"), get("seconds"));
    verdict(
        ok && steps <= 2000.0 && bce < 0.05 && f > 0.95 && secs < 900.0,
        format!("{steps} steps, final BCE {bce:.4}, maxF {f:.4}, {secs:.0}s"),
    )
}

fn synthesis(tmp: &Path) -> Verdict {
    let mut problems = Vec::new();
    let mut blends = 0;
    for seed in 0..15u64 {
        let (rgb, mask) = class_image(0, 64, 80, seed);
        let target = LabeledImage::new(rgb, mask, "a").unwrap();
        let (rgb, mask) = class_image(1 + seed as usize % 2, 64, 80, seed + 100);
        let donor = LabeledImage::new(rgb, mask, "b").unwrap();
        let mut rng = seeded(seed);
        let normal = synthesize_normal(&target, &donor, &mut rng).unwrap().unwrap();
        if let Some(v) = blend_violation(&normal, &target) {
            problems.push(format!("normal {seed}: {v}"));
        }
        if normal.image.mask.data() != target.mask.data() {
            problems.push(format!("normal {seed}: GT changed"));
        }
        let reverse = synthesize_reverse(&target, &donor, &mut rng).unwrap();
        if let Some(v) = blend_violation(&reverse, &donor) {
            problems.push(format!("reverse {seed}: {v}"));
        }
        if reverse.image.mask.data().iter().zip(&reverse.clone.region).any(|(&m, &r)| (m == 1.0) != r) {
            problems.push(format!("reverse {seed}: GT differs from pasted mask"));
        }
        blends += 2;
    }

    let corpus = tmp.join("synth_corpus");
    write_toy_corpus(&corpus, 3, 2, 64, 80, 7).unwrap();
    let out = tmp.join("synth_out");
    let (ok, text) = cadc(&[
        "synth",
        "--group-dir",
        path(&corpus),
        "--out",
        path(&out),
        "--per-image",
        "3",
        "--mode",
        "both",
        "--seed",
        "1",
    ]);
    let mut per_original: BTreeMap<String, usize> = BTreeMap::new();
    let mut originals = 0;
    if ok {
        for e in read_manifest(&out.join(MANIFEST)).unwrap() {
            let stem = Path::new(&e.image_path).file_stem().unwrap().to_string_lossy().into_owned();
            let key = format!("{}/{}", e.group_id, stem.split('_').next().unwrap());
            if e.origin == "original" {
                originals += 1;
                per_original.entry(key).or_default();
            } else {
                *per_original.entry(key).or_default() += 1;
            }
        }
    } else {
        problems.push(format!("synth failed: {}", text.trim()));
    }
    let six = originals == 6 && per_original.len() == 6 && per_original.values().all(|&n| n == 6);
    if !six {
        problems.push(format!("samples per original: {per_original:?}"));
    }
    verdict(
        problems.is_empty(),
        format!(
            "{blends} blends checked; CLI per_image=3 both: {originals} originals × {:?} samples{}",
            per_original.values().next(),
            if problems.is_empty() { String::new() } else { format!("; problems: {problems:?}") }
        ),
    )
}

fn metric_suite() -> Verdict {
    let mut worst_perfect: f64 = 0.0;
    for seed in 0..20 {
        let (_, gt) = random_pair(seed, 16, 12);
        let p = EvalPair::new(&gt, &gt).unwrap();
        for v in [s_measure(p), max_f(&[p]).unwrap(), e_measure(p)] {
            worst_perfect = worst_perfect.max((v - 1.0).abs());
        }
        worst_perfect = worst_perfect.max(mae(p));
    }
    let (mut s_err, mut e_err): (f64, f64) = (0.0, 0.0);
    for seed in 0..100 {
        let (pred, gt) = random_pair(10_000 + seed, 8, 8);
        let p = EvalPair::new(&pred, &gt).unwrap();
        let (pg, gg) = (grid(&pred, 8, 8), grid(&gt, 8, 8));
        s_err = s_err.max((s_measure(p) - s_oracle(&pg, &gg)).abs());
        e_err = e_err.max((e_measure(p) - e_oracle(&pg, &gg)).abs());
    }
    let mut f_err: f64 = 0.0;
    for seed in 0..20 {
        let (_, gt) = random_pair(20_000 + seed, 16, 16);
        let r = gt.mean_all() as f64;
        let ones = Tensor::ones(&[1, 16, 16]);
        let got = max_f(&[EvalPair::new(&ones, &gt).unwrap()]).unwrap();
        f_err = f_err.max((got - 1.3 * r / (0.3 * r + 1.0)).abs());
    }
    verdict(
        worst_perfect < 1e-9 && s_err < 1e-9 && e_err < 1e-9 && f_err < 1e-9,
        format!("GT-vs-GT {worst_perfect:.1e}; S oracle {s_err:.1e}; E oracle {e_err:.1e}; all-ones maxF {f_err:.1e}"),
    )
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("gradient suite", Box::new(|| gradient_suite(tmp.path()))),
        ("separable equivalence", Box::new(separable_equivalence)),
        ("permutation equivariance", Box::new(permutation_equivariance)),
        ("scalability", Box::new(scalability)),
        ("ablation structure", Box::new(|| ablation_structure(tmp.path()))),
        ("overfit smoke test", Box::new(|| overfit(tmp.path()))),
        ("synthesis suite", Box::new(|| synthesis(tmp.path()))),
        ("metric suite", Box::new(metric_suite)),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let v = run();
        let line = format!("criterion {} {:<26} {}  {}\n", i + 1, name, if v.pass { "PASS" } else { "FAIL" }, v.detail);
        std::io::stderr().write_all(line.as_bytes()).unwrap();
        if !v.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
