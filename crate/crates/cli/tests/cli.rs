use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use cadc::image_io::{read_pgm, write_pgm, write_ppm};
use cadc::metrics::EMode;
use cadc::synthesis::write_toy_corpus;
use cadc::toy::class_image;
use cadc_cli::{parse_config, ParseFailure};

const SMALL: [&str; 6] = ["--widths", "8,8,16,16,16,16", "--resolution", "192", "--attention-hidden", "16"];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cadc")).current_dir(dir).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn group_dir(root: &Path, sizes: &[(usize, usize)]) {
    for (i, &(h, w)) in sizes.iter().enumerate() {
        let (rgb, mask) = class_image(i % 3, h, w, i as u64);
        write_ppm(&root.join(format!("im{i}.ppm")), &rgb).unwrap();
        write_pgm(&root.join(format!("im{i}_gt.pgm")), &mask).unwrap();
    }
}

#[test]
fn eval_flags_map_onto_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let (p, g) = (tmp.path().join("p"), tmp.path().join("g"));
    std::fs::create_dir_all(&p).unwrap();
    std::fs::create_dir_all(&g).unwrap();
    let cfg = parse_config(["cadc", "eval", "--pred", s(&p), "--gt", s(&g)]).unwrap();
    assert_eq!(cfg.command, "eval");
    assert_eq!(cfg.pred.as_deref(), Some(p.as_path()));
    assert_eq!(cfg.gt.as_deref(), Some(g.as_path()));
    assert_eq!(cfg.e_mode, EMode::Max);
    assert_eq!((cfg.seed, cfg.threads), (0, 1));
}

#[test]
fn unknown_flag_is_a_usage_error_naming_it() {
    match parse_config(["cadc", "eval", "--bogus"]) {
        Err(ParseFailure::Clap(e)) => assert!(e.to_string().contains("--bogus")),
        other => panic!("expected a clap error, got {other:?}"),
    }
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["eval", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));
}

#[test]
fn flags_override_config_file_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("run.conf");
    std::fs::write(&conf, "# defaults\nseed = 7\nper_image = 2\n").unwrap();
    let base = ["cadc", "gradcheck", "--out", s(tmp.path()), "--config", s(&conf)];
    let from_file = parse_config(base).unwrap();
    assert_eq!((from_file.seed, from_file.per_image), (7, 2));
    let flagged = parse_config(base.into_iter().chain(["--seed", "9"])).unwrap();
    assert_eq!((flagged.seed, flagged.per_image, flagged.network.seed), (9, 2, 9));
}

#[test]
fn unknown_config_key_and_bad_values_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("run.conf");
    std::fs::write(&conf, "sede = 7\n").unwrap();
    match parse_config(["cadc", "gradcheck", "--out", s(tmp.path()), "--config", s(&conf)]) {
        Err(ParseFailure::Config(e)) => assert!(e.to_string().contains("sede")),
        other => panic!("expected a config error, got {other:?}"),
    }
    let out = run(tmp.path(), &["synth", "--group-dir", s(tmp.path()), "--out", "o", "--mode", "sideways"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sideways"));
    assert_eq!(run(tmp.path(), &["gradcheck", "--out", "o", "--seed", "abc"]).status.code(), Some(1));
}

#[test]
fn missing_inputs_exit_with_one_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["eval", "--pred", "nope", "--gt", "nope"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 0);
    assert_eq!(run(tmp.path(), &["infer", "--group-dir", "."]).status.code(), Some(1));
    assert_eq!(run(tmp.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn synth_is_deterministic_and_stays_inside_out() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    write_toy_corpus(&corpus, 2, 2, 48, 56, 3).unwrap();
    let work = tmp.path().join("work");
    std::fs::create_dir_all(&work).unwrap();
    for name in ["a", "b"] {
        let out = run(&work, &["synth", "--group-dir", s(&corpus), "--out", name, "--seed", "1", "--per-image", "2"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut entries: Vec<String> =
        std::fs::read_dir(&work).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    entries.sort();
    assert_eq!(entries, ["a", "b"]);
    let (a, b) = (tree(&work.join("a")), tree(&work.join("b")));
    assert_eq!(a, b);
    assert_eq!(a.len(), 1 + 2 * 4 * (1 + 4));
}

#[test]
fn infer_writes_one_map_per_image_at_input_resolution() {
    let tmp = tempfile::tempdir().unwrap();
    let group = tmp.path().join("g1");
    let sizes = [(60, 80), (90, 70), (64, 64)];
    group_dir(&group, &sizes);
    let mut args = vec!["infer", "--group-dir", s(&group), "--out", "pred"];
    args.extend(SMALL);
    let out = run(tmp.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for (i, &(h, w)) in sizes.iter().enumerate() {
        let m = read_pgm(&tmp.path().join("pred/g1").join(format!("im{i}.pgm"))).unwrap();
        assert_eq!(m.shape(), &[1, h, w]);
    }
    let first = tree(&tmp.path().join("pred"));
    args[4] = "pred2";
    assert!(run(tmp.path(), &args).status.success());
    assert_eq!(first, tree(&tmp.path().join("pred2")));
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt");
    let pred = tmp.path().join("pred");
    group_dir(&gt.join("g1"), &[(32, 40), (40, 32)]);
    for i in 0..2 {
        let m = read_pgm(&gt.join("g1").join(format!("im{i}_gt.pgm"))).unwrap();
        write_pgm(&pred.join("g1").join(format!("im{i}.pgm")), &m).unwrap();
    }
    let out = run(tmp.path(), &["eval", "--pred", s(&pred), "--gt", s(&gt), "--out", "report"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("report/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "group,count,smeasure,maxf,emeasure,mae");
    assert_eq!(lines.last().unwrap(), &"ALL,2,1.000000,1.000000,1.000000,0.000000");
}

#[test]
fn gradcheck_writes_a_csv_and_rejects_empty_filters() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["gradcheck", "--out", "g", "--seeds", "2", "--filter", "softmax"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("g/gradcheck.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("op,max_rel_error_f64,max_rel_error_f32,seeds,pass"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!((row[0], row[3], row[4]), ("softmax", "2", "true"));
    assert!(row[2].parse::<f64>().unwrap() < 1e-3);
    assert_eq!(run(tmp.path(), &["gradcheck", "--out", "g", "--filter", "no_such_op"]).status.code(), Some(1));
}

#[test]
fn unconverged_overfit_is_a_numerical_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["overfit", "--out", "o", "--steps", "1"];
    args.extend(SMALL);
    let out = run(tmp.path(), &args);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("o/loss_curve.csv").is_file());
    assert!(tmp.path().join("o/checkpoint").is_dir());
}
