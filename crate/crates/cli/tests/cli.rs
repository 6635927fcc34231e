//! End-to-end runs of the `bbsnet` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use bbsnet::data_io::read_saliency;
use bbsnet::metrics::{evaluate_directories, EvalOptions};
use bbsnet::postproc::otsu_threshold;

fn bbsnet() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bbsnet"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bbsnet().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.txt")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pngs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    v.sort();
    v
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&["train", "--variant", "BBS_XYZ", "--out", s(out.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown variant `BBS_XYZ`"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_root_names_the_path() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&["train", "--out", s(out.path()), "--set", "data.root=/no/such/dataset"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/dataset"));
}

#[test]
fn bad_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "train.lr = 1e-3\ntrain.learning_speed = 4\n").unwrap();
    let o = run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.learning_speed"));

    let o = bbsnet()
        .args(["train", "--config", s(&toy_config()), "--out", s(&dir.path().join("o"))])
        .env("BBS_TRAIN_SPEED", "1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("BBS_TRAIN_SPEED"));
}

#[test]
fn unknown_flags_and_methods_are_usage_errors() {
    assert_eq!(run(&["train", "--frobnicate"]).status.code(), Some(2));
    let d = tempfile::tempdir().unwrap();
    let o = run(&["postproc", "--method", "median", "--input-dir", s(d.path()), "--out-dir", s(d.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(run(&["config"]).status.code(), Some(0));
}

#[test]
fn corrupt_checkpoint_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(run(&["synth", "--count", "1", "--side", "32", "--out", s(&data)]).status.success());
    let ckpt = dir.path().join("broken.ckpt");
    fs::write(&ckpt, b"definitely not a checkpoint").unwrap();
    let o = run(&["infer", "--ckpt", s(&ckpt), "--input-dir", s(&data), "--out-dir", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("checkpoint schema error"), "{}", stderr(&o));
}

/// Train with the shipped toy config, predict three pairs, score them and
/// binarise them; every stage is checked against the library.
#[test]
fn toy_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let started = Instant::now();
    let o = run(&["train", "--config", s(&toy_config()), "--out", s(&run_dir)]);
    let secs = started.elapsed().as_secs_f64();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(secs < 300.0, "toy training took {secs:.0}s");
    let ckpt = run_dir.join("model.ckpt");
    assert!(ckpt.is_file());
    let log = fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 200);

    // three pairs at a resolution different from the network side
    let data = dir.path().join("data");
    let o = run(&["synth", "--count", "3", "--side", "48", "--seed", "9", "--out", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pred = dir.path().join("pred");
    let infer = |out: &Path| run(&["infer", "--ckpt", s(&ckpt), "--input-dir", s(&data), "--out-dir", s(out)]);
    let o = infer(&pred);
    assert!(o.status.success(), "{}", stderr(&o));
    let maps = pngs(&pred);
    assert_eq!(maps.len(), 3);
    for m in &maps {
        assert_eq!(read_saliency(m).unwrap().map.dim(), (48, 48));
    }
    let again = dir.path().join("pred2");
    assert!(infer(&again).status.success());
    for (a, b) in maps.iter().zip(pngs(&again)) {
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    // eval matches the library call on the same directories
    let gt = data.join("GT");
    let report_dir = dir.path().join("report");
    let o = run(&["eval", "--pred-dir", s(&pred), "--gt-dir", s(&gt), "--out", s(&report_dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cli: serde_json::Value = serde_json::from_str(&fs::read_to_string(report_dir.join("metrics.json")).unwrap()).unwrap();
    let lib = evaluate_directories(&pred, &gt, &EvalOptions::default()).unwrap();
    let lib: serde_json::Value = serde_json::from_str(&lib.report.to_json().unwrap()).unwrap();
    assert_eq!(cli, lib);
    assert!(report_dir.join("curves.csv").is_file());
    assert!(report_dir.join("metrics.csv").is_file());

    // Otsu through the binary equals the library on the decoded maps
    let bin = dir.path().join("bin");
    let o = run(&["postproc", "--method", "otsu", "--input-dir", s(&pred), "--out-dir", s(&bin)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for (p, b) in maps.iter().zip(pngs(&bin)) {
        let want = otsu_threshold(read_saliency(p).unwrap().map.view()).map;
        assert_eq!(read_saliency(&b).unwrap().map, want);
    }
}

#[test]
fn eval_of_perfect_maps_and_unmatched_names() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(run(&["synth", "--count", "3", "--side", "32", "--out", s(&data)]).status.success());
    let gt = data.join("GT");
    let pred = dir.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    for p in pngs(&gt) {
        fs::copy(&p, pred.join(p.file_name().unwrap())).unwrap();
    }
    fs::copy(pngs(&gt)[0].clone(), pred.join("stray.png")).unwrap();
    let o = run(&["eval", "--pred-dir", s(&pred), "--gt-dir", s(&gt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("skipped (no counterpart): stray"));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["n_samples"], 3);
    assert_eq!(r["mae"], 0.0);
    for k in ["s_alpha", "max_f", "max_e"] {
        assert!((r[k].as_f64().unwrap() - 1.0).abs() < 1e-9, "{k} = {}", r[k]);
    }
}

#[test]
fn ablate_runs_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ablate.csv");
    let o = run(&["ablate", "--all", "--steps", "1", "--out", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + bbsnet::model::VariantTag::ALL.len());
    assert!(text.contains("Efficient"));
}

#[test]
fn generalize_toy_writes_a_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid");
    let o = run(&[
        "generalize", "--toy", "--toy-size", "6", "--train-count", "3", "--iters", "2", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("grid.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "train,test,s_alpha,max_f");
    // two rows, each with two cells plus self, mean_others and drop
    assert_eq!(lines.len(), 1 + 2 * 5);
    assert!(out.join("grid.json").is_file());
}
