use std::path::Path;
use std::process::{Command, Output};

use recoat::datagen::read_dataset;
use recoat::net::PredictionSet;
use recoat::predict::{write_predictions, PredictionLine};

fn recoat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recoat")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = recoat(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path, count: usize, seed: u64) {
    ok(&["generate", "--out", p(dir), "--count", &count.to_string(), "--seed", &seed.to_string()]);
}

#[test]
fn help_on_every_subcommand() {
    for sub in ["generate", "rasterize", "train", "predict", "eval"] {
        let out = ok(&[sub, "--help"]);
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{sub}");
    }
    ok(&["--help"]);
}

#[test]
fn usage_errors_exit_1() {
    let out = recoat(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));
    assert_eq!(recoat(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(recoat(&[]).status.code(), Some(1));
    assert_eq!(recoat(&["generate", "--count", "3"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let out = recoat(&["rasterize", "--input", p(&missing), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{\"epochs\": 1}").unwrap();
    generate(&tmp.path().join("data"), 2, 0);
    let out = recoat(&["train", "--data", p(&tmp.path().join("data")), "--out", p(tmp.path()), "--config", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_of_ground_truth_gives_zero_min_ade() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 12, 4);
    let lines: Vec<PredictionLine> = read_dataset(&data)
        .unwrap()
        .iter()
        .map(|s| {
            let gt = s.to_target_frame().unwrap().target_future;
            PredictionLine::new(&s.scenario_id, &PredictionSet { trajectories: vec![gt; 6], probs: vec![1.0 / 6.0; 6] })
        })
        .collect();
    let preds = tmp.path().join("gt.jsonl");
    write_predictions(&preds, &lines).unwrap();
    let csv = tmp.path().join("metrics.csv");
    ok(&["eval", "--predictions", p(&preds), "--data", p(&data), "--out", p(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("metric,value,count"));
    let row = text.lines().find(|l| l.starts_with("min_ade,")).expect("min_ade row");
    assert_eq!(row, "min_ade,0,12");
}

#[test]
fn rasterize_twice_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 6, 9);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["rasterize", "--input", p(&data), "--out", p(&a)]);
    ok(&["rasterize", "--input", p(&data), "--out", p(&b)]);
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 6);
    for n in names {
        let (x, y) = (std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap());
        assert!(!x.is_empty());
        assert_eq!(x, y, "{n:?}");
    }
}

#[test]
fn one_epoch_run_then_predict_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 64, 1);
    let run = tmp.path().join("run");
    ok(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "1", "--seed", "5"]);
    let mut ckpts: Vec<_> = std::fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".rcat"))
        .collect();
    ckpts.sort();
    assert_eq!(ckpts, ["epoch_001.rcat"]);
    assert!(run.join("config.json").exists());
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2, "header plus two batches of 32");

    let preds = tmp.path().join("preds.jsonl");
    ok(&["predict", "--checkpoint", p(&run.join("epoch_001.rcat")), "--data", p(&data), "--out", p(&preds)]);
    assert_eq!(std::fs::read_to_string(&preds).unwrap().lines().count(), 64);
    let csv = tmp.path().join("metrics.csv");
    ok(&["eval", "--predictions", p(&preds), "--data", p(&data), "--out", p(&csv)]);
    assert!(std::fs::read_to_string(&csv).unwrap().contains("miss_rate,"));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 20, 2);
    let common = ["--data", p(&data), "--batch-size", "8", "--seed", "3"];
    let full = tmp.path().join("full");
    ok(&[&["train", "--out", p(&full), "--epochs", "2"], &common[..]].concat());
    let part = tmp.path().join("part");
    ok(&[&["train", "--out", p(&part), "--epochs", "1"], &common[..]].concat());
    let first = part.join("epoch_001.rcat");
    ok(&[&["train", "--out", p(&part), "--epochs", "2", "--resume", p(&first)], &common[..]].concat());
    for f in ["epoch_002.rcat", "train_log.csv"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(part.join(f)).unwrap(), "{f}");
    }
}
