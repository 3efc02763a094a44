use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hierseg::config::{RunConfig, KEYS};

fn hierseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hierseg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hierseg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = hierseg(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(!err.contains("panicked"), "{err}");
    err
}

const SMALL: &[&str] = &["--phantom-dims", "8,16,16", "--input-size", "16", "--base-width", "2"];

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, count: &str) {
    let mut args = vec!["gen", "--seed", "1", "--count", count, "--out", p(dir)];
    args.extend_from_slice(SMALL);
    ok(&args);
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let manifest = data.join("manifest.tsv");
    let mut args = vec!["train", "--manifest", p(&manifest), "--out", p(out), "--batch-per-worker", "2", "--lr", "1e-3", "--log-every", "0"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    if !extra.contains(&"--iterations") {
        args.extend_from_slice(&["--iterations", "3"]);
    }
    ok(&args);
}

#[test]
fn gen_writes_pairs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "3");
    let manifest = fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    for line in manifest.lines() {
        for name in line.split('\t') {
            assert!(fs::read(dir.path().join(name)).unwrap().starts_with(b"BVOL"));
        }
    }
    let cfg = fs::read_to_string(dir.path().join("run_config.txt")).unwrap();
    assert!(cfg.contains("\ncount = 3\n") && cfg.contains("\nseed = 1\n"));
}

#[test]
fn train_is_reproducible_from_its_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "2");
    let a = dir.path().join("a");
    train(&data, &a, &["--loss", "ce"]);
    let csv = fs::read_to_string(a.join("loss.csv")).unwrap();
    assert!(csv.starts_with("iteration,loss,lr\n"));
    assert_eq!(csv.lines().count(), 4);

    let b = dir.path().join("b");
    let manifest = data.join("manifest.tsv");
    let config = a.join("run_config.txt");
    ok(&["train", "--config", p(&config), "--manifest", p(&manifest), "--out", p(&b), "--log-every", "0"]);
    assert_eq!(fs::read(a.join("checkpoint.hnck")).unwrap(), fs::read(b.join("checkpoint.hnck")).unwrap());
    assert_eq!(csv, fs::read_to_string(b.join("loss.csv")).unwrap());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "2");
    let full = dir.path().join("full");
    train(&data, &full, &[]);
    let part = dir.path().join("part");
    train(&data, &part, &["--iterations", "2"]);
    let ckpt = part.join("checkpoint.hnck");
    let manifest = data.join("manifest.tsv");
    ok(&["train", "--resume", p(&ckpt), "--iterations", "3", "--manifest", p(&manifest), "--out", p(&part), "--log-every", "0"]);
    assert_eq!(fs::read(full.join("checkpoint.hnck")).unwrap(), fs::read(part.join("checkpoint.hnck")).unwrap());
    assert_eq!(fs::read_to_string(full.join("loss.csv")).unwrap(), fs::read_to_string(part.join("loss.csv")).unwrap());
}

#[test]
fn eval_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "2");
    let run = dir.path().join("run");
    train(&data, &run, &["--checkpoint-every", "2"]);
    assert!(run.join("checkpoint_000002.hnck").exists());
    let ckpt = run.join("checkpoint.hnck");
    let manifest = data.join("manifest.tsv");

    let csv = ok(&["eval", "--checkpoint", p(&ckpt), "--manifest", p(&manifest)]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "region,precision,recall,miou,dice");
    assert_eq!(lines.len(), 4);
    for (line, region) in lines[1..].iter().zip(["complete", "core", "enhancing"]) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], region);
        assert_eq!(cells.len(), 5);
        assert!(cells[1..].iter().all(|c| (0.0..=1.0).contains(&c.parse::<f64>().unwrap())));
    }
    let scores = dir.path().join("scores.csv");
    ok(&["eval", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--out", p(&scores), "--decision", "argmax"]);
    assert_eq!(fs::read_to_string(&scores).unwrap().lines().next(), Some(lines[0]));
    assert!(fs::read_to_string(dir.path().join("scores.config.txt")).unwrap().contains("\ndecision = argmax\n"));

    let report = dir.path().join("report");
    let loss = run.join("loss.csv");
    let out = ok(&["report", "--out", p(&report), "--loss-csv", p(&loss), "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--cases", "1"]);
    assert_eq!(out.lines().count(), 2);
    assert!(fs::read(report.join("loss_curve.pgm")).unwrap().starts_with(b"P5\n600 200\n255\n"));
    let ppm: Vec<_> = fs::read_dir(&report).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "ppm")).collect();
    assert_eq!(ppm.len(), 1);
    assert!(fs::read(&ppm[0]).unwrap().starts_with(b"P6\n52 16\n255\n"));
}

#[test]
fn three_workers_train() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "2");
    let run = dir.path().join("run");
    train(&data, &run, &["--arch", "res-unet", "--loss", "hdice", "--workers", "3"]);
    let cfg = fs::read_to_string(run.join("run_config.txt")).unwrap();
    assert!(cfg.contains("\nworkers = 3\n"));
    assert!(run.join("checkpoint.hnck").exists());
}

#[test]
fn user_errors_exit_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "lerning_rate = 0.1\n").unwrap();
    let err = fails(&["gen", "--out", p(dir.path()), "--config", p(&bad)]);
    assert!(err.contains("lerning_rate"), "{err}");
    let err = fails(&["gen", "--out", p(dir.path()), "--count", "many"]);
    assert!(err.contains("count"), "{err}");
    let missing = dir.path().join("nope.tsv");
    fails(&["train", "--manifest", p(&missing), "--out", p(dir.path())]);
    fails(&["eval", "--checkpoint", p(&missing), "--manifest", p(&missing)]);
    fails(&["report", "--out", p(dir.path())]);
    fails(&["frobnicate"]);
}

#[test]
fn help_lists_every_key_with_default() {
    let help = ok(&["train", "--help"]);
    let defaults = RunConfig::default();
    for k in KEYS {
        let flag = format!("--{}", k.name.replace('_', "-"));
        assert!(help.contains(&flag), "{flag} missing");
        assert!(help.contains(&format!("[default: {}]", k.value(&defaults))), "{} default missing", k.name);
    }
}
