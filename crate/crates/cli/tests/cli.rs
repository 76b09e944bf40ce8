use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use segdec::data::read_pgm;

const SMALL: &[&str] = &["--size", "32", "--channels", "8,8,8,8", "--seed", "2"];

fn segdec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segdec")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = segdec(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(SMALL).chain(extra).map(|s| s.to_string()).collect()
}

fn ok_owned(args: &[String]) -> String {
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

/// Generates 12 samples and trains one epoch; returns the checkpoint dir.
fn trained(root: &Path) -> std::path::PathBuf {
    let data = root.join("data");
    let run = root.join("run");
    let d = data.to_str().unwrap();
    ok_owned(&with(&["gen", "--count", "12", "--data", d], &[]));
    ok_owned(&with(
        &["train", "--data", d, "--epochs", "1", "--batch-size", "4", "--val-count", "4"],
        &["--out", run.to_str().unwrap()],
    ));
    run.join("checkpoint_last")
}

#[test]
fn usage_errors_exit_two_and_runtime_errors_exit_one() {
    assert_eq!(segdec(&["gradcheck", "everything"]).status.code(), Some(2));
    assert_eq!(segdec(&["gradcheck"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let gen = segdec(&["gen", "--count", "0", "--data", data.to_str().unwrap()]);
    assert_eq!(gen.status.code(), Some(2));
    assert_eq!(segdec(&["bench", "--set", "model.nonsense=1"]).status.code(), Some(2));

    let missing = dir.path().join("nowhere");
    let out = segdec(&["eval", "--checkpoint", missing.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn train_eval_heatmap_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let ckpt = trained(root);
    let d = root.join("data");
    let d = d.to_str().unwrap();
    let c = ckpt.to_str().unwrap();

    let log = fs::read_to_string(root.join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,step,loss,dsc"));
    assert_eq!(log.lines().count(), 2);
    let resolved = fs::read_to_string(root.join("run/run_config.resolved")).unwrap();
    assert!(resolved.contains("train.epochs = 1"), "{resolved}");

    let metrics = |name: &str| {
        let out = root.join(name);
        ok_owned(&with(
            &["eval", "--checkpoint", c, "--data", d, "--val-count", "4"],
            &["--out", out.to_str().unwrap()],
        ));
        fs::read_to_string(out.join("metrics.csv")).unwrap()
    };
    let first = metrics("eval1");
    assert_eq!(first, metrics("eval2"));
    assert_eq!(first.lines().count(), 4 + 2, "header, four samples, mean:\n{first}");

    let hm = root.join("hm");
    ok_owned(&with(&["heatmap", "--checkpoint", c, "--data", d, "--sample", "1"], &["--out", hm.to_str().unwrap()]));
    let hm = hm.join("heatmap");
    let mut sides = Vec::new();
    for e in fs::read_dir(&hm).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "pgm") {
            let (w, h, px) = read_pgm(&p).unwrap();
            assert_eq!(w, h);
            assert!(px.iter().all(|&v| v == 0) || (px.contains(&0) && px.contains(&255)));
            sides.push(w);
        }
    }
    sides.sort();
    assert_eq!(sides, [8, 16, 32]);

    let gates = fs::read_to_string(hm.join("tffa_gates.txt")).unwrap();
    let rows: Vec<&str> = gates.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let sum: f64 = row.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-4, "{row}");
    }
    let masks = fs::read_to_string(hm.join("smmm_masks.txt")).unwrap();
    assert_eq!(masks.lines().count(), 1 + 3 * 2 * 8);
    for row in masks.lines().skip(1) {
        let v: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!(v > 0.0 && v < 1.0, "{row}");
    }
}

#[test]
fn bench_reports_fourier_weights() {
    let dir = tempfile::tempdir().unwrap();
    let total = |fourier: &str| -> usize {
        let out = dir.path().join(fourier);
        let set = format!("tffa.fourier={fourier}");
        ok_owned(&with(&["bench", "--set", &set], &["--out", out.to_str().unwrap()]));
        let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
        let last = csv.lines().last().unwrap();
        assert!(last.starts_with("total,"));
        last.split(',').nth(1).unwrap().parse().unwrap()
    };
    let weights: usize = (0..3).map(|l| 2 * 8 * (32 >> l) * ((32 >> l) / 2 + 1)).sum();
    assert_eq!(total("true") - total("false"), weights);
}
