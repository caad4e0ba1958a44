use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use approx::assert_abs_diff_eq;
use vs30_core::datapipe::sm3c::{self, Sm3c};
use vs30_core::evalreport::EvalReport;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vs30"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "vs30 {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY: [&str; 8] = ["--stations", "9", "--events", "2", "--seed", "4", "--record-s", "40"];

fn synth(dir: &Path, out: &str) {
    let mut args = vec!["synth", "--out", out];
    args.extend(TINY);
    ok(dir, &args);
}

#[test]
fn synth_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "a");
    synth(d.path(), "b");
    let mut files: Vec<_> = fs::read_dir(d.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    files.sort();
    assert!(files.len() >= 3);
    for f in files {
        let (x, y) = (d.path().join("a").join(&f), d.path().join("b").join(&f));
        if x.is_file() {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{f:?}");
        }
    }
    let wf_a = d.path().join("a/waveforms");
    for e in fs::read_dir(&wf_a).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(
            fs::read(wf_a.join(&name)).unwrap(),
            fs::read(d.path().join("b/waveforms").join(&name)).unwrap()
        );
    }
}

#[test]
fn usage_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), &["synth", "--stations", "0", "--events", "3", "--out", "c"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert_eq!(stderr(&out).lines().count(), 1);
    let out = run(d.path(), &["synth", "--stations", "3", "--events", "3", "--out", "c", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(d.path(), &["train", "--fold", "0", "--out", "r", "--set", "train.no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = run(d.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn every_subcommand_has_help() {
    let d = tempfile::tempdir().unwrap();
    for sub in ["synth", "split", "train", "pretrain", "transfer-train", "evaluate", "predict", "report"] {
        let text = ok(d.path(), &[sub, "--help"]);
        assert!(text.contains("Usage: vs30 "), "{sub}");
        assert!(text.contains("--"), "{sub}");
    }
}

#[test]
fn end_to_end_cross_validation() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    synth(p, "corpus");
    ok(p, &["split", "--manifest", "corpus", "--folds", "3", "--seed", "2", "--out", "folds.csv"]);
    let small = [
        "--set", "train.epochs=1", "--set", "train.batch_size=4", "--set", "model.resnet.stages=[4]",
        "--set", "model.resnet.stem_filters=4", "--set", "model.resnet.blocks_per_stage=1",
    ];
    let mut evals = Vec::new();
    for fold in 0..3 {
        let f = fold.to_string();
        let run_dir = format!("runs/{fold}");
        let mut args = vec!["train", "--manifest", "corpus", "--folds", "folds.csv", "--fold", &f, "--out", &run_dir];
        args.extend(small);
        ok(p, &args);
        for file in ["best.ckpt", "last.ckpt", "loss_trace.csv", "config.toml", "run.log"] {
            assert!(p.join(&run_dir).join(file).is_file(), "{file}");
        }
        let ev = format!("evals/{fold}");
        let out = ok(p, &["evaluate", "--checkpoint", &format!("{run_dir}/best.ckpt"), "--manifest", "corpus", "--out", &ev]);
        assert!(!out.is_empty());
        evals.push(ev);
    }
    let mut args = vec!["report", "--out", "cv", "--runs"];
    args.extend(evals.iter().map(String::as_str));
    let summary = ok(p, &args);
    assert!(summary.contains("Overall"));

    let folds: Vec<EvalReport> = evals.iter().map(|e| EvalReport::load(&p.join(e)).unwrap()).collect();
    let merged = EvalReport::load(&p.join("cv")).unwrap();
    let n: usize = folds.iter().map(EvalReport::n_stations).sum();
    assert_eq!(merged.n_stations(), n);
    let weighted = folds.iter().map(|r| r.overall_abs_mean_error * r.n_stations() as f64).sum::<f64>() / n as f64;
    assert_abs_diff_eq!(merged.overall_abs_mean_error, weighted, epsilon = 1e-6);
    assert!(p.join("cv/baseline/report.json").is_file());

    // a record too short for a 15 s window around its PGA
    let rec = Sm3c {
        sample_rate_hz: 100.0,
        channels: std::array::from_fn(|c| (0..1000).map(|i| ((i * (c + 3)) as f32 * 0.01).sin()).collect()),
    };
    sm3c::write(&p.join("short.sm3c"), &rec).unwrap();
    let out = run(
        p,
        &["predict", "--checkpoint", "runs/0/best.ckpt", "--record", "short.sm3c", "--lat", "39.1", "--lon", "31.2"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("not zero-padded"), "{}", stderr(&out));

    // a long enough record predicts a positive velocity
    let wf = fs::read_dir(p.join("corpus/waveforms")).unwrap().next().unwrap().unwrap().path();
    let out = ok(
        p,
        &["predict", "--checkpoint", "runs/0/best.ckpt", "--record", wf.to_str().unwrap(), "--lat", "39.1", "--lon", "31.2"],
    );
    assert!(out.trim().parse::<f64>().unwrap() > 0.0);

    // resuming with a changed learning rate is refused
    let mut args = vec![
        "train", "--manifest", "corpus", "--folds", "folds.csv", "--fold", "0", "--out", "runs/0", "--resume",
        "--set", "train.base_lr=0.5",
    ];
    args.extend(small);
    let out = run(p, &args);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("config hash"));

    let out = run(
        p,
        &["train", "--manifest", "corpus", "--folds", "folds.csv", "--fold", "7", "--out", "runs/x", "--set", "train.epochs=1"],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}
