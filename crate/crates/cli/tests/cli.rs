use std::path::Path;
use std::process::{Command, Output};

use ragtrack_core::harness::{FrameRecord, RunHeader, RunLog};

fn ragtrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ragtrack"))
        .args(args)
        .env_remove("RAGTRACK_OUT")
        .env_remove("RAGTRACK_SEED")
        .output()
        .unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p).into_iter().map(|(n, b)| (format!("{}/{n}", p.file_name().unwrap().to_string_lossy()), b)));
        } else {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = ragtrack(&["gen", "--seed", "7", "--len", "6", "--edge", "64", "--size", "10", "--out", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 2 * 6 + 3);
    assert_eq!(fa, fb);
}

#[test]
fn eval_of_perfect_track() {
    let tmp = tempfile::tempdir().unwrap();
    let boxes = [[1.0, 2.0, 8.0, 8.0], [3.0, 2.0, 8.0, 6.0], [5.0, 4.0, 9.0, 8.0]];
    let frames = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| FrameRecord::new(i, *b, *b, None).unwrap())
        .collect();
    let header = RunHeader {
        sequence_seed: 0,
        config_seed: 0,
        frames: 3,
        atf_order: String::new(),
        gate: String::new(),
        pr_threshold: 20.0,
        npr_threshold: 0.2,
    };
    let log_path = tmp.path().join("run.jsonl");
    RunLog::from_frames(header, frames).unwrap().save(&log_path).unwrap();
    let csv = tmp.path().join("m.csv");
    let o = ragtrack(&["eval", log_path.to_str().unwrap(), "--csv", csv.to_str().unwrap()]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(csv).unwrap();
    let rows: Vec<(&str, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k, v.parse().unwrap())
        })
        .collect();
    assert!(text.starts_with("metric,value\n"));
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), ["PR", "SR", "NPR", "MPR", "MSR"]);
    assert_eq!(rows[0].1, 1.0);
    assert!((rows[1].1 - 20.0 / 21.0).abs() < 1e-12);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("s");
    assert_eq!(ragtrack(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ragtrack(&["gen", "--bogus"]).status.code(), Some(2));
    let o = ragtrack(&["track", "--sequence", seq.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--checkpoint"));
    let missing = tmp.path().join("none.ckpt");
    let o = ragtrack(&["track", "--checkpoint", missing.to_str().unwrap(), "--sequence", seq.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint not found"));
}

#[test]
fn gen_without_output_fails() {
    let o = ragtrack(&["gen"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("RAGTRACK_OUT"));
}

#[test]
fn selftest_passes() {
    let o = ragtrack(&["selftest"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().count() >= 6 && text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn gen_train_track_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n).to_str().unwrap().to_owned();
    let cfg = r#"{"encoder": {"channels": 16, "layers": 2, "heads": 2, "fusion_layers": [1, 2], "vocab_size": 64},
                 "train": {"steps": 2, "eval_frames": 2}}"#;
    std::fs::write(p("cfg.json"), cfg).unwrap();
    let run = |args: &[&str]| {
        let o = Command::new(env!("CARGO_BIN_EXE_ragtrack"))
            .args(args)
            .env("RAGTRACK_OUT", p("out"))
            .env("RAGTRACK_SEED", "3")
            .output()
            .unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["gen", "--len", "6", "--edge", "64", "--size", "10", "--count", "2"]);
    run(&["train", "--config", &p("cfg.json"), "--data", &p("out")]);
    assert!(tmp.path().join("out/model.ckpt").is_file());
    assert!(tmp.path().join("out/model.config.json").is_file());
    let losses = std::fs::read_to_string(tmp.path().join("out/model.loss.jsonl")).unwrap();
    assert_eq!(losses.lines().count(), 3);
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("out/model.config.json")).unwrap()).unwrap();
    assert_eq!(saved["seed"], 3);
    run(&["track", "--checkpoint", &p("out/model.ckpt"), "--sequence", &p("out/seq_001")]);
    let log = RunLog::load(&tmp.path().join("out/run.jsonl")).unwrap();
    assert_eq!(log.frames.len(), 6);
    run(&["eval", &p("out/run.jsonl"), "--csv", &p("m.csv")]);
    assert!(std::fs::read_to_string(p("m.csv")).unwrap().starts_with("metric,value\n"));
}
