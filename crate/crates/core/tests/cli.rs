//! The binary end to end: synthetic data, training, every evaluation, exit codes.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srl-adapt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{args:?}: stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 10] = [
    "--set",
    "epochs=1",
    "--set",
    "batch_videos=4",
    "--set",
    "lr=0.002",
    "--set",
    "lora_rank=4",
    "--set",
    "model.vc.layers=1",
];

#[test]
fn synth_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    ok_json(&[
        "synth-data",
        "--out-dir",
        s(&data),
        "--set",
        "data.videos=12",
        "--set",
        "holdout=4",
    ]);
    for f in ["train.json", "test.json", "frames.fgemb", "compose.jsonl", "synth_config.json"] {
        assert!(data.join(f).exists(), "{f} missing");
    }
    let train = data.join("train.json");
    let test = data.join("test.json");
    let frames = data.join("frames.fgemb");

    let mut args = vec!["train", "--annotations", s(&train), "--frames", s(&frames), "--out-dir", s(&run_dir)];
    args.extend(SMALL);
    let report = ok_json(&args);
    assert_eq!(report["epochs_done"], 1);
    assert!(report["epoch_losses"][0].as_f64().unwrap().is_finite());
    let ckpt = run_dir.join("ckpt_epoch1.fgckpt");
    assert!(ckpt.exists() && run_dir.join("config.json").exists() && run_dir.join("trainlog.jsonl").exists());

    // Resume one more epoch from the checkpoint.
    let mut args = vec![
        "train",
        "--annotations",
        s(&train),
        "--frames",
        s(&frames),
        "--out-dir",
        s(&run_dir),
        "--resume",
        s(&ckpt),
    ];
    args.extend(SMALL);
    args.extend(["--set", "epochs=2"]);
    assert_eq!(ok_json(&args)["epochs_done"], 2);
    let ckpt = run_dir.join("ckpt_epoch2.fgckpt");

    let common = ["--annotations", s(&test), "--frames", s(&frames), "--ckpt", s(&ckpt)];
    for (level, queries) in [("video", 4), ("event", 20)] {
        let mut a = vec!["eval-retrieval", "--level", level];
        a.extend(common);
        let m = ok_json(&a);
        assert_eq!(m["level"], level);
        assert_eq!(m["queries"], queries);
        for key in ["R@1", "R@5", "R@10", "R@50"] {
            assert!((0.0..=100.0).contains(&m[key].as_f64().unwrap()), "{level}: {m}");
        }
        assert!(m["MnR"].as_f64().unwrap() >= 1.0 && m["MdR"].as_f64().unwrap() >= 1.0);
    }
    let mut a = vec!["eval-classify"];
    a.extend(common);
    let c = ok_json(&a);
    assert_eq!(c["samples"], 20);
    assert!(c["top1"].as_f64().unwrap() <= c["top5"].as_f64().unwrap());

    let cases = data.join("compose.jsonl");
    let mut a = vec!["eval-compose", "--cases", s(&cases)];
    a.extend(common);
    let c = ok_json(&a);
    assert_eq!(c["cases"], 20);
    let acc = 100.0 * c["correct"].as_f64().unwrap() / 20.0;
    assert_eq!(c["accuracy"].as_f64().unwrap(), acc);

    let inspect = ok_json(&["inspect-ckpt", "--ckpt", s(&ckpt)]);
    let entries = inspect["entries"].as_array().unwrap();
    assert_eq!(inspect["count"].as_u64().unwrap() as usize, entries.len());
    assert!(entries.iter().any(|e| e["name"].as_str().unwrap().contains(".lora.B")));
}

#[test]
fn prompt_and_negative_generation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok_json(&["synth-data", "--out-dir", s(&data), "--set", "data.videos=6", "--set", "holdout=0"]);
    let ann = data.join("train.json");
    let out = run(&["gen-prompts", "--annotations", s(&ann)]);
    assert!(out.status.success());
    let lines: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 30);
    assert!(lines[0]["text"].as_str().unwrap().starts_with("In this photo, the action is "));

    let out = run(&["gen-negatives", "--annotations", s(&ann), "--nvr", "2", "--nrn", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let kinds: Vec<String> = text
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert!(kinds.iter().any(|k| k == "hn_verb_role"));
    assert!(kinds.iter().any(|k| k == "hn_role_noun"));

    // Same seed, same output.
    let again = run(&["gen-negatives", "--annotations", s(&ann), "--nvr", "2", "--nrn", "1"]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    let missing = run(&["gen-prompts", "--annotations", "/nonexistent/a.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!missing.stderr.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let bad = run(&["synth-data", "--out-dir", s(dir.path()), "--set", "data.no_such_key=1"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("no_such_key"));
}
