use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualstream"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("small.cfg");
    fs::write(
        &p,
        "[data]\nn_scenes = 10\ncanvas = 32\nn_classes = 3\n\n[model]\nd_f = 8\nd_app = 8\nd_pos = 8\nheads = 2\nenc_layers = 1\ndec_layers = 2\npatch = 8\ncap_app = 4\ncap_pos = 4\nn_random = 2\nvertices = 8\n\n[train]\nsteps = 3\nbatch = 2\neval_every = 2\n",
    )
    .unwrap();
    p
}

#[test]
fn generate_counts_refusal_and_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("data");
    let o = run(&["generate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("train 9 scenes"), "{text}");
    assert!(text.contains("val 1 scenes"), "{text}");
    let first = fs::read(out.join("train.txt")).unwrap();

    let o = run(&["generate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["generate", "--config", s(&cfg), "--out", s(&out), "--force"]);
    assert!(o.status.success());
    assert_eq!(fs::read(out.join("train.txt")).unwrap(), first);
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    assert!(run(&["generate", "--config", s(&cfg), "--out", s(&data)]).status.success());
    let out = dir.path().join("run");
    let o = run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.jsonl", "summary.txt", "final/manifest.txt", "best/manifest.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let recs: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.iter().filter(|r| r["kind"] == "step").count(), 3);
    assert!(recs.iter().all(|r| r["config_hash"].is_string() && r["seed"] == 0));

    let ck = out.join("final");
    let res = dir.path().join("eval.jsonl");
    let a = run(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&res)]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = run(&["eval", "--checkpoint", s(&ck), "--data", s(&data)]);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(fs::read_to_string(&res).unwrap().lines().count(), 7 + 3);

    let o = run(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--config", s(&cfg), "--seed", "5"]);
    assert_eq!(o.status.code(), Some(1), "hash mismatch must be refused");
    let o = run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1), "existing run must be refused");
}

#[test]
fn eval_self_tests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    assert!(run(&["generate", "--config", s(&cfg), "--out", s(&data)]).status.success());
    let train = data.join("train.txt");
    let o = run(&["eval", "--config", s(&cfg), "--data", s(&train), "--oracle"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().next().unwrap().ends_with("1.0000"), "{text}");
    let o = run(&["eval", "--config", s(&cfg), "--data", s(&train), "--empty"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().next().unwrap().ends_with("0.0000"), "{text}");
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let o = run(&["eval", "--data", "/nonexistent/val.txt", "--oracle"]);
    assert_eq!(o.status.code(), Some(3));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "[model]\nstreem = dual\n").unwrap();
    let o = run(&["generate", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("streem"));
}

#[test]
fn gradcheck_reports_and_negative_control() {
    let o = run(&["gradcheck"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(o.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 12);
    let o = run(&["gradcheck", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(2));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("FAIL")).count(), 12);
}

#[test]
fn ablate_single_axis_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("abl");
    let o = run(&["ablate", "--config", s(&cfg), "--axis", "stream", "--seeds", "0", "--steps", "1", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let rows = json["axes"][0]["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["single", "dual"]);
    assert_eq!(run(&["ablate", "--axis", "colour", "--out", s(&out), "--force"]).status.code(), Some(1));
}
