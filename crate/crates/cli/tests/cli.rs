use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn abfpe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abfpe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, count: usize) -> PathBuf {
    let out = dir.join("data");
    let o = abfpe(&["synth", "--count", &count.to_string(), "--seed", "7", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("manifest.jsonl")
}

const TINY: &str = r#"
seed = 3

[model]
input_size = 64
anchor_count = 8
neck_channels = 16

[train]
epochs = 2
batch_size = 2
checkpoint_every = 0
"#;

fn train_tiny(dir: &Path, manifest: &Path) -> PathBuf {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.join("run");
    let o = abfpe(&["train", "--config", s(&cfg), "--data", s(manifest), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn synth_writes_deterministic_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = abfpe(&["synth", "--count", "10", "--seed", "7", "--out", s(out)]);
        assert!(o.status.success());
        assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), s(&out.join("manifest.jsonl")));
    }
    let ma = std::fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(ma.lines().count(), 10);
    assert_eq!(ma, std::fs::read_to_string(b.join("manifest.jsonl")).unwrap());
    assert_eq!(
        std::fs::read(a.join("images/00004.png")).unwrap(),
        std::fs::read(b.join("images/00004.png")).unwrap()
    );
    assert!(a.join("synth_config.json").exists());

    assert_eq!(abfpe(&["synth", "--count", "10"]).status.code(), Some(2));
    assert_eq!(abfpe(&["synth", "--count", "0", "--out", s(&a)]).status.code(), Some(2));
}

#[test]
fn train_snapshot_reproduces_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 5);
    let run = train_tiny(dir.path(), &manifest);
    for f in ["model.ckpt", "model.json", "train_log.csv", "iterations.csv", "run_config.toml"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let again = dir.path().join("again");
    let o = abfpe(&["train", "--config", s(&run.join("run_config.toml")), "--out", s(&again)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(run.join("model.ckpt")).unwrap(),
        std::fs::read(again.join("model.ckpt")).unwrap()
    );
    assert_eq!(log, std::fs::read_to_string(again.join("train_log.csv")).unwrap());
}

#[test]
fn train_validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 2);
    let out = dir.path().join("run");
    let o = abfpe(&["train", "--data", s(&manifest), "--out", s(&out), "--epochs", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.join("model.ckpt").exists());
    let o = abfpe(&["train", "--data", s(&dir.path().join("missing.jsonl")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nepochz = 3\n").unwrap();
    let o = abfpe(&["train", "--config", s(&bad), "--data", s(&manifest), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_oracle_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 5);
    let report = dir.path().join("oracle.json");
    let o = abfpe(&["eval", "--oracle", "--data", s(&manifest), "--out", s(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = String::from_utf8_lossy(&o.stdout);
    assert!(line.contains("f1@10 1.0000") && line.contains("f1@15 1.0000"), "{line}");

    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in [
        "schema_version",
        "avg_pixel_error",
        "per_threshold",
        "cde",
        "actual_fingertips",
        "detected_fingertips",
        "metadata",
    ] {
        assert!(json.get(key).is_some(), "{key} missing");
    }
    assert_eq!(json["metadata"]["deltas"], serde_json::json!([10.0, 15.0]));

    let shifted = abfpe(&["eval", "--oracle", "--oracle-shift", "8,0", "--deltas", "5,10", "--data", s(&manifest)]);
    let line = String::from_utf8_lossy(&shifted.stdout);
    assert!(line.contains("f1@5 0.0000") && line.contains("f1@10 1.0000"), "{line}");

    let run = train_tiny(dir.path(), &manifest);
    let out = dir.path().join("model_eval.json");
    let ckpt = run.join("model.ckpt");
    let o = abfpe(&["eval", "--checkpoint", s(&ckpt), "--data", s(&manifest), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(json["metadata"]["checkpoint_sha256"].as_str().unwrap().len(), 64);

    let o = abfpe(&["eval", "--checkpoint", s(&ckpt), "--data", s(&manifest), "--anchors", "24"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(abfpe(&["eval", "--data", s(&manifest)]).status.code(), Some(2));
    let o = abfpe(&["eval", "--oracle", "--data", s(&manifest), "--deltas", "-1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn predict_writes_overlay_and_coordinates() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 5);
    let run = train_tiny(dir.path(), &manifest);
    let ckpt = run.join("model.ckpt");
    let image = dir.path().join("data/images/00001.png");
    let overlay = dir.path().join("pred/overlay.png");
    let o = abfpe(&[
        "predict", "--checkpoint", s(&ckpt), "--image", s(&image), "--bbox", "0.2,0.2,0.7,0.8", "--out", s(&overlay),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let tips = json["fingertips"].as_array().unwrap();
    assert!(tips.len() <= 5);
    for t in tips {
        let (x, y) = (t["x"].as_f64().unwrap(), t["y"].as_f64().unwrap());
        assert!((0.0..=640.0).contains(&x) && (0.0..=480.0).contains(&y));
    }
    let img = image::open(&overlay).unwrap();
    assert_eq!((img.width(), img.height()), (640, 480));
    assert!(overlay.with_extension("json").exists());

    let sidecar = dir.path().join("boxes.jsonl");
    std::fs::write(&sidecar, "{\"image\":\"images/00001.png\",\"bbox\":[0.2,0.2,0.7,0.8]}\n").unwrap();
    let o = abfpe(&[
        "predict", "--checkpoint", s(&ckpt), "--image", s(&image), "--boxes", s(&sidecar), "--out", s(&overlay),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let base = ["predict", "--checkpoint", s(&ckpt), "--out", s(&overlay), "--image"];
    let bad_box = [&base[..], &[s(&image), "--bbox", "0.7,0.2,0.2,0.8"]].concat();
    assert_eq!(abfpe(&bad_box).status.code(), Some(2));
    let missing = dir.path().join("nope.png");
    let no_image = [&base[..], &[s(&missing), "--bbox", "0.2,0.2,0.7,0.8"]].concat();
    assert_eq!(abfpe(&no_image).status.code(), Some(1));
}

#[test]
fn plot_cde_curves() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 4);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    assert!(abfpe(&["eval", "--oracle", "--data", s(&manifest), "--out", s(&a)]).status.success());
    let o = abfpe(&["eval", "--oracle", "--oracle-shift", "3,4", "--data", s(&manifest), "--out", s(&b)]);
    assert!(o.status.success());

    let svg = dir.path().join("one.svg");
    assert!(abfpe(&["plot-cde", s(&a), "--out", s(&svg)]).status.success());
    let text = std::fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("class=\"cde\"").count(), 1);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&a).unwrap()).unwrap();
    let last = json["cde"].as_array().unwrap().last().unwrap()[1].as_f64().unwrap();
    assert_eq!(last, 1.0);

    let svg2 = dir.path().join("two.svg");
    let o = abfpe(&["plot-cde", s(&a), s(&b), "--labels", "exact,shifted", "--out", s(&svg2)]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&svg2).unwrap();
    assert_eq!(text.matches("class=\"cde\"").count(), 2);
    assert!(text.contains(">exact<") && text.contains(">shifted<"));

    assert_eq!(abfpe(&["plot-cde", "--out", s(&svg)]).status.code(), Some(2));
    let mut old = json.clone();
    old["schema_version"] = serde_json::json!(0);
    let old_path = dir.path().join("old.json");
    std::fs::write(&old_path, old.to_string()).unwrap();
    assert_eq!(abfpe(&["plot-cde", s(&old_path), "--out", s(&svg)]).status.code(), Some(2));
}

#[test]
fn stats_prints_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 6);
    let o = abfpe(&["stats", "--data", s(&manifest)]);
    assert!(o.status.success());
    let json: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(json["histogram"].as_array().unwrap().len(), 20);
}
