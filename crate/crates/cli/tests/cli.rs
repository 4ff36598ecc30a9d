use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn conrf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conrf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = conrf(args);
    assert!(
        out.status.success(),
        "conrf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A toy workspace run through all three stages with a handful of steps each.
struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    fn ck(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }
}

fn workspace() -> &'static Workspace {
    static W: OnceLock<Workspace> = OnceLock::new();
    W.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["make-toy", "--out", s(&root), "--styles", "8", "--heldout", "2", "--style-size", "32"]);
        let w = Workspace { _dir: dir, root };
        let c = w.config();
        ok(&["train-field", "--config", s(&c), "--steps", "3", "--out", s(&w.ck("field"))]);
        ok(&[
            "train-style", "--config", s(&c), "--steps", "2",
            "--checkpoint", s(&w.ck("field")), "--out", s(&w.ck("style")),
        ]);
        ok(&["build-cache", "--config", s(&c)]);
        ok(&[
            "train-select", "--config", s(&c), "--steps", "2",
            "--checkpoint", s(&w.ck("style")), "--out", s(&w.ck("select")),
        ]);
        w
    })
}

#[test]
fn toy_workspace_end_to_end() {
    let w = workspace();
    for stage in ["field", "style", "select"] {
        let ck = w.ck(stage);
        assert!(ck.join("manifest.json").is_file() && ck.join("tensors.safetensors").is_file());
        let log = std::fs::read_to_string(ck.join("metrics.jsonl")).unwrap();
        let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert!(first["total"].as_f64().unwrap().is_finite());
    }
    let manifest: Value = serde_json::from_slice(&std::fs::read(w.ck("select").join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stages"], serde_json::json!(["field", "stylize", "select"]));
}

#[test]
fn render_text_image_and_local() {
    let w = workspace();
    let dir = tempfile::tempdir().unwrap();
    let ck = w.ck("select");
    let out = dir.path().join("text.png");
    ok(&["render", "--checkpoint", s(&ck), "--style-text", "red and blue stripes", "--out", s(&out)]);
    let img = conrf_core::image::Image::load(&out, false).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));

    let style = w.root.join("styles").join("style_000.png");
    let out = dir.path().join("image.png");
    ok(&["render", "--checkpoint", s(&ck), "--style-image", s(&style), "--width", "32", "--height", "32", "--out", s(&out)]);
    let img = conrf_core::image::Image::load(&out, false).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));

    let out = dir.path().join("local.png");
    let overlay = dir.path().join("overlay.png");
    ok(&[
        "render", "--checkpoint", s(&ck), "--style-text", "red and blue stripes",
        "--content-text", "red ball", "--style2-image", s(&style), "--threshold", "-0.2",
        "--out", s(&out), "--overlay", s(&overlay),
    ]);
    assert!(out.is_file() && overlay.is_file());
}

#[test]
fn render_orbit_writes_a_trajectory() {
    let w = workspace();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("orbit");
    let printed = ok(&[
        "render", "--checkpoint", s(&w.ck("style")), "--style-text", "green and white dots",
        "--path", "orbit:3", "--width", "16", "--height", "16", "--samples", "16", "--out", s(&out),
    ]);
    assert_eq!(printed.lines().count(), 3);
    for i in 0..3 {
        assert!(out.join(format!("{i:04}.png")).is_file());
    }
}

#[test]
fn render_errors_have_exit_codes() {
    let w = workspace();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.png");
    // local mode needs the selection head
    let r = conrf(&[
        "render", "--checkpoint", s(&w.ck("style")), "--style-text", "red",
        "--content-text", "red ball", "--style2-text", "blue", "--out", s(&out),
    ]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    // a second style without a content prompt
    let r = conrf(&["render", "--checkpoint", s(&w.ck("select")), "--style-text", "red", "--style2-text", "blue", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    let r = conrf(&["render", "--checkpoint", s(&dir.path().join("none")), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    let r = conrf(&["render", "--checkpoint", s(&w.ck("select")), "--path", "spiral:3", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn eval_reports() {
    let w = workspace();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    ok(&["eval", "--checkpoint", s(&w.ck("field")), "--pairs", "short", "--samples", "16", "--out", s(&out)]);
    let report: Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(report["short"]["pairs"], 15);
    assert!(report.get("long").is_none());
    assert!(report.get("perceptual_metric").is_none());
    assert!(report["pairs"].as_array().unwrap().iter().all(|p| p.get("lpips").is_none()));

    ok(&[
        "eval", "--checkpoint", s(&w.ck("style")), "--style-text", "red and blue stripes",
        "--perceptual", "--samples", "16", "--out", s(&out),
    ]);
    let report: Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert!(report["long"]["ssim"].as_f64().is_some());
    assert!(report["short"]["lpips"].as_f64().unwrap() >= 0.0);
}

#[test]
fn missing_stage_one_checkpoint_exits_2() {
    let w = workspace();
    let dir = tempfile::tempdir().unwrap();
    let r = conrf(&[
        "train-style", "--config", s(&w.config()), "--steps", "1",
        "--checkpoint", s(&dir.path().join("missing")), "--out", s(&dir.path().join("o")),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("no checkpoint"));
}

#[test]
fn selection_without_cache_exits_2() {
    let w = workspace();
    let dir = tempfile::tempdir().unwrap();
    let r = Command::new(env!("CARGO_BIN_EXE_conrf"))
        .args([
            "train-select", "--config", s(&w.config()), "--steps", "1",
            "--checkpoint", s(&w.ck("style")), "--out", s(&dir.path().join("o")),
        ])
        .env("CONRF_DATA__CACHE", s(&dir.path().join("empty-cache")))
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("build-cache"));
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("bad.toml");
    std::fs::write(&c, "[field]\nsteps = \"lots\"\n").unwrap();
    let r = conrf(&["train-field", "--config", s(&c), "--out", s(&dir.path().join("o"))]);
    assert_eq!(r.status.code(), Some(2));
    let r = conrf(&["train-field", "--config", s(&dir.path().join("nope.toml")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn seed_controls_training() {
    let w = workspace();
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        ok(&["train-field", "--config", s(&w.config()), "--steps", "2", "--seed", seed, "--out", s(&out)]);
        std::fs::read(out.join("tensors.safetensors")).unwrap()
    };
    let a = run("5", "a");
    assert_eq!(a, run("5", "b"));
    assert_ne!(a, run("6", "c"));
}

#[test]
fn help_lists_every_command() {
    let help = ok(&["--help"]);
    for cmd in ["make-toy", "build-cache", "train-field", "train-style", "train-select", "render", "eval", "serve"] {
        assert!(help.contains(cmd), "{cmd} missing from --help");
    }
}
