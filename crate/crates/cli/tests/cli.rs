use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
[dataset]
sequences = 3
[dataset.synth]
frames = 4
height = 16
width = 16
env_height = 8
env_width = 16
[net]
height = 16
width = 16
env_height = 8
env_width = 16
patch = 4
dim = 16
heads = 2
depth = 1
[train]
steps = 2
keyframe_steps = 1
batch = 1
clip_frames = 2
[eval]
variance_runs = 2
max_sequences = 1
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_renderflow"))
            .args(args)
            .arg("--config")
            .arg(self.path("tiny.toml"))
            .env("RENDERFLOW_RUN_DIR", self.path("runs"))
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn data(&self) -> String {
        let data = self.path("data");
        self.ok(&["synth", "--seed", "7", "--out", data.to_str().unwrap()]);
        data.to_str().unwrap().to_string()
    }

    fn trained(&self) -> (String, String) {
        let data = self.data();
        let run = self.path("train");
        self.ok(&["train", "--data", &data, "--run", run.to_str().unwrap()]);
        (data, run.join("ckpt/final.rfck").to_str().unwrap().to_string())
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_writes_sequences_manifest_and_snapshot() {
    let sb = Sandbox::new();
    let data = PathBuf::from(sb.data());
    let manifest = json(&data.join("manifest.json"));
    assert_eq!(manifest["sequences"].as_array().unwrap().len(), 3);
    for i in 0..3 {
        assert!(data.join(format!("seq{i}.rfsq")).is_file());
    }
    let snapshot = fs::read_to_string(data.join("config.snapshot")).unwrap();
    assert!(snapshot.contains("seed = 7"));
}

#[test]
fn infer_is_bitwise_repeatable() {
    let sb = Sandbox::new();
    let (data, ckpt) = sb.trained();
    let input = format!("{data}/seq2");
    let a = sb.path("a");
    let b = sb.path("b");
    sb.ok(&["infer", "--ckpt", &ckpt, "--input", &input, "--run", a.to_str().unwrap()]);
    sb.ok(&["infer", "--ckpt", &ckpt, "--input", &input, "--run", b.to_str().unwrap()]);
    for i in 0..4 {
        let name = format!("images/seq2_{i:04}.png");
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name}");
    }
    let manifest = json(&a.join("manifest.json"));
    assert_eq!(manifest["command"], "infer");
    assert_eq!(manifest["checkpoints"]["forward"].as_str().unwrap().len(), 64);
    assert!(manifest["outputs"].as_array().unwrap().iter().any(|o| o == "report.json"));
}

#[test]
fn eval_reports_per_sequence_and_aggregate_rows() {
    let sb = Sandbox::new();
    let (data, ckpt) = sb.trained();
    let pred = sb.path("pred");
    sb.ok(&["infer", "--ckpt", &ckpt, "--input", &format!("{data}/seq1"), "--run", pred.to_str().unwrap()]);
    let report = sb.path("out/report.json");
    sb.ok(&[
        "eval",
        "--pred",
        pred.to_str().unwrap(),
        "--gt",
        &data,
        "--report",
        report.to_str().unwrap(),
    ]);
    let r = json(&report);
    let rows = r["rows"].as_array().unwrap();
    let labels: Vec<_> = rows.iter().map(|row| row["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["seq1", "all"]);
    for key in ["psnr", "ssim", "perceptual_proxy"] {
        assert!(rows[0][key].is_number(), "{key}");
    }
    assert!(report.with_extension("csv").is_file());
    assert!(r["notes"].as_array().unwrap().iter().any(|n| n.as_str().unwrap().contains("LPIPS")));
}

#[test]
fn eval_variance_of_ode_inference_is_zero() {
    let sb = Sandbox::new();
    let (data, ckpt) = sb.trained();
    let report = sb.path("var.json");
    sb.ok(&["eval", "--ckpt", &ckpt, "--gt", &data, "--report", report.to_str().unwrap()]);
    let r = json(&report);
    let m = &r["rows"][0];
    assert_eq!(m["mean_psnr_variance"].as_f64(), Some(0.0));
    assert_eq!(m["max_pixel_deviation"].as_f64(), Some(0.0));
}

#[test]
fn config_errors_name_the_field_and_exit_two() {
    let sb = Sandbox::new();
    let out = sb.run(&["train", "--set", "train.clip_frames=0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.clip_frames"));
    let out = sb.run(&["config-dump", "--set", "train.clip_frame=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.clip_frame"));
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let sb = Sandbox::new();
    assert_eq!(sb.run(&["bogus"]).status.code(), Some(1));
    assert_eq!(sb.run(&["infer"]).status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_renderflow")).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("edit-material"));
}

#[test]
fn config_dump_reflects_overrides() {
    let sb = Sandbox::new();
    let out = sb.ok(&["config-dump", "--set", "bridge.sigma=0.01"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("sigma = 0.01"));
    assert!(text.contains("dim = 16"));
}
