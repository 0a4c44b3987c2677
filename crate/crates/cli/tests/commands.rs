use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dppvae_cli::manifest::{read_manifest, sha256_hex};
use dppvae_cli::tensor::decode_matrix;
use dppvae_core::data::{encode_idx_images, encode_idx_labels};
use dppvae_core::eval::{read_frames_jsonl, MetricsReport};
use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dppvae"))
}

fn blob_config() -> Value {
    json!({
        "seed": 3,
        "data": {
            "kind": "blobs",
            "n_per_class": [150, 150],
            "centers": [[2.0, 0.0, 0.0], [-2.0, 0.0, 0.0]],
            "noise_std": 1.0,
            "imbalance": {"total": 200, "ratios": [3.0, 1.0], "minor_class": 1},
            "test_per_class": 40,
            "reference_per_class": 60
        },
        "model": {"latent_dim": 2, "hidden": [8], "prior": {"kind": "dpp", "alpha": 1000.0, "rho": 1.0, "sigma": 1.0}},
        "train": {"epochs": 2, "batch_size": 50},
        "classify": {"l2_grid": [0.01, 0.1]},
        "generate": {"n_samples": 300}
    })
}

fn spike_config() -> Value {
    json!({
        "seed": 5,
        "data": {"kind": "spikes"},
        "model": {"latent_dim": 3, "hidden": [16]},
        "train": {"epochs": 3, "batch_size": 32},
        "replay": {"grid_size": 20}
    })
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self, name: &str, value: &Value) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, serde_json::to_string_pretty(value).unwrap()).unwrap();
        p
    }

    fn run(&self, command: &str, config: &Path, out: &str, extra: &[&str]) -> Output {
        bin()
            .arg(command)
            .arg("--config")
            .arg(config)
            .arg("--out")
            .arg(self.path(out))
            .args(extra)
            .output()
            .unwrap()
    }

    fn run_ok(&self, command: &str, config: &Path, out: &str, extra: &[&str]) -> PathBuf {
        let o = self.run(command, config, out, extra);
        assert!(o.status.success(), "{command} failed: {}", String::from_utf8_lossy(&o.stderr));
        PathBuf::from(String::from_utf8(o.stdout).unwrap().trim())
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn train_writes_one_loss_row_per_step() {
    let ws = Workspace::new();
    let cfg = ws.config("c.json", &blob_config());
    let dir = ws.run_ok("train", &cfg, "out", &[]);
    assert_eq!(dir, ws.path("out/train-seed3"));
    let csv = fs::read_to_string(dir.join("loss.csv")).unwrap();
    // 200 points in batches of 50 for 2 epochs
    assert_eq!(csv.lines().count(), 1 + 8);
    assert_eq!(csv.lines().next().unwrap(), "epoch,step,batch_size,recon,kld,total");
}

#[test]
fn manifest_lists_every_file_with_hashes() {
    let ws = Workspace::new();
    let cfg = ws.config("c.json", &blob_config());
    let dir = ws.run_ok("train", &cfg, "out", &["--override", "train.epochs=1"]);
    let m = read_manifest(&dir).unwrap();
    assert_eq!(m.command, "train");
    assert_eq!(m.seed, 3);
    assert_eq!(m.config["train"]["epochs"], json!(1));
    assert!(m.overrides.iter().any(|o| o == "train.epochs=1"));
    assert!(m.timings_s.contains_key("train"));
    let mut listed: Vec<&str> = m.artifacts.iter().map(|a| a.path.as_str()).collect();
    listed.sort();
    let mut on_disk: Vec<String> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    assert_eq!(listed, on_disk);
    for a in &m.artifacts {
        assert_eq!(a.sha256, sha256_hex(&fs::read(dir.join(&a.path)).unwrap()));
    }
    assert_eq!(m.config_hash.len(), 64);
}

#[test]
fn new_seed_does_not_overwrite_previous_runs() {
    let ws = Workspace::new();
    let cfg = ws.config("c.json", &blob_config());
    let a = ws.run_ok("train", &cfg, "out", &["--seed", "1", "--override", "train.epochs=1"]);
    let before = fs::read(a.join("manifest.json")).unwrap();
    let b = ws.run_ok("train", &cfg, "out", &["--seed", "2", "--override", "train.epochs=1"]);
    assert_ne!(a, b);
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), before);
    assert_ne!(read_manifest(&a).unwrap().config_hash, read_manifest(&b).unwrap().config_hash);
}

#[test]
fn malformed_config_exits_2_without_outputs() {
    let ws = Workspace::new();
    let broken = ws.path("broken.json");
    fs::write(&broken, "{\"data\": {\"kind\": \"blobs\",").unwrap();
    assert_eq!(code(&ws.run("train", &broken, "out", &[])), 2);

    let mut unknown = blob_config();
    unknown["train"]["epoch"] = json!(3);
    let cfg = ws.config("unknown.json", &unknown);
    assert_eq!(code(&ws.run("train", &cfg, "out", &[])), 2);

    let mut invalid = blob_config();
    invalid["model"]["prior"]["sigma"] = json!(-1.0);
    let cfg = ws.config("invalid.json", &invalid);
    assert_eq!(code(&ws.run("train", &cfg, "out", &[])), 2);

    let cfg = ws.config("ok.json", &blob_config());
    assert_eq!(code(&ws.run("train", &cfg, "out", &["--override", "nonsense"])), 2);
    assert_eq!(code(&ws.run("train", &ws.path("missing.json"), "out", &[])), 2);
    assert!(!ws.path("out").exists());
}

#[test]
fn missing_checkpoint_exits_3() {
    let ws = Workspace::new();
    let cfg = ws.config("c.json", &blob_config());
    for command in ["classify", "generate"] {
        assert_eq!(code(&ws.run(command, &cfg, "out", &[])), 3, "{command}");
    }
    let spikes = ws.config("s.json", &spike_config());
    assert_eq!(code(&ws.run("replay", &spikes, "out", &[])), 3);
    assert!(!ws.path("out").exists());
}

#[test]
fn divergent_training_exits_4() {
    let ws = Workspace::new();
    let mut v = blob_config();
    v["train"]["learning_rate"] = json!(1e200);
    v["train"]["epochs"] = json!(5);
    v["model"]["prior"] = json!({"kind": "standard_normal"});
    let cfg = ws.config("c.json", &v);
    assert_eq!(code(&ws.run("train", &cfg, "out", &[])), 4);
    assert!(!ws.path("out").exists());
}

#[test]
fn holdout_confusion_rows_match_test_counts() {
    let ws = Workspace::new();
    let cfg = ws.config("c.json", &blob_config());
    ws.run_ok("train", &cfg, "out", &[]);
    let dir = ws.run_ok("classify", &cfg, "out", &[]);
    let report: MetricsReport = serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    for row in &report.confusion {
        assert_eq!(row.iter().sum::<usize>(), 40);
    }
    let csv = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let first: Vec<&str> = csv.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(first, ["class", "0", "1", "avg"]);
    let timing: Value = serde_json::from_str(&fs::read_to_string(dir.join("timing.json")).unwrap()).unwrap();
    assert!(timing["train_s"].as_f64().unwrap() > 0.0);
}

#[test]
fn spike_classification_emits_odor_table() {
    let ws = Workspace::new();
    let cfg = ws.config("s.json", &spike_config());
    ws.run_ok("train", &cfg, "out", &[]);
    let dir = ws.run_ok("classify", &cfg, "out", &[]);
    let csv = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let first: Vec<&str> = csv.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(first, ["class", "A", "B", "C", "D", "E", "avg"]);
    let report: MetricsReport = serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report.folds.len(), 6);
    // 6 folds x 4 trials per class
    assert!(report.confusion.iter().all(|r| r.iter().sum::<usize>() == 24));
}

#[test]
fn classify_timing_grows_with_epochs() {
    let ws = Workspace::new();
    let total = |epochs: usize, out: &str| {
        let mut v = spike_config();
        v["train"]["epochs"] = json!(epochs);
        let cfg = ws.config(&format!("{out}.json"), &v);
        ws.run_ok("train", &cfg, out, &[]);
        let dir = ws.run_ok("classify", &cfg, out, &[]);
        let t: Value = serde_json::from_str(&fs::read_to_string(dir.join("timing.json")).unwrap()).unwrap();
        t["train_s"].as_f64().unwrap()
    };
    let short = total(1, "short");
    let long = total(40, "long");
    assert!(long > short, "{long} vs {short}");
}

#[test]
fn generation_audit_sums_to_100_and_shares_latents() {
    let ws = Workspace::new();
    let mut latents = Vec::new();
    for (name, prior) in [("dpp", blob_config()["model"]["prior"].clone()), ("vae", json!({"kind": "standard_normal"}))] {
        let mut v = blob_config();
        v["model"]["prior"] = prior;
        let cfg = ws.config(&format!("{name}.json"), &v);
        ws.run_ok("train", &cfg, name, &[]);
        let dir = ws.run_ok("generate", &cfg, name, &[]);
        let audit: Value = serde_json::from_str(&fs::read_to_string(dir.join("audit.json")).unwrap()).unwrap();
        let total: f64 = audit["percentages"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
        assert!((total - 100.0).abs() < 1e-9);
        let counts: u64 = audit["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
        assert_eq!(counts, 300);
        let samples = decode_matrix(&fs::read(dir.join("samples.bin")).unwrap()).unwrap();
        assert_eq!(samples.shape(), (300, 3));
        latents.push(read_manifest(&dir).unwrap().notes["latents_sha256"].clone());
    }
    assert_eq!(latents[0], latents[1]);
}

#[test]
fn replay_exports_default_grid_and_svg_is_separate() {
    let ws = Workspace::new();
    let cfg = ws.config("s.json", &spike_config());
    ws.run_ok("train", &cfg, "out", &[]);
    let plain = ws.run_ok("replay", &cfg, "out", &[]);
    let bytes = fs::read(plain.join("frames.jsonl")).unwrap();
    let frames = read_frames_jsonl(&bytes[..]).unwrap();
    assert_eq!(frames.len(), 17);
    assert_eq!((frames[16].window.start, frames[16].window.end), (1.9, 2.15));
    let mut again = Vec::new();
    dppvae_core::eval::write_frames_jsonl(&frames, &mut again).unwrap();
    assert_eq!(again, bytes);
    assert!(!plain.join("svg").exists());
    let occupancy = fs::read_to_string(plain.join("occupancy.csv")).unwrap();
    assert_eq!(occupancy.lines().count(), 18);

    let with_svg = ws.run_ok("replay", &cfg, "out", &["--override", "replay.svg=true"]);
    assert_eq!(fs::read(with_svg.join("frames.jsonl")).unwrap(), bytes);
    assert_eq!(fs::read_dir(with_svg.join("svg")).unwrap().count(), 17);
    let m = read_manifest(&with_svg).unwrap();
    assert!(m.artifacts.iter().any(|a| a.path == "svg/frame_16.svg"));
}

#[test]
fn replay_rejects_non_spike_data() {
    let ws = Workspace::new();
    let cfg = ws.config("c.json", &blob_config());
    assert_eq!(code(&ws.run("replay", &cfg, "out", &[])), 2);
}

#[test]
fn reruns_are_byte_identical() {
    let ws = Workspace::new();
    let cfg = ws.config("s.json", &spike_config());
    let mut outputs = Vec::new();
    for out in ["a", "b"] {
        let t = ws.run_ok("train", &cfg, out, &[]);
        let c = ws.run_ok("classify", &cfg, out, &[]);
        let r = ws.run_ok("replay", &cfg, out, &[]);
        outputs.push([
            fs::read(t.join("loss.csv")).unwrap(),
            fs::read(t.join("checkpoint.json")).unwrap(),
            fs::read(c.join("metrics.json")).unwrap(),
            fs::read(r.join("frames.jsonl")).unwrap(),
        ]);
    }
    assert_eq!(outputs[0], outputs[1]);
}

fn write_idx(dir: &Path, stem: &str, per_class: usize) -> (PathBuf, PathBuf) {
    let (rows, cols) = (4, 4);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..per_class * 10 {
        let label = (i % 10) as u8;
        labels.push(label);
        for p in 0..rows * cols {
            let on = (p + label as usize).is_multiple_of(3) || (p * 7 + i).is_multiple_of(11);
            pixels.push(if on { 255 } else { 0 });
        }
    }
    let images = dir.join(format!("{stem}-images.idx"));
    let labels_path = dir.join(format!("{stem}-labels.idx"));
    fs::write(&images, encode_idx_images(per_class * 10, rows, cols, &pixels)).unwrap();
    fs::write(&labels_path, encode_idx_labels(&labels)).unwrap();
    (images, labels_path)
}

#[test]
fn idx_pipeline_runs_and_rejects_bad_files() {
    let ws = Workspace::new();
    let (images, labels) = write_idx(ws.dir.path(), "train", 60);
    let (test_images, test_labels) = write_idx(ws.dir.path(), "test", 20);
    let v = json!({
        "data": {
            "kind": "idx",
            "images": images, "labels": labels,
            "test_images": test_images, "test_labels": test_labels,
            "classes": [7, 1],
            "imbalance": {"total": 55, "ratios": [10.0, 1.0], "minor_class": 1},
            "test_per_class": 20,
            "reference_per_class": 30
        },
        "model": {"latent_dim": 2, "hidden": [8], "likelihood": "bernoulli"},
        "train": {"epochs": 1, "batch_size": 11},
        "generate": {"n_samples": 50}
    });
    let cfg = ws.config("idx.json", &v);
    let t = ws.run_ok("train", &cfg, "out", &[]);
    let dataset: Value = serde_json::from_str(&fs::read_to_string(t.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(dataset["class_counts"], json!([50, 5]));
    let c = ws.run_ok("classify", &cfg, "out", &[]);
    let report: MetricsReport = serde_json::from_str(&fs::read_to_string(c.join("metrics.json")).unwrap()).unwrap();
    assert!(report.confusion.iter().all(|r| r.iter().sum::<usize>() == 20));
    ws.run_ok("generate", &cfg, "out", &[]);

    let mut bad = fs::read(&images).unwrap();
    bad[3] = 0x01;
    fs::write(&images, bad).unwrap();
    assert_eq!(code(&ws.run("train", &cfg, "bad", &[])), 3);
    assert!(!ws.path("bad").exists());
}

#[test]
fn selftest_passes_and_reports_each_check() {
    let o = bin().arg("selftest").output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let checks: Vec<&str> = text.lines().filter(|l| l.ends_with("PASS") || l.ends_with("FAIL")).collect();
    assert!(checks.len() >= 30);
    assert!(checks.iter().all(|l| l.contains("tol ") && l.contains("observed ")));
    assert!(text.contains("esp vs subset enumeration"));
    assert!(text.contains("Nystrom"));
    assert!(text.contains("sandwich"));
}

#[test]
fn selftest_detects_perturbed_eigenvalues() {
    let o = bin().args(["selftest", "--perturb-lambda", "1e-6"]).output().unwrap();
    assert!(!o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().next().unwrap().ends_with("FAIL"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&bin().arg("train").output().unwrap()), 2);
    assert_eq!(code(&bin().arg("frobnicate").output().unwrap()), 2);
    assert_eq!(code(&bin().arg("--help").output().unwrap()), 0);
}
