//! End-to-end acceptance run: one PASS/FAIL line per criterion.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dppvae_cli::commands::{cmd_classify, cmd_generate, cmd_replay, cmd_train, Invocation};
use dppvae_cli::config::{apply_override, ExperimentConfig};
use dppvae_cli::selftest::{
    end_to_end_grad_checks, esp_check, lattice_check, logdet_grad_check, nystrom_checks, op_grad_checks,
    sandwich_checks, sandwich_kernel, Check, NYSTROM_CONFIGS,
};
use dppvae_core::data::Window;
use dppvae_core::eval::{read_frames_jsonl, MetricsReport, ReplayFrame};
use serde_json::Value;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const FOCUS: usize = 1;
const INJECTED: Window = Window::new(0.6, 0.9);
const TRAINING_END: f64 = 0.4;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn invocation(config: &str, out: &Path, overrides: &[String]) -> Invocation {
    let text = fs::read_to_string(configs_dir().join(config)).expect("shipped config");
    let mut value: Value = serde_json::from_str(&text).expect("config is JSON");
    let mut all = overrides.to_vec();
    all.push(format!("output_dir={}", Value::String(out.display().to_string())));
    for o in &all {
        apply_override(&mut value, o).expect("override applies");
    }
    Invocation {
        config: ExperimentConfig::from_json_value(value).expect("valid config"),
        overrides: all,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(path).expect("artifact exists")).expect("artifact parses")
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One-sided sign test p-value for `wins` successes out of `n` non-tied pairs.
fn sign_test_p(wins: usize, n: usize) -> f64 {
    let choose = |n: usize, k: usize| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (wins..=n).map(|k| choose(n, k)).sum::<f64>() / 2f64.powi(n as i32)
}

fn fmt(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

struct Outcome {
    passed: bool,
    summary: String,
    details: Vec<String>,
}

fn report(index: usize, title: &str, seconds: f64, o: &Outcome) {
    println!(
        "criterion {index} ({title}): {} ({seconds:.1}s) {}",
        if o.passed { "PASS" } else { "FAIL" },
        o.summary
    );
    for d in &o.details {
        println!("    {d}");
    }
}

fn from_checks(checks: &[Check], seconds: f64, limit: f64) -> Outcome {
    let worst = checks
        .iter()
        .filter(|c| c.tolerance > 0.0)
        .map(|c| c.observed / c.tolerance)
        .fold(0.0, f64::max);
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    Outcome {
        passed: failed.is_empty() && seconds < limit,
        summary: format!(
            "{} checks, {} failed, worst observed/tolerance {worst:.2e}, runtime limit {limit}s",
            checks.len(),
            failed.len()
        ),
        details: failed,
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

fn criterion_5(root: &Path) -> Outcome {
    let mut passed = true;
    let mut details = Vec::new();
    for ratio in [10.0, 100.0] {
        let mut minor = [Vec::new(), Vec::new()];
        let mut recall = [Vec::new(), Vec::new()];
        for &seed in &SEEDS {
            for (m, prior) in ["{\"kind\":\"standard_normal\"}", "{\"kind\":\"dpp\",\"alpha\":1000.0,\"rho\":1.0,\"sigma\":1.0}"]
                .iter()
                .enumerate()
            {
                let out = root.join(format!("c5-r{ratio}-m{m}"));
                let inv = invocation(
                    "blobs_imbalanced.json",
                    &out,
                    &[
                        format!("seed={seed}"),
                        format!("data.imbalance.ratios=[{ratio}, 1.0]"),
                        format!("model.prior={prior}"),
                    ],
                );
                cmd_train(&inv).expect("train");
                let c = cmd_classify(&inv).expect("classify");
                let g = cmd_generate(&inv).expect("generate");
                let metrics: MetricsReport = read_json(&c.join("metrics.json"));
                let audit: Value = read_json(&g.join("audit.json"));
                minor[m].push(audit["percentages"][1].as_f64().expect("percentage"));
                recall[m].push(metrics.classes[1].recall);
            }
        }
        let pairs: Vec<(f64, f64)> = minor[1].iter().copied().zip(minor[0].iter().copied()).collect();
        let wins = pairs.iter().filter(|(d, v)| d > v).count();
        let untied = pairs.iter().filter(|(d, v)| d != v).count();
        let p = sign_test_p(wins, untied);
        let (md, mv) = (median(&minor[1]), median(&minor[0]));
        let (rd, rv) = (median(&recall[1]), median(&recall[0]));
        let ok = md > mv && p < 0.05 && rd >= rv;
        passed &= ok;
        details.push(format!(
            "1:{ratio}: minor % DPP-VAE {} median {md:.2} vs VAE {} median {mv:.2}; sign test {wins}/{untied} p={p:.4}",
            fmt(&minor[1]),
            fmt(&minor[0])
        ));
        details.push(format!(
            "1:{ratio}: minor recall DPP-VAE {} median {rd:.3} vs VAE {} median {rv:.3}",
            fmt(&recall[1]),
            fmt(&recall[0])
        ));
    }
    Outcome {
        passed,
        summary: "two-class blobs, 5000 training points, ratios 1:10 and 1:100, seeds 0-4".into(),
        details,
    }
}

/// Returns the outcome plus the DPP-VAE replay frames of each seed.
fn criterion_6(root: &Path) -> (Outcome, Vec<Vec<ReplayFrame>>) {
    let mut f1 = [Vec::new(), Vec::new()];
    let mut layout_ok = true;
    let mut frames = Vec::new();
    for &seed in &SEEDS {
        for (m, prior) in ["{\"kind\":\"standard_normal\"}", "{\"kind\":\"dpp\",\"alpha\":1000.0,\"rho\":1.0,\"sigma\":1.0}"]
            .iter()
            .enumerate()
        {
            let out = root.join(format!("c6-m{m}"));
            let inv = invocation("spikes.json", &out, &[format!("seed={seed}"), format!("model.prior={prior}")]);
            cmd_train(&inv).expect("train");
            let c = cmd_classify(&inv).expect("classify");
            let csv = fs::read_to_string(c.join("metrics.csv")).expect("metrics.csv");
            let rows: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap_or("")).collect();
            layout_ok &= rows == ["A", "B", "C", "D", "E", "avg"];
            let metrics: MetricsReport = read_json(&c.join("metrics.json"));
            layout_ok &= metrics.folds.len() == 6 && metrics.folds.iter().all(|f| f.test.len() == 20);
            f1[m].push(metrics.macro_f1);
            if m == 1 {
                let r = cmd_replay(&inv).expect("replay");
                let bytes = fs::read(r.join("frames.jsonl")).expect("frames");
                frames.push(read_frames_jsonl(&bytes[..]).expect("frames parse"));
            }
        }
    }
    let (md, mv) = (median(&f1[1]), median(&f1[0]));
    let outcome = Outcome {
        passed: layout_ok && md >= mv,
        summary: format!("simulated trials 58/41/37/32/26, 6 folds x 4 per class, seeds 0-4; table layout ok: {layout_ok}"),
        details: vec![format!(
            "macro-F1 DPP-VAE {} median {md:.3} vs VAE {} median {mv:.3}",
            fmt(&f1[1]),
            fmt(&f1[0])
        )],
    };
    (outcome, frames)
}

fn criterion_7(root: &Path, baseline: &[Vec<ReplayFrame>]) -> Outcome {
    let mut occ_c = Vec::new();
    let mut occ_b = Vec::new();
    for &seed in &SEEDS {
        let out = root.join("c7");
        let inv = invocation("spikes_injected.json", &out, &[format!("seed={seed}"), "replay.svg=false".into()]);
        cmd_train(&inv).expect("train");
        let r = cmd_replay(&inv).expect("replay");
        let bytes = fs::read(r.join("frames.jsonl")).expect("frames");
        let frames = read_frames_jsonl(&bytes[..]).expect("frames parse");
        let frame = frames.iter().find(|f| f.window.approx_eq(&INJECTED)).expect("injected frame");
        occ_c.push(frame.occupancy_for(FOCUS)[2]);
        occ_b.push(frame.occupancy_for(FOCUS)[FOCUS]);
    }
    let injected_ok = median(&occ_c) > median(&occ_b);

    // per post-training frame and foreign class: median over seeds
    let n_frames = baseline[0].len();
    let n_classes = baseline[0][0].occupancy_by_class.len();
    let mut worst_median: f64 = 0.0;
    let mut worst_at = String::new();
    let mut per_seed_max = vec![0.0f64; baseline.len()];
    for fi in 0..n_frames {
        let window = baseline[0][fi].window;
        if window.start < TRAINING_END - 1e-9 {
            continue;
        }
        for c in (0..n_classes).filter(|&c| c != FOCUS) {
            let values: Vec<f64> = baseline.iter().map(|frames| frames[fi].occupancy_for(FOCUS)[c]).collect();
            for (s, v) in values.iter().enumerate() {
                per_seed_max[s] = per_seed_max[s].max(*v);
            }
            let m = median(&values);
            if m > worst_median {
                worst_median = m;
                worst_at = format!("{} class {c}", window.label());
            }
        }
    }
    let baseline_ok = worst_median <= 0.5;
    Outcome {
        passed: injected_ok && baseline_ok,
        summary: "DPP-VAE, B trials, seeds 0-4".into(),
        details: vec![
            format!(
                "injected B->C at [0.6, 0.9]: occupancy C {} median {:.3} vs B {} median {:.3}",
                fmt(&occ_c),
                median(&occ_c),
                fmt(&occ_b),
                median(&occ_b)
            ),
            format!("no injection: largest seed-median foreign occupancy after 0.4 s = {worst_median:.3} ({worst_at})"),
            format!("no injection: per-seed largest foreign occupancy after 0.4 s = {}", fmt(&per_seed_max)),
        ],
    }
}

fn criterion_8(root: &Path) -> Outcome {
    let files: &[(&str, &str, &[&str])] = &[
        ("spikes.json", "train", &["loss.csv", "checkpoint.json"]),
        ("spikes.json", "classify", &["metrics.json", "metrics.csv"]),
        ("spikes.json", "generate", &["samples.bin", "audit.json"]),
        ("spikes.json", "replay", &["frames.jsonl", "occupancy.csv"]),
        ("blobs_imbalanced.json", "train", &["loss.csv", "checkpoint.json"]),
        ("blobs_imbalanced.json", "classify", &["metrics.json", "metrics.csv"]),
        ("blobs_imbalanced.json", "generate", &["samples.bin", "audit.json"]),
    ];
    let mut mismatched = Vec::new();
    let mut compared = 0;
    for config in ["spikes.json", "blobs_imbalanced.json"] {
        let overrides = ["seed=11".to_string(), "train.epochs=3".to_string()];
        let runs: Vec<PathBuf> = ["a", "b"]
            .iter()
            .map(|tag| {
                let out = root.join(format!("c8-{tag}-{config}"));
                let inv = invocation(config, &out, &overrides);
                cmd_train(&inv).expect("train");
                cmd_classify(&inv).expect("classify");
                cmd_generate(&inv).expect("generate");
                if config == "spikes.json" {
                    cmd_replay(&inv).expect("replay");
                }
                out
            })
            .collect();
        for (cfg, command, names) in files.iter().filter(|(c, _, _)| *c == config) {
            for name in names.iter() {
                let rel = format!("{command}-seed11/{name}");
                let a = fs::read(runs[0].join(&rel)).expect("first run artifact");
                let b = fs::read(runs[1].join(&rel)).expect("second run artifact");
                compared += 1;
                if a != b {
                    mismatched.push(format!("{cfg}: {rel}"));
                }
            }
        }
    }
    Outcome {
        passed: mismatched.is_empty(),
        summary: format!("{compared} artifacts compared byte for byte across two runs"),
        details: mismatched,
    }
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let mut all_passed = true;
    let mut record = |index: usize, title: &str, seconds: f64, o: Outcome| {
        report(index, title, seconds, &o);
        all_passed &= o.passed;
    };

    let (checks, s) = timed(|| vec![esp_check(100, 2024, None)]);
    record(1, "ESP oracle", s, from_checks(&checks, s, 5.0));

    let (checks, s) = timed(|| {
        let mut c = op_grad_checks();
        c.push(logdet_grad_check());
        c.extend(end_to_end_grad_checks());
        c
    });
    record(2, "gradient suite", s, from_checks(&checks, s, 30.0));

    let (checks, s) = timed(|| {
        let mut c = nystrom_checks(&NYSTROM_CONFIGS);
        c.push(lattice_check());
        c
    });
    record(3, "continuous spectrum", s, from_checks(&checks, s, 10.0));

    let (checks, s) = timed(|| sandwich_checks(&sandwich_kernel(), &[3, 10, 100]));
    record(4, "normalizer sandwich", s, from_checks(&checks, s, 10.0));

    let (mut o, s) = timed(|| criterion_5(root.path()));
    o.passed &= s < 20.0 * 60.0;
    record(5, "imbalance direction", s, o);

    let ((mut o, frames), s) = timed(|| criterion_6(root.path()));
    o.passed &= s < 10.0 * 60.0;
    record(6, "decoding pipeline", s, o);

    let (mut o, s) = timed(|| criterion_7(root.path(), &frames));
    o.passed &= s < 10.0 * 60.0;
    record(7, "replay recovery", s, o);

    let (o, s) = timed(|| criterion_8(root.path()));
    record(8, "determinism", s, o);

    if !all_passed {
        std::process::exit(1);
    }
}
