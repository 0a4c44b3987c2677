//! The five commands. Each one computes everything first and only then
//! creates its run directory, so a failing run leaves no partial outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use dppvae_core::data::{
    default_window_grid, load_idx, make_blobs, simulate_trials, subsample_imbalanced, window_features, write_trials_jsonl,
    ImbalanceSpec, LabeledDataset, Standardization, TrialRecord,
};
use dppvae_core::eval::{
    audit_samples, balanced_cv, cross_validate, evaluate, fit_logit, latent_features, render_frame_svg, replay_export,
    write_frames_jsonl, MetricsReport,
};
use dppvae_core::models::{sample_latents, train, Checkpoint, VaeModel};
use dppvae_core::rng::SeedStreams;
use serde_json::json;

use crate::config::{ClassifyMode, DataConfig, ExperimentConfig};
use crate::manifest::{read_manifest, sha256_hex, RunRecorder};
use crate::tensor::encode_matrix;
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const TIMING_FILE: &str = "timing.json";
pub const SAMPLES_FILE: &str = "samples.bin";
pub const AUDIT_FILE: &str = "audit.json";
pub const FRAMES_FILE: &str = "frames.jsonl";
pub const OCCUPANCY_FILE: &str = "occupancy.csv";

/// A validated config plus the flags that shaped it.
#[derive(Clone, Debug)]
pub struct Invocation {
    pub config: ExperimentConfig,
    pub overrides: Vec<String>,
}

impl Invocation {
    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn run_dir(&self, command: &str) -> PathBuf {
        run_dir(&self.config.output_dir, command, self.seed())
    }

    fn recorder(&self, command: &str) -> Result<RunRecorder, CliError> {
        RunRecorder::new(
            self.run_dir(command),
            command,
            self.seed(),
            &self.config.canonical_json(),
            &self.overrides,
        )
    }

    fn checkpoint_path(&self, explicit: &Option<PathBuf>) -> PathBuf {
        explicit
            .clone()
            .unwrap_or_else(|| self.run_dir("train").join(CHECKPOINT_FILE))
    }
}

pub fn run_dir(output_dir: &Path, command: &str, seed: u64) -> PathBuf {
    output_dir.join(format!("{command}-seed{seed}"))
}

/// Datasets derived from the config and seed.
pub struct Prepared {
    pub train: LabeledDataset,
    /// Balanced held-out set, when the source provides one.
    pub test: Option<LabeledDataset>,
    /// Balanced set for the generated-sample classifier.
    pub reference: Option<LabeledDataset>,
    pub trials: Option<(Vec<TrialRecord>, Standardization)>,
    pub notes: serde_json::Map<String, serde_json::Value>,
}

fn balanced(n_classes: usize, per_class: usize) -> ImbalanceSpec {
    ImbalanceSpec {
        total: n_classes * per_class,
        ratios: vec![1.0; n_classes],
        minor_class: 0,
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    let streams = SeedStreams::new(cfg.seed);
    let mut notes = serde_json::Map::new();
    match &cfg.data {
        DataConfig::Blobs {
            n_per_class,
            centers,
            noise_std,
            imbalance,
            test_per_class,
            reference_per_class,
        } => {
            let pool = make_blobs(n_per_class, centers, *noise_std, streams.derive("data"))?;
            let train = match imbalance {
                Some(plan) => subsample_imbalanced(&pool, plan, streams.derive("subsample"))?,
                None => pool,
            };
            let k = centers.len();
            let test = make_blobs(&vec![*test_per_class; k], centers, *noise_std, streams.derive("test"))?;
            let reference = make_blobs(&vec![*reference_per_class; k], centers, *noise_std, streams.derive("reference"))?;
            Ok(Prepared {
                train,
                test: Some(test),
                reference: Some(reference),
                trials: None,
                notes,
            })
        }
        DataConfig::Idx {
            images,
            labels,
            test_images,
            test_labels,
            binarize,
            classes,
            imbalance,
            test_per_class,
            reference_per_class,
        } => {
            let filter = |ds: LabeledDataset| match classes {
                Some(c) => ds.filter_classes(c),
                None => Ok(ds),
            };
            let pool = filter(load_idx(images, labels, *binarize)?)?;
            let train = match imbalance {
                Some(plan) => subsample_imbalanced(&pool, plan, streams.derive("subsample"))?,
                None => pool.clone(),
            };
            let reference = subsample_imbalanced(
                &pool,
                &balanced(pool.n_classes(), *reference_per_class),
                streams.derive("reference"),
            )?;
            let test = match (test_images, test_labels) {
                (Some(ti), Some(tl)) => {
                    let full = filter(load_idx(ti, tl, *binarize)?)?;
                    Some(subsample_imbalanced(
                        &full,
                        &balanced(full.n_classes(), *test_per_class),
                        streams.derive("test"),
                    )?)
                }
                (None, None) => None,
                _ => return Err(CliError::Config("test_images and test_labels go together".into())),
            };
            Ok(Prepared {
                train,
                test,
                reference: Some(reference),
                trials: None,
                notes,
            })
        }
        DataConfig::Spikes { sim, window } => {
            let mut sim = sim.clone();
            sim.seed = streams.derive("data");
            notes.insert("sim_seed".into(), json!(sim.seed));
            let trials = simulate_trials(&sim)?;
            let (train, stats) = window_features(&trials, *window, None)?;
            Ok(Prepared {
                train,
                test: None,
                reference: None,
                trials: Some((trials, stats)),
                notes,
            })
        }
    }
}

fn load_checkpoint(path: &Path, data_dim: usize) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(CliError::Data(format!("checkpoint {} not found", path.display())));
    }
    let ckpt = Checkpoint::load(path)?;
    if ckpt.model.data_dim() != data_dim {
        return Err(CliError::Data(format!(
            "checkpoint expects {} features, data has {data_dim}",
            ckpt.model.data_dim()
        )));
    }
    Ok(ckpt)
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))
}

pub fn cmd_train(inv: &Invocation) -> Result<PathBuf, CliError> {
    let cfg = &inv.config;
    let t0 = Instant::now();
    let data = prepare_data(cfg)?;
    let t_data = t0.elapsed().as_secs_f64();

    let model_cfg = cfg.model_config(data.train.dim())?;
    let streams = SeedStreams::new(cfg.seed);
    let model = VaeModel::new(&model_cfg, &mut streams.rng("init"))?;
    let t1 = Instant::now();
    let ckpt = train(model, &data.train.features, &cfg.train_config())?;
    let t_train = t1.elapsed().as_secs_f64();
    log::info!("trained {} steps in {t_train:.2}s", ckpt.history.len());

    let mut trials_bytes = Vec::new();
    if let Some((trials, _)) = &data.trials {
        write_trials_jsonl(trials, &mut trials_bytes)?;
    }

    let mut rec = inv.recorder("train")?;
    rec.write(CHECKPOINT_FILE, ckpt.to_json()?.as_bytes())?;
    rec.write(LOSS_FILE, ckpt.loss_csv().as_bytes())?;
    rec.write("dataset.json", data.train.manifest_json()?.as_bytes())?;
    if !trials_bytes.is_empty() {
        rec.write("trials.jsonl", &trials_bytes)?;
    }
    rec.timing("data", t_data);
    rec.timing("train", t_train);
    rec.note("steps", json!(ckpt.history.len()));
    for (k, v) in data.notes {
        rec.note(&k, v);
    }
    let dir = rec.dir.clone();
    rec.finish()?;
    Ok(dir)
}

fn training_seconds(checkpoint: &Path) -> Option<f64> {
    read_manifest(checkpoint.parent()?)?.timings_s.get("train").copied()
}

pub fn cmd_classify(inv: &Invocation) -> Result<PathBuf, CliError> {
    let cfg = &inv.config;
    let section = &cfg.classify;
    let ckpt_path = inv.checkpoint_path(&section.checkpoint);
    let data = prepare_data(cfg)?;
    let ckpt = load_checkpoint(&ckpt_path, data.train.dim())?;
    let streams = SeedStreams::new(cfg.seed);

    let mode = match section.mode {
        ClassifyMode::Auto if data.trials.is_some() => ClassifyMode::Cv,
        ClassifyMode::Auto => ClassifyMode::Holdout,
        m => m,
    };
    let t0 = Instant::now();
    let features = latent_features(&ckpt.model, &data.train.features)?;
    let report: MetricsReport = match mode {
        ClassifyMode::Cv => {
            let folds = balanced_cv(
                &data.train.labels,
                section.n_folds,
                section.per_class_test,
                streams.derive("cv"),
            )?;
            cross_validate(
                &features,
                &data.train.labels,
                &data.train.class_names,
                &folds,
                &section.l2_grid,
                section.inner_folds,
                streams.derive("classifier"),
            )?
        }
        _ => {
            let test = data
                .test
                .as_ref()
                .ok_or_else(|| CliError::Config("holdout classification needs a test set".into()))?;
            let clf = fit_logit(
                &features,
                &data.train.labels,
                &section.l2_grid,
                section.inner_folds,
                streams.derive("classifier"),
            )?;
            let mut report = evaluate(&clf, &latent_features(&ckpt.model, &test.features)?, &test.labels)?;
            for (c, name) in report.classes.iter_mut().zip(&test.class_names) {
                c.name = name.clone();
            }
            report
        }
    };
    let t_classify = t0.elapsed().as_secs_f64();
    let t_train = training_seconds(&ckpt_path);
    let timing = json!({
        "train_s": t_train,
        "classify_s": t_classify,
        "total_s": t_train.unwrap_or(0.0) + t_classify,
        "epochs": ckpt.config.epochs,
    });

    let mut rec = inv.recorder("classify")?;
    rec.input(&ckpt_path)?;
    rec.write(METRICS_CSV, report.to_csv().as_bytes())?;
    rec.write(METRICS_JSON, report.to_json()?.as_bytes())?;
    rec.write(TIMING_FILE, to_json(&timing)?.as_bytes())?;
    rec.timing("classify", t_classify);
    rec.note("mode", json!(if mode == ClassifyMode::Cv { "cv" } else { "holdout" }));
    rec.note("macro_f1", json!(report.macro_f1));
    let dir = rec.dir.clone();
    rec.finish()?;
    Ok(dir)
}

pub fn cmd_generate(inv: &Invocation) -> Result<PathBuf, CliError> {
    let cfg = &inv.config;
    let ckpt_path = inv.checkpoint_path(&cfg.generate.checkpoint);
    let data = prepare_data(cfg)?;
    let ckpt = load_checkpoint(&ckpt_path, data.train.dim())?;
    let streams = SeedStreams::new(cfg.seed);
    let t0 = Instant::now();

    let reference_set = data.reference.as_ref().unwrap_or(&data.train);
    let reference = fit_logit(
        &reference_set.features,
        &reference_set.labels,
        &cfg.classify.l2_grid,
        cfg.classify.inner_folds,
        streams.derive("reference_classifier"),
    )?;
    let latents = sample_latents(cfg.generate.n_samples, ckpt.model.latent_dim, &mut streams.rng("generation"));
    let samples = ckpt.model.decode(&latents)?;
    let audit = audit_samples(&samples, &reference)?;
    let t_generate = t0.elapsed().as_secs_f64();
    let audit_json = json!({
        "class_names": reference_set.class_names,
        "n_samples": audit.n_samples,
        "counts": audit.counts,
        "percentages": audit.percentages,
        "ci95_low": audit.ci_low,
        "ci95_high": audit.ci_high,
        "reference_l2": reference.l2_penalty,
    });

    let mut rec = inv.recorder("generate")?;
    rec.input(&ckpt_path)?;
    rec.write(SAMPLES_FILE, &encode_matrix(&samples))?;
    rec.write(AUDIT_FILE, to_json(&audit_json)?.as_bytes())?;
    rec.timing("generate", t_generate);
    rec.note("latents_sha256", json!(sha256_hex(&encode_matrix(&latents))));
    let dir = rec.dir.clone();
    rec.finish()?;
    Ok(dir)
}

pub fn cmd_replay(inv: &Invocation) -> Result<PathBuf, CliError> {
    let cfg = &inv.config;
    let section = &cfg.replay;
    let ckpt_path = inv.checkpoint_path(&section.checkpoint);
    let data = prepare_data(cfg)?;
    let (trials, stats) = data
        .trials
        .as_ref()
        .ok_or_else(|| CliError::Config("replay needs spike data".into()))?;
    let n_classes = data.train.n_classes();
    if section.focus_class >= n_classes {
        return Err(CliError::Config(format!("focus_class {} outside {n_classes} classes", section.focus_class)));
    }
    let ckpt = load_checkpoint(&ckpt_path, data.train.dim())?;
    let mut windows = section.windows.clone().unwrap_or_else(default_window_grid);
    windows.extend(section.extra_windows.iter().copied());

    let t0 = Instant::now();
    let export = replay_export(
        &ckpt.model,
        trials,
        stats,
        &windows,
        section.grid_size,
        SeedStreams::new(cfg.seed).derive("replay"),
    )?;
    let t_replay = t0.elapsed().as_secs_f64();

    let mut frames = Vec::new();
    write_frames_jsonl(&export.frames, &mut frames)?;
    let names = &data.train.class_names;
    let mut occupancy = format!("window_start,window_end,{}\n", names.join(","));
    for f in &export.frames {
        let row: Vec<String> = f.occupancy_for(section.focus_class).iter().map(|v| format!("{v:?}")).collect();
        occupancy.push_str(&format!("{:?},{:?},{}\n", f.window.start, f.window.end, row.join(",")));
    }

    let mut rec = inv.recorder("replay")?;
    rec.input(&ckpt_path)?;
    rec.write(FRAMES_FILE, &frames)?;
    rec.write(OCCUPANCY_FILE, occupancy.as_bytes())?;
    if section.svg {
        for (i, f) in export.frames.iter().enumerate() {
            rec.write(&format!("svg/frame_{i:02}.svg"), render_frame_svg(f, names).as_bytes())?;
        }
    }
    rec.timing("replay", t_replay);
    rec.note("frames", json!(export.frames.len()));
    rec.note("focus_class", json!(names[section.focus_class]));
    rec.note("pca_explained_variance_ratio", json!(export.pca.explained_variance_ratio));
    let dir = rec.dir.clone();
    rec.finish()?;
    Ok(dir)
}
