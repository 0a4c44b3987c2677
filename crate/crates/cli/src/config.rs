//! Experiment configuration files.

use std::path::{Path, PathBuf};

use dppvae_core::data::{ImbalanceSpec, SpikeSimConfig, Window, TRAINING_WINDOW};
use dppvae_core::dpp::KernelParams;
use dppvae_core::eval::{DEFAULT_GRID_SIZE, DEFAULT_L2_GRID};
use dppvae_core::models::{Likelihood, ModelConfig, Prior, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub classify: ClassifySection,
    #[serde(default)]
    pub generate: GenerateSection,
    #[serde(default)]
    pub replay: ReplaySection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Blobs {
        n_per_class: Vec<usize>,
        centers: Vec<Vec<f64>>,
        noise_std: f64,
        #[serde(default)]
        imbalance: Option<ImbalanceSpec>,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "default_reference_per_class")]
        reference_per_class: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        #[serde(default = "yes")]
        binarize: bool,
        #[serde(default)]
        classes: Option<Vec<usize>>,
        #[serde(default)]
        imbalance: Option<ImbalanceSpec>,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "default_reference_per_class")]
        reference_per_class: usize,
    },
    Spikes {
        #[serde(default)]
        sim: SpikeSimConfig,
        #[serde(default = "default_train_window")]
        window: Window,
    },
}

fn default_test_per_class() -> usize {
    500
}
fn default_reference_per_class() -> usize {
    1000
}
fn yes() -> bool {
    true
}
fn default_train_window() -> Window {
    TRAINING_WINDOW
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSection {
    StandardNormal,
    /// Isotropic kernel: the same `rho` and `sigma` in every latent dimension.
    Dpp { alpha: f64, rho: f64, sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_likelihood")]
    pub likelihood: Likelihood,
    #[serde(default = "default_prior")]
    pub prior: PriorSection,
}

fn default_latent() -> usize {
    20
}
fn default_hidden() -> Vec<usize> {
    vec![256, 128]
}
fn default_likelihood() -> Likelihood {
    Likelihood::Gaussian
}
fn default_prior() -> PriorSection {
    PriorSection::Dpp {
        alpha: 1000.0,
        rho: 1.0,
        sigma: 1.0,
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            latent_dim: default_latent(),
            hidden: default_hidden(),
            likelihood: default_likelihood(),
            prior: default_prior(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
}

fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    100
}
fn default_lr() -> f64 {
    1e-3
}
fn default_mc() -> usize {
    1
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            mc_samples: default_mc(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifyMode {
    /// Cross-validation for spike data, held-out balanced test set otherwise.
    Auto,
    Cv,
    Holdout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifySection {
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_mode")]
    pub mode: ClassifyMode,
    #[serde(default = "default_folds")]
    pub n_folds: usize,
    #[serde(default = "default_per_class_test")]
    pub per_class_test: usize,
    #[serde(default = "default_l2_grid")]
    pub l2_grid: Vec<f64>,
    #[serde(default = "default_inner_folds")]
    pub inner_folds: usize,
}

fn default_mode() -> ClassifyMode {
    ClassifyMode::Auto
}
fn default_folds() -> usize {
    6
}
fn default_per_class_test() -> usize {
    4
}
fn default_l2_grid() -> Vec<f64> {
    DEFAULT_L2_GRID.to_vec()
}
fn default_inner_folds() -> usize {
    3
}

impl Default for ClassifySection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            mode: default_mode(),
            n_folds: default_folds(),
            per_class_test: default_per_class_test(),
            l2_grid: default_l2_grid(),
            inner_folds: default_inner_folds(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
}

fn default_n_samples() -> usize {
    5000
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            n_samples: default_n_samples(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplaySection {
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Frames to export; the 17-window grid over [−2, 2.15] s when absent.
    #[serde(default)]
    pub windows: Option<Vec<Window>>,
    /// Appended after the grid, e.g. an injected replay window.
    #[serde(default)]
    pub extra_windows: Vec<Window>,
    #[serde(default = "default_grid")]
    pub grid_size: usize,
    /// Class whose trials the occupancy table summarises.
    #[serde(default = "default_focus")]
    pub focus_class: usize,
    #[serde(default)]
    pub svg: bool,
}

fn default_grid() -> usize {
    DEFAULT_GRID_SIZE
}
fn default_focus() -> usize {
    1
}

impl Default for ReplaySection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            windows: None,
            extra_windows: Vec::new(),
            grid_size: default_grid(),
            focus_class: default_focus(),
            svg: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_value(value: Value) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, applies `KEY=VALUE` overrides (dotted paths,
    /// JSON values with a plain-string fallback) and validates the result.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut value: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_json_value(value)
    }

    pub fn kernel(&self) -> Result<Option<KernelParams>, CliError> {
        match self.model.prior {
            PriorSection::StandardNormal => Ok(None),
            PriorSection::Dpp { alpha, rho, sigma } => KernelParams::isotropic(alpha, rho, sigma, self.model.latent_dim)
                .map(Some)
                .map_err(|e| CliError::Config(e.to_string())),
        }
    }

    pub fn model_config(&self, data_dim: usize) -> Result<ModelConfig, CliError> {
        let prior = match self.kernel()? {
            Some(kernel) => Prior::Dpp { kernel },
            None => Prior::StandardNormal,
        };
        Ok(ModelConfig {
            data_dim,
            latent_dim: self.model.latent_dim,
            hidden: self.model.hidden.clone(),
            likelihood: self.model.likelihood,
            prior,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig::new(self.train.epochs, self.train.batch_size, self.seed);
        t.learning_rate = self.train.learning_rate;
        t.mc_samples = self.train.mc_samples;
        t
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.model.latent_dim == 0 || self.model.hidden.contains(&0) {
            return bad("latent_dim and hidden widths must be positive".into());
        }
        self.kernel()?;
        self.train_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if matches!(self.model.prior, PriorSection::Dpp { .. }) && self.train.batch_size < 2 {
            return bad("the DPP prior needs batch_size ≥ 2".into());
        }
        match &self.data {
            DataConfig::Blobs {
                n_per_class,
                centers,
                noise_std,
                imbalance,
                ..
            } => {
                if n_per_class.len() != centers.len() || centers.len() < 2 {
                    return bad("blobs need one count per center and at least two centers".into());
                }
                if !(noise_std.is_finite() && *noise_std >= 0.0) {
                    return bad("noise_std must be non-negative".into());
                }
                if let Some(plan) = imbalance {
                    plan.realized_counts().map_err(|e| CliError::Config(e.to_string()))?;
                    if plan.ratios.len() != centers.len() {
                        return bad("imbalance ratios must match the number of classes".into());
                    }
                }
            }
            DataConfig::Idx { imbalance, .. } => {
                if let Some(plan) = imbalance {
                    plan.realized_counts().map_err(|e| CliError::Config(e.to_string()))?;
                }
            }
            DataConfig::Spikes { sim, window } => {
                sim.validate().map_err(|e| CliError::Config(e.to_string()))?;
                if window.end <= window.start {
                    return bad("training window is empty".into());
                }
            }
        }
        if self.classify.l2_grid.is_empty() || self.classify.l2_grid.iter().any(|l| l.is_nan() || *l < 0.0) {
            return bad("l2_grid needs non-negative values".into());
        }
        if self.classify.n_folds == 0 || self.classify.per_class_test == 0 {
            return bad("n_folds and per_class_test must be positive".into());
        }
        if self.generate.n_samples == 0 || self.replay.grid_size == 0 {
            return bad("n_samples and grid_size must be positive".into());
        }
        Ok(())
    }

    /// Canonical JSON echo used for hashing and manifests.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }
}

/// Sets `a.b.c = value` inside a JSON object tree.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not KEY=VALUE")))?;
    if key.is_empty() {
        return Err(CliError::Config("override with empty key".into()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{part}` is not inside an object")))?;
        if i == parts.len() - 1 {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal() -> Value {
        json!({
            "data": {"kind": "blobs", "n_per_class": [10, 10], "centers": [[1.0, 0.0], [-1.0, 0.0]], "noise_std": 0.5}
        })
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_json_value(minimal()).unwrap();
        assert_eq!(cfg.model.latent_dim, 20);
        assert_eq!(cfg.train.epochs, 10);
        assert_eq!(cfg.train.batch_size, 100);
        assert_eq!(cfg.classify.n_folds, 6);
        assert_eq!(cfg.replay.grid_size, 200);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = minimal();
        v["trian"] = json!({});
        assert!(matches!(ExperimentConfig::from_json_value(v), Err(CliError::Config(_))));
        let mut v = minimal();
        v["data"]["noise"] = json!(1.0);
        assert!(ExperimentConfig::from_json_value(v).is_err());
    }

    #[test]
    fn overrides_apply_with_json_values() {
        let mut v = minimal();
        apply_override(&mut v, "train.epochs=3").unwrap();
        apply_override(&mut v, "model.prior={\"kind\":\"standard_normal\"}").unwrap();
        apply_override(&mut v, "output_dir=out/x").unwrap();
        let cfg = ExperimentConfig::from_json_value(v).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.prior, PriorSection::StandardNormal);
        assert_eq!(cfg.output_dir, PathBuf::from("out/x"));
        assert!(apply_override(&mut minimal(), "novalue").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut v = minimal();
        v["model"] = json!({"prior": {"kind": "dpp", "alpha": -1.0, "rho": 1.0, "sigma": 1.0}});
        assert!(ExperimentConfig::from_json_value(v).is_err());
        let mut v = minimal();
        v["train"] = json!({"batch_size": 0});
        assert!(ExperimentConfig::from_json_value(v).is_err());
    }
}
