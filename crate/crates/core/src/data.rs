//! Datasets: MNIST IDX files, imbalanced subsets, Gaussian blobs and a
//! simulated odour-sequence spike-count experiment.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SeedStreams;

/// Where a dataset came from and what was done to it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: Option<u64>,
    pub filters: Vec<String>,
    pub class_counts: Vec<usize>,
    pub class_percentages: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, class_names: Vec<String>, source: &str) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::DimensionMismatch("dataset must contain at least one item".into()));
        }
        if labels.len() != features.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::DimensionMismatch(format!(
                "label {bad} outside [0, {})",
                class_names.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::DomainError("features must be finite".into()));
        }
        let mut ds = Self {
            features,
            labels,
            class_names,
            provenance: Provenance {
                source: source.into(),
                ..Provenance::default()
            },
        };
        ds.refresh_counts();
        Ok(ds)
    }

    fn refresh_counts(&mut self) {
        let counts = self.class_counts();
        let n = self.len() as f64;
        self.provenance.class_percentages = counts.iter().map(|&c| 100.0 * c as f64 / n).collect();
        self.provenance.class_counts = counts;
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut ds = LabeledDataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            provenance: self.provenance.clone(),
        };
        ds.refresh_counts();
        ds
    }

    /// Keeps only the listed classes, relabelled `0..classes.len()` in the
    /// given order.
    pub fn filter_classes(&self, classes: &[usize]) -> Result<LabeledDataset> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        if idx.is_empty() {
            return Err(Error::InsufficientSamples {
                class: classes.first().copied().unwrap_or(0),
                needed: 1,
                available: 0,
            });
        }
        let mut ds = self.subset(&idx);
        ds.labels = ds
            .labels
            .iter()
            .map(|l| classes.iter().position(|c| c == l).expect("filtered above"))
            .collect();
        ds.class_names = classes.iter().map(|&c| self.class_names[c].clone()).collect();
        ds.provenance.filters.push(format!("classes {classes:?}"));
        ds.refresh_counts();
        Ok(ds)
    }

    pub fn manifest_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.provenance)?)
    }
}

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::TruncatedFile(format!("{what}: header ends at byte {}", bytes.len())))
}

/// Raw IDX image tensor: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGE_MAGIC,
            found: magic,
        });
    }
    let n = read_be_u32(bytes, 4, "images")? as usize;
    let rows = read_be_u32(bytes, 8, "images")? as usize;
    let cols = read_be_u32(bytes, 12, "images")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::TruncatedFile(format!("images: need {need} pixel bytes, have {}", body.len())));
    }
    Ok((n, rows, cols, &body[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABEL_MAGIC,
            found: magic,
        });
    }
    let n = read_be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::TruncatedFile(format!("labels: need {n} bytes, have {}", body.len())));
    }
    Ok(&body[..n])
}

pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGE_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Parses an IDX image/label pair. Pixels are scaled by 1/255 and, with
/// `binarize`, thresholded at 0.5.
pub fn idx_dataset(image_bytes: &[u8], label_bytes: &[u8], binarize: bool) -> Result<LabeledDataset> {
    let (n, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!("{n} images but {} labels", labels.len())));
    }
    let dim = rows * cols;
    let data: Vec<f64> = pixels
        .iter()
        .map(|&p| {
            let v = f64::from(p) / 255.0;
            if binarize {
                if v >= 0.5 { 1.0 } else { 0.0 }
            } else {
                v
            }
        })
        .collect();
    let n_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1).max(10);
    let class_names = (0..n_classes).map(|c| c.to_string()).collect();
    let mut ds = LabeledDataset::new(
        Matrix::new(n, dim, data)?,
        labels.iter().map(|&l| l as usize).collect(),
        class_names,
        "idx",
    )?;
    if binarize {
        ds.provenance.filters.push("binarized at 0.5".into());
    }
    Ok(ds)
}

pub fn load_idx(images_path: &Path, labels_path: &Path, binarize: bool) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    let mut ds = idx_dataset(&images, &labels, binarize)?;
    ds.provenance.source = format!("idx:{}", images_path.display());
    Ok(ds)
}

/// Target class mix for [`subsample_imbalanced`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub total: usize,
    /// Relative weight per class label.
    pub ratios: Vec<f64>,
    pub minor_class: usize,
}

impl ImbalanceSpec {
    /// Two classes with `major : minor = major_weight : 1`.
    pub fn two_class(total: usize, major_weight: f64, minor_class: usize) -> Self {
        let mut ratios = vec![major_weight; 2];
        ratios[minor_class] = 1.0;
        Self {
            total,
            ratios,
            minor_class,
        }
    }

    /// Per-class counts: every non-minor class gets `round(total·w/Σw)`, the
    /// minor class the remainder (at least one).
    pub fn realized_counts(&self) -> Result<Vec<usize>> {
        if self.total == 0 || self.ratios.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidConfig("imbalance spec needs total > 0 and positive weights".into()));
        }
        if self.minor_class >= self.ratios.len() {
            return Err(Error::InvalidConfig("minor class outside the ratio list".into()));
        }
        let sum: f64 = self.ratios.iter().sum();
        let mut counts: Vec<usize> = self
            .ratios
            .iter()
            .map(|w| (self.total as f64 * w / sum).round() as usize)
            .collect();
        let others: usize = counts
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != self.minor_class)
            .map(|(_, &v)| v)
            .sum();
        counts[self.minor_class] = self.total.saturating_sub(others).max(1);
        Ok(counts)
    }
}

/// Draws a class-imbalanced subset without replacement. Selected items keep
/// their source order and bytes.
pub fn subsample_imbalanced(ds: &LabeledDataset, spec: &ImbalanceSpec, seed: u64) -> Result<LabeledDataset> {
    let counts = spec.realized_counts()?;
    if counts.len() != ds.n_classes() {
        return Err(Error::InvalidConfig(format!(
            "{} ratios for {} classes",
            counts.len(),
            ds.n_classes()
        )));
    }
    let mut rng = SeedStreams::new(seed).rng("subsample");
    let mut chosen = Vec::with_capacity(spec.total);
    for (class, &need) in counts.iter().enumerate() {
        let mut pool: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if pool.len() < need {
            return Err(Error::InsufficientSamples {
                class,
                needed: need,
                available: pool.len(),
            });
        }
        pool.shuffle(&mut rng);
        chosen.extend_from_slice(&pool[..need]);
    }
    chosen.sort_unstable();
    let mut out = ds.subset(&chosen);
    out.provenance.seed = Some(seed);
    out.provenance
        .filters
        .push(format!("imbalanced subsample {:?} of {}", spec.ratios, spec.total));
    Ok(out)
}

/// Isotropic Gaussian clusters, one per center.
pub fn make_blobs(n_per_class: &[usize], centers: &[Vec<f64>], noise_std: f64, seed: u64) -> Result<LabeledDataset> {
    if n_per_class.len() != centers.len() || centers.is_empty() {
        return Err(Error::InvalidConfig("one count per center required".into()));
    }
    let dim = centers[0].len();
    if dim == 0 || centers.iter().any(|c| c.len() != dim) {
        return Err(Error::InvalidConfig("centers must share a nonzero dimension".into()));
    }
    for i in 0..centers.len() {
        for j in (i + 1)..centers.len() {
            if centers[i] == centers[j] {
                return Err(Error::InvalidConfig(format!("centers {i} and {j} coincide")));
            }
        }
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidConfig("noise_std must be non-negative".into()));
    }
    let mut rng = SeedStreams::new(seed).rng("blobs");
    let total: usize = n_per_class.iter().sum();
    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for (class, (&n, center)) in n_per_class.iter().zip(centers).enumerate() {
        for _ in 0..n {
            for &c in center {
                let e: f64 = rng.sample(StandardNormal);
                data.push(c + noise_std * e);
            }
            labels.push(class);
        }
    }
    let names = (0..centers.len()).map(|c| c.to_string()).collect();
    let mut ds = LabeledDataset::new(Matrix::new(total, dim, data)?, labels, names, "blobs")?;
    ds.provenance.seed = Some(seed);
    Ok(ds)
}

/// Closed time interval in seconds relative to odour onset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Window {
    pub start: f64,
    pub end: f64,
}

impl From<[f64; 2]> for Window {
    fn from(v: [f64; 2]) -> Self {
        Self { start: v[0], end: v[1] }
    }
}

impl From<Window> for [f64; 2] {
    fn from(w: Window) -> Self {
        [w.start, w.end]
    }
}

impl Window {
    pub const fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn approx_eq(&self, other: &Window) -> bool {
        (self.start - other.start).abs() < 1e-9 && (self.end - other.end).abs() < 1e-9
    }

    pub fn label(&self) -> String {
        format!("[{:.2}, {:.2}]", self.start, self.end)
    }
}

pub const ODOR_NAMES: [&str; 5] = ["A", "B", "C", "D", "E"];
pub const DEFAULT_TRIAL_COUNTS: [usize; 5] = [58, 41, 37, 32, 26];
pub const TRAINING_WINDOW: Window = Window::new(0.15, 0.4);
pub const RECORDING_START: f64 = -2.0;
pub const RECORDING_END: f64 = 2.15;

/// The 17 replay windows: 0.25 s steps from −2 s, the last one snapped to
/// `[1.9, 2.15]`.
pub fn default_window_grid() -> Vec<Window> {
    let mut out: Vec<Window> = (0..16)
        .map(|i| {
            let start = RECORDING_START + 0.25 * i as f64;
            Window::new(start, start + 0.25)
        })
        .collect();
    out.push(Window::new(1.9, RECORDING_END));
    out
}

/// Blends the target odour's response pattern into source-odour trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayInjection {
    pub source: usize,
    pub target: usize,
    pub window: Window,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeSimConfig {
    #[serde(default = "default_neurons")]
    pub n_neurons: usize,
    #[serde(default = "default_trial_counts")]
    pub trial_counts: Vec<usize>,
    #[serde(default = "default_baseline")]
    pub baseline_rate: f64,
    #[serde(default = "default_tuned")]
    pub tuned_rate: f64,
    #[serde(default = "default_tuning_fraction")]
    pub tuning_fraction: Vec<f64>,
    #[serde(default)]
    pub replay_injection: Option<ReplayInjection>,
    #[serde(default = "default_bin_width")]
    pub bin_width: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_neurons() -> usize {
    50
}
fn default_trial_counts() -> Vec<usize> {
    DEFAULT_TRIAL_COUNTS.to_vec()
}
fn default_baseline() -> f64 {
    2.0
}
fn default_tuned() -> f64 {
    10.0
}
fn default_tuning_fraction() -> Vec<f64> {
    vec![0.2; 5]
}
fn default_bin_width() -> f64 {
    0.05
}

impl Default for SpikeSimConfig {
    fn default() -> Self {
        Self {
            n_neurons: default_neurons(),
            trial_counts: default_trial_counts(),
            baseline_rate: default_baseline(),
            tuned_rate: default_tuned(),
            tuning_fraction: default_tuning_fraction(),
            replay_injection: None,
            bin_width: default_bin_width(),
            seed: 0,
        }
    }
}

impl SpikeSimConfig {
    /// The B→C replay at [0.6, 0.9] s with blend weight 0.8.
    pub fn default_injection() -> ReplayInjection {
        ReplayInjection {
            source: 1,
            target: 2,
            window: Window::new(0.6, 0.9),
            weight: 0.8,
        }
    }

    pub fn n_odors(&self) -> usize {
        self.trial_counts.len()
    }

    pub fn n_bins(&self) -> usize {
        ((RECORDING_END - RECORDING_START) / self.bin_width).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.n_neurons == 0 || self.trial_counts.is_empty() || self.trial_counts.iter().all(|&c| c == 0) {
            return bad("need neurons and trials");
        }
        if self.trial_counts.len() > ODOR_NAMES.len() {
            return bad("at most five odours");
        }
        if self.tuning_fraction.len() != self.trial_counts.len()
            || self.tuning_fraction.iter().any(|f| !(0.0..=1.0).contains(f))
        {
            return bad("tuning_fraction needs one value in [0, 1] per odour");
        }
        if !(self.baseline_rate >= 0.0 && self.tuned_rate >= 0.0) {
            return bad("rates must be non-negative");
        }
        let bins = (RECORDING_END - RECORDING_START) / self.bin_width;
        if self.bin_width.is_nan() || self.bin_width <= 0.0 || (bins - bins.round()).abs() > 1e-6 {
            return bad("bin_width must divide the recording span");
        }
        if let Some(inj) = &self.replay_injection {
            if !(0.0..=1.0).contains(&inj.weight) {
                return bad("blend weight must lie in [0, 1]");
            }
            if inj.source >= self.n_odors() || inj.target >= self.n_odors() {
                return bad("replay odours out of range");
            }
            if inj.window.end <= inj.window.start {
                return bad("replay window is empty");
            }
        }
        Ok(())
    }
}

pub const TRIAL_SCHEMA: &str = "dppvae.trial/1";

/// One simulated trial: spike counts per neuron in fixed-width bins spanning
/// `[t_start_s, t_start_s + n_bins·bin_width_s]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub odor: usize,
    pub t_start_s: f64,
    pub bin_width_s: f64,
    /// `bin_counts[neuron][bin]`
    pub bin_counts: Vec<Vec<u32>>,
}

impl TrialRecord {
    pub fn n_neurons(&self) -> usize {
        self.bin_counts.len()
    }

    fn bin_range(&self, window: Window) -> Result<(usize, usize)> {
        let unknown = || Error::UnknownWindow {
            start: window.start,
            end: window.end,
        };
        let n_bins = self.bin_counts.first().map_or(0, Vec::len);
        let a = (window.start - self.t_start_s) / self.bin_width_s;
        let b = (window.end - self.t_start_s) / self.bin_width_s;
        if (a - a.round()).abs() > 1e-6 || (b - b.round()).abs() > 1e-6 {
            return Err(unknown());
        }
        let (a, b) = (a.round(), b.round());
        if a < 0.0 || b > n_bins as f64 || b <= a {
            return Err(unknown());
        }
        Ok((a as usize, b as usize))
    }

    /// Per-neuron spike counts in a bin-aligned window.
    pub fn window_counts(&self, window: Window) -> Result<Vec<u32>> {
        let (a, b) = self.bin_range(window)?;
        Ok(self.bin_counts.iter().map(|bins| bins[a..b].iter().sum()).collect())
    }
}

/// Per-odour sets of tuned neurons, drawn from the `"tuning"` substream.
pub fn tuned_neurons(config: &SpikeSimConfig) -> Vec<Vec<usize>> {
    let mut rng = SeedStreams::new(config.seed).rng("tuning");
    config
        .tuning_fraction
        .iter()
        .map(|f| {
            let k = (f * config.n_neurons as f64).round() as usize;
            let mut all: Vec<usize> = (0..config.n_neurons).collect();
            all.shuffle(&mut rng);
            let mut chosen = all[..k].to_vec();
            chosen.sort_unstable();
            chosen
        })
        .collect()
}

/// Simulates Poisson spike counts for every trial.
///
/// Rates are baseline everywhere except the odour response `[0.15, 0.4)` s,
/// where the trial odour's tuned neurons fire at `tuned_rate`. With a replay
/// injection, source-odour trials inside the injection window fire at
/// `(1 − w)·own + w·target_response`.
pub fn simulate_trials(config: &SpikeSimConfig) -> Result<Vec<TrialRecord>> {
    config.validate()?;
    let streams = SeedStreams::new(config.seed);
    let tuned = tuned_neurons(config);
    let mut is_tuned = vec![vec![false; config.n_neurons]; config.n_odors()];
    for (odor, set) in tuned.iter().enumerate() {
        for &n in set {
            is_tuned[odor][n] = true;
        }
    }
    let response = |odor: usize, neuron: usize| {
        if is_tuned[odor][neuron] {
            config.tuned_rate
        } else {
            config.baseline_rate
        }
    };

    let mut odors: Vec<usize> = config
        .trial_counts
        .iter()
        .enumerate()
        .flat_map(|(o, &c)| std::iter::repeat_n(o, c))
        .collect();
    odors.shuffle(&mut streams.rng("trial_order"));

    let mut rng = streams.rng("spikes");
    let n_bins = config.n_bins();
    let bw = config.bin_width;
    let mut trials = Vec::with_capacity(odors.len());
    for (trial_id, &odor) in odors.iter().enumerate() {
        let mut bin_counts = vec![vec![0u32; n_bins]; config.n_neurons];
        for bin in 0..n_bins {
            let center = RECORDING_START + (bin as f64 + 0.5) * bw;
            let in_response = (TRAINING_WINDOW.start..TRAINING_WINDOW.end).contains(&center);
            let injection = config
                .replay_injection
                .as_ref()
                .filter(|inj| inj.source == odor && center >= inj.window.start && center < inj.window.end);
            for (neuron, counts) in bin_counts.iter_mut().enumerate() {
                let own = if in_response {
                    response(odor, neuron)
                } else {
                    config.baseline_rate
                };
                let rate = match injection {
                    Some(inj) => (1.0 - inj.weight) * own + inj.weight * response(inj.target, neuron),
                    None => own,
                };
                let mean = rate * bw;
                counts[bin] = if mean > 0.0 {
                    Poisson::new(mean).expect("positive mean").sample(&mut rng) as u32
                } else {
                    0
                };
            }
        }
        trials.push(TrialRecord {
            trial_id,
            odor,
            t_start_s: RECORDING_START,
            bin_width_s: bw,
            bin_counts,
        });
    }
    Ok(trials)
}

#[derive(Serialize, Deserialize)]
struct TrialLine {
    schema: String,
    #[serde(flatten)]
    record: TrialRecord,
}

pub fn write_trials_jsonl<W: Write>(trials: &[TrialRecord], mut out: W) -> Result<()> {
    for t in trials {
        let line = TrialLine {
            schema: TRIAL_SCHEMA.into(),
            record: t.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trials_jsonl<R: BufRead>(input: R) -> Result<Vec<TrialRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TrialLine = serde_json::from_str(&line)?;
        if parsed.schema != TRIAL_SCHEMA {
            return Err(Error::Format(format!("unsupported trial schema {}", parsed.schema)));
        }
        out.push(parsed.record);
    }
    Ok(out)
}

/// Per-neuron standardisation fitted on one window of a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub window: Window,
    pub mean: Vec<f64>,
    /// Population standard deviation; 1 where a neuron never varied.
    pub std: Vec<f64>,
}

fn raw_window_matrix(trials: &[TrialRecord], window: Window) -> Result<Matrix> {
    let n_neurons = trials.first().map_or(0, TrialRecord::n_neurons);
    let mut data = Vec::with_capacity(trials.len() * n_neurons);
    for t in trials {
        data.extend(t.window_counts(window)?.into_iter().map(f64::from));
    }
    Matrix::new(trials.len(), n_neurons, data)
}

fn trial_dataset(trials: &[TrialRecord], features: Matrix, window: Window) -> Result<LabeledDataset> {
    let n_odors = trials.iter().map(|t| t.odor + 1).max().unwrap_or(1);
    let names = ODOR_NAMES.iter().take(n_odors.max(1)).map(|s| s.to_string()).collect();
    let labels = trials.iter().map(|t| t.odor).collect();
    let mut ds = LabeledDataset::new(features, labels, names, &format!("spikes window {}", window.label()))?;
    ds.provenance.filters.push(format!("window {}", window.label()));
    Ok(ds)
}

/// Standardised per-neuron counts in `window`. Statistics come from the
/// trials listed in `train_idx` (all trials when `None`).
pub fn window_features(
    trials: &[TrialRecord],
    window: Window,
    train_idx: Option<&[usize]>,
) -> Result<(LabeledDataset, Standardization)> {
    if trials.is_empty() {
        return Err(Error::TooFewSamples("no trials".into()));
    }
    let raw = raw_window_matrix(trials, window)?;
    let all: Vec<usize> = (0..trials.len()).collect();
    let rows = train_idx.unwrap_or(&all);
    if rows.is_empty() {
        return Err(Error::TooFewSamples("empty training split".into()));
    }
    let n = rows.len() as f64;
    let cols = raw.cols();
    let mut mean = vec![0.0; cols];
    for &r in rows {
        for (m, v) in mean.iter_mut().zip(raw.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; cols];
    for &r in rows {
        for ((s, v), m) in var.iter_mut().zip(raw.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 { sd } else { 1.0 }
        })
        .collect();
    let stats = Standardization { window, mean, std };
    let ds = apply_standardization(trials, window, &stats)?;
    Ok((ds, stats))
}

/// Features of `window` standardised with previously fitted statistics.
pub fn apply_standardization(trials: &[TrialRecord], window: Window, stats: &Standardization) -> Result<LabeledDataset> {
    let raw = raw_window_matrix(trials, window)?;
    if raw.cols() != stats.mean.len() {
        return Err(Error::DimensionMismatch("neuron count differs from standardisation".into()));
    }
    let features = Matrix::from_fn(raw.rows(), raw.cols(), |i, j| (raw.get(i, j) - stats.mean[j]) / stats.std[j]);
    let mut ds = trial_dataset(trials, features, window)?;
    ds.provenance.standardization = Some(stats.clone());
    Ok(ds)
}
