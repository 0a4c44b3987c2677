//! VAE and DPP-VAE.
//!
//! Both models share the dense encoder/decoder and the reconstruction term;
//! they differ only in the KL term. The standard VAE uses the closed-form
//! Gaussian KL against `N(0, I)`. The DPP-VAE replaces the prior with a
//! k-DPP over the latent batch (cardinality = batch size) and estimates the
//! cross-entropy with the single reparameterised sample:
//!
//! ```text
//! KL ≈ Σ_n −½ (P (1 + ln 2π) + Σ_i ln σ²_{n,i}) − (ln det L_Z − ln e_B(λ))
//! ```

use std::path::Path;

use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::dpp::{dpp_log_prior, KernelParams, NormalizerCache};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{Rng, SeedStreams};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// Decoder emits logits; `p(x|z) = Bern(x | sigmoid(f(z)))`.
    Bernoulli,
    /// Decoder emits the mean; `p(x|z) = N(x | f(z), I)`.
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Prior {
    StandardNormal,
    Dpp { kernel: KernelParams },
}

impl Prior {
    pub fn is_dpp(&self) -> bool {
        matches!(self, Prior::Dpp { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// fan_in x fan_out
    pub weight: Matrix,
    /// 1 x fan_out
    pub bias: Matrix,
}

/// Dense network with ReLU between layers and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Weights and biases drawn from `U(−1/√fan_in, 1/√fan_in)`.
    pub fn new(sizes: &[usize], rng: &mut Rng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                Dense {
                    weight: Matrix::from_fn(w[0], w[1], |_, _| rng.sample(dist)),
                    bias: Matrix::from_fn(1, w[1], |_, _| rng.sample(dist)),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                weight: Matrix::zeros(w[0], w[1]),
                bias: Matrix::zeros(1, w[1]),
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.rows() != 1 || l.bias.cols() != l.weight.cols() {
                return Err(Error::Format(format!("layer {i}: bias shape {:?}", l.bias.shape())));
            }
            if i > 0 && self.layers[i - 1].weight.cols() != l.weight.rows() {
                return Err(Error::Format(format!("layer {i}: input width mismatch")));
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return Err(Error::Format(format!("layer {i}: non-finite weights")));
            }
        }
        Ok(())
    }

    /// Tape-free forward pass. Same arithmetic as [`Mlp::forward_tape`].
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = h.matmul(&layer.weight)?;
            for r in 0..out.rows() {
                for (o, b) in out.row_mut(r).iter_mut().zip(layer.bias.data()) {
                    *o += b;
                }
            }
            if i < last {
                out = out.map(|v| v.max(0.0));
            }
            h = out;
        }
        Ok(h)
    }

    fn register(&self, tape: &mut Tape) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .collect()
    }

    pub fn forward_tape(&self, tape: &mut Tape, x: Var, params: &[(Var, Var)]) -> Result<Var> {
        let mut h = x;
        let rows = tape.value(x).rows();
        let last = params.len().saturating_sub(1);
        for (i, &(w, b)) in params.iter().enumerate() {
            let xw = tape.matmul(h, w)?;
            let bb = tape.broadcast_row(b, rows)?;
            h = tape.add(xw, bb)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias].into_iter())
    }
}

/// Shape and family choices for a new model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub data_dim: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    pub likelihood: Likelihood,
    pub prior: Prior,
}

fn default_latent_dim() -> usize {
    20
}

fn default_hidden() -> Vec<usize> {
    vec![256, 128]
}

impl ModelConfig {
    pub fn new(data_dim: usize, likelihood: Likelihood, prior: Prior) -> Self {
        Self {
            data_dim,
            latent_dim: default_latent_dim(),
            hidden: default_hidden(),
            likelihood,
            prior,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub mu: Matrix,
    /// Diagonal log-variances, clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub log_var: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub latent_dim: usize,
    pub likelihood: Likelihood,
    pub prior: Prior,
}

impl VaeModel {
    pub fn new(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let (enc, dec) = Self::layer_sizes(config)?;
        Ok(Self {
            encoder: Mlp::new(&enc, rng),
            decoder: Mlp::new(&dec, rng),
            latent_dim: config.latent_dim,
            likelihood: config.likelihood,
            prior: config.prior.clone(),
        })
    }

    /// All weights and biases zero.
    pub fn zeroed(config: &ModelConfig) -> Result<Self> {
        let (enc, dec) = Self::layer_sizes(config)?;
        Ok(Self {
            encoder: Mlp::zeros(&enc),
            decoder: Mlp::zeros(&dec),
            latent_dim: config.latent_dim,
            likelihood: config.likelihood,
            prior: config.prior.clone(),
        })
    }

    fn layer_sizes(config: &ModelConfig) -> Result<(Vec<usize>, Vec<usize>)> {
        if config.data_dim == 0 || config.latent_dim == 0 || config.hidden.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if let Prior::Dpp { kernel } = &config.prior {
            if kernel.dim() != config.latent_dim {
                return Err(Error::InvalidConfig(format!(
                    "kernel dimension {} does not match latent dimension {}",
                    kernel.dim(),
                    config.latent_dim
                )));
            }
        }
        let mut enc = vec![config.data_dim];
        enc.extend(&config.hidden);
        enc.push(2 * config.latent_dim);
        let mut dec = vec![config.latent_dim];
        dec.extend(config.hidden.iter().rev());
        dec.push(config.data_dim);
        Ok((enc, dec))
    }

    pub fn data_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.output_dim() != 2 * self.latent_dim
            || self.decoder.input_dim() != self.latent_dim
            || self.decoder.output_dim() != self.encoder.input_dim()
        {
            return Err(Error::Format("encoder/decoder widths are inconsistent".into()));
        }
        if let Prior::Dpp { kernel } = &self.prior {
            kernel.validate()?;
            if kernel.dim() != self.latent_dim {
                return Err(Error::Format("kernel dimension differs from latent dimension".into()));
            }
        }
        Ok(())
    }

    pub fn encode(&self, x: &Matrix) -> Result<EncoderOutput> {
        if x.cols() != self.data_dim() || x.rows() == 0 {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: x.shape(),
                right: (x.rows().max(1), self.data_dim()),
            });
        }
        let h = self.encoder.forward(x)?;
        let p = self.latent_dim;
        Ok(EncoderOutput {
            mu: h.slice_cols(0, p),
            log_var: h.slice_cols(p, 2 * p).map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)),
        })
    }

    /// Decoder means: probabilities for Bernoulli, raw means for Gaussian.
    pub fn decode(&self, z: &Matrix) -> Result<Matrix> {
        let out = self.decoder.forward(z)?;
        Ok(match self.likelihood {
            Likelihood::Bernoulli => out.map(sigmoid),
            Likelihood::Gaussian => out,
        })
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.encoder.params_mut().chain(self.decoder.params_mut())
    }
}

/// `z = μ + exp(½ log σ²) ⊙ ε`, `ε ~ N(0, I)`.
pub fn reparameterize(out: &EncoderOutput, rng: &mut Rng) -> Matrix {
    let eps = standard_normal(out.mu.rows(), out.mu.cols(), rng);
    Matrix::from_fn(out.mu.rows(), out.mu.cols(), |i, j| {
        out.mu.get(i, j) + (0.5 * out.log_var.get(i, j)).exp() * eps.get(i, j)
    })
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Differentiable reparameterisation with externally drawn noise.
pub fn reparameterize_tape(tape: &mut Tape, mu: Var, log_var: Var, eps: Matrix) -> Result<Var> {
    let half = tape.scale(log_var, 0.5);
    let std = tape.exp(half);
    let e = tape.constant(eps);
    let noise = tape.mul(std, e)?;
    tape.add(mu, noise)
}

/// `−ln p(x | x̂)` summed over the batch.
///
/// Bernoulli expects logits in `out` and uses `softplus(l) − x·l`; Gaussian
/// uses `½ ‖x − out‖²` (the `½ ln 2π` constants are dropped).
pub fn reconstruction_loss(tape: &mut Tape, x: Var, out: Var, likelihood: Likelihood) -> Result<Var> {
    match likelihood {
        Likelihood::Bernoulli => {
            if let Some(bad) = tape.value(x).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::DomainError(format!("Bernoulli target {bad} outside [0, 1]")));
            }
            let sp = tape.softplus(out);
            let xl = tape.mul(x, out)?;
            let diff = tape.sub(sp, xl)?;
            Ok(tape.sum(diff))
        }
        Likelihood::Gaussian => {
            let diff = tape.sub(x, out)?;
            let sq = tape.square(diff);
            let s = tape.sum(sq);
            Ok(tape.scale(s, 0.5))
        }
    }
}

/// `−½ Σ (1 + ln σ² − μ² − σ²)`.
pub fn standard_kld(tape: &mut Tape, mu: Var, log_var: Var) -> Result<Var> {
    let mu2 = tape.square(mu);
    let var = tape.exp(log_var);
    let a = tape.add_scalar(log_var, 1.0);
    let b = tape.sub(a, mu2)?;
    let c = tape.sub(b, var)?;
    let s = tape.sum(c);
    Ok(tape.scale(s, -0.5))
}

/// Negative entropy of the diagonal Gaussian posterior minus the k-DPP log
/// prior of the sampled batch `z`.
pub fn dpp_kld(tape: &mut Tape, log_var: Var, z: Var, params: &KernelParams, log_normalizer: f64) -> Result<Var> {
    let (b, p) = tape.value(log_var).shape();
    let constant = b as f64 * p as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln());
    let sum_lv = tape.sum(log_var);
    let with_const = tape.add_scalar(sum_lv, constant);
    let neg_entropy = tape.scale(with_const, -0.5);
    let log_prior = dpp_log_prior(tape, z, params, log_normalizer)?;
    tape.sub(neg_entropy, log_prior)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    lr: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64, config: AdamConfig) -> Self {
        Self {
            config,
            lr,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut Matrix>, grads: &[Matrix]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (k, p) in params.enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = self.v[k].data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let (m, v) = (self.m[k].data(), self.v[k].data());
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                *pi -= self.lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_mc() -> usize {
    1
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            learning_rate: default_lr(),
            seed,
            mc_samples: default_mc(),
            optimizer: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.mc_samples == 0 {
            return Err(Error::InvalidConfig("epochs, batch_size and mc_samples must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub batch_size: usize,
    pub recon: f64,
    pub kld: f64,
    pub total: f64,
}

pub const CHECKPOINT_FORMAT: &str = "dppvae-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub model: VaeModel,
    pub history: Vec<LossRecord>,
    pub rng_state: Rng,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        ckpt.model.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// `epoch,step,batch_size,recon,kld,total` with full round-trip precision.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,step,batch_size,recon,kld,total\n");
        for r in &self.history {
            out.push_str(&format!(
                "{},{},{},{:?},{:?},{:?}\n",
                r.epoch, r.step, r.batch_size, r.recon, r.kld, r.total
            ));
        }
        out
    }
}

/// Per-batch loss terms on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub recon: Var,
    pub kld: Var,
    pub total: Var,
}

/// Handles to every model parameter registered on a tape, in optimiser order.
pub struct ModelVars {
    encoder: Vec<(Var, Var)>,
    decoder: Vec<(Var, Var)>,
}

impl ModelVars {
    pub fn register(model: &VaeModel, tape: &mut Tape) -> Self {
        Self {
            encoder: model.encoder.register(tape),
            decoder: model.decoder.register(tape),
        }
    }

    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|&(w, b)| [w, b].into_iter())
    }
}

/// Encoder head on the tape: `(μ, clamped log σ²)`.
pub fn encode_tape(model: &VaeModel, vars: &ModelVars, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
    let h = model.encoder.forward_tape(tape, x, &vars.encoder)?;
    let p = model.latent_dim;
    let mu = tape.slice_cols(h, 0, p)?;
    let raw = tape.slice_cols(h, p, 2 * p)?;
    let log_var = tape.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX);
    Ok((mu, log_var))
}

/// Full ELBO loss of one batch with given reparameterisation noise.
///
/// `eps` holds one B x P noise matrix per Monte Carlo sample; the terms are
/// averaged over samples (the standard KL is analytic and sample-free).
pub fn batch_loss(
    model: &VaeModel,
    vars: &ModelVars,
    tape: &mut Tape,
    x: Var,
    eps: &[Matrix],
    log_normalizer: Option<f64>,
) -> Result<BatchLoss> {
    let (mu, log_var) = encode_tape(model, vars, tape, x)?;
    let s = eps.len().max(1) as f64;
    let mut recon_terms = Vec::new();
    let mut kld_terms = Vec::new();
    for e in eps {
        let z = reparameterize_tape(tape, mu, log_var, e.clone())?;
        let out = model.decoder.forward_tape(tape, z, &vars.decoder)?;
        recon_terms.push(reconstruction_loss(tape, x, out, model.likelihood)?);
        if let Prior::Dpp { kernel } = &model.prior {
            let norm = log_normalizer.ok_or_else(|| Error::InvalidConfig("DPP prior needs a normaliser".into()))?;
            kld_terms.push(dpp_kld(tape, log_var, z, kernel, norm)?);
        }
    }
    let recon = mean_of(tape, &recon_terms, s)?;
    let kld = match model.prior {
        Prior::StandardNormal => standard_kld(tape, mu, log_var)?,
        Prior::Dpp { .. } => mean_of(tape, &kld_terms, s)?,
    };
    let total = tape.add(recon, kld)?;
    Ok(BatchLoss { recon, kld, total })
}

fn mean_of(tape: &mut Tape, terms: &[Var], count: f64) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(if terms.len() == 1 { acc } else { tape.scale(acc, 1.0 / count) })
}

/// Minimises reconstruction + KL with Adam over seeded shuffled batches.
///
/// The model is expected to be freshly initialised by the caller. Training
/// noise and batch order come from the `"training"` substream of
/// `config.seed`.
pub fn train(mut model: VaeModel, data: &Matrix, config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    model.validate()?;
    if data.rows() == 0 {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    if data.cols() != model.data_dim() {
        return Err(Error::DimensionMismatch(format!(
            "data has {} features, model expects {}",
            data.cols(),
            model.data_dim()
        )));
    }
    if !data.is_finite() {
        return Err(Error::DomainError("training data contains non-finite values".into()));
    }
    let mut normalizers = match &model.prior {
        Prior::Dpp { kernel } => Some(NormalizerCache::new(kernel)?),
        Prior::StandardNormal => None,
    };

    let mut rng = SeedStreams::new(config.seed).rng("training");
    let mut adam = Adam::new(config.learning_rate, config.optimizer.clone());
    let n = data.rows();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let mut history = Vec::with_capacity(config.epochs * steps_per_epoch);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let xb = data.select_rows(chunk);
            let b = chunk.len();
            let eps: Vec<Matrix> = (0..config.mc_samples)
                .map(|_| standard_normal(b, model.latent_dim, &mut rng))
                .collect();
            let log_norm = normalizers.as_mut().map(|c| c.log_normalizer(b));

            let mut tape = Tape::new();
            let vars = ModelVars::register(&model, &mut tape);
            let x = tape.constant(xb);
            let loss = batch_loss(&model, &vars, &mut tape, x, &eps, log_norm)?;
            let (recon, kld, total) = (tape.scalar(loss.recon), tape.scalar(loss.kld), tape.scalar(loss.total));
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    recon,
                    kld,
                });
            }
            tape.backward(loss.total)?;
            let grads: Vec<Matrix> = vars.all().map(|v| tape.grad_or_zero(v)).collect();
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    recon,
                    kld,
                });
            }
            adam.step(model.params_mut(), &grads);
            history.push(LossRecord {
                epoch,
                step: history.len(),
                batch_size: b,
                recon,
                kld,
                total,
            });
        }
        log::debug!("epoch {epoch}: last total {:.4}", history.last().map_or(0.0, |r| r.total));
    }

    Ok(Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        model,
        history,
        rng_state: rng,
    })
}

/// Worst relative error between tape gradients of the batch loss and
/// central differences, over every model parameter.
pub fn param_gradient_error(model: &VaeModel, x: &Matrix, eps: &Matrix, log_normalizer: f64, h: f64) -> Result<f64> {
    let loss_of = |m: &VaeModel| -> Result<f64> {
        let mut t = Tape::new();
        let vars = ModelVars::register(m, &mut t);
        let xv = t.constant(x.clone());
        let l = batch_loss(m, &vars, &mut t, xv, std::slice::from_ref(eps), Some(log_normalizer))?;
        Ok(t.scalar(l.total))
    };
    let mut t = Tape::new();
    let vars = ModelVars::register(model, &mut t);
    let xv = t.constant(x.clone());
    let l = batch_loss(model, &vars, &mut t, xv, std::slice::from_ref(eps), Some(log_normalizer))?;
    t.backward(l.total)?;
    let grads: Vec<Matrix> = vars.all().map(|v| t.grad_or_zero(v)).collect();
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        for e in 0..g.len() {
            let mut plus = model.clone();
            plus.params_mut().nth(k).expect("parameter index").data_mut()[e] += h;
            let mut minus = model.clone();
            minus.params_mut().nth(k).expect("parameter index").data_mut()[e] -= h;
            let numeric = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * h);
            let a = g.data()[e];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
        }
    }
    Ok(worst)
}

/// Latent draws `z ~ N(0, I_P)` for generation.
pub fn sample_latents(n: usize, latent_dim: usize, rng: &mut Rng) -> Matrix {
    standard_normal(n, latent_dim, rng)
}

/// Decodes `n` standard-normal latent draws.
pub fn generate(model: &VaeModel, n: usize, rng: &mut Rng) -> Result<Matrix> {
    model.decode(&sample_latents(n, model.latent_dim, rng))
}
