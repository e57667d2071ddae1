//! Adversarial objectives (hinge, vanilla, WGAN-GP) with the auxiliary
//! classifier terms, Adam, the alternating update schedule, and checkpoints.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::FeatureConfig;
use crate::checkpoint::Container;
use crate::data::{batch_indices, TrainingSet};
use crate::error::{Error, Result};
use crate::image;
use crate::layers::{ParamStore, Scope};
use crate::models::{ClassTable, Conditioning, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adversarial {
    Hinge,
    Vanilla,
    WganGp,
}

impl fmt::Display for Adversarial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hinge => "hinge",
            Self::Vanilla => "vanilla",
            Self::WganGp => "wgan_gp",
        })
    }
}

impl FromStr for Adversarial {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hinge" => Ok(Self::Hinge),
            "vanilla" => Ok(Self::Vanilla),
            "wgan_gp" => Ok(Self::WganGp),
            other => Err(Error::Config(format!("unknown adversarial loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub adversarial: Adversarial,
    pub use_projection: bool,
    pub use_aux_classifier: bool,
    pub use_spectral_norm: bool,
    pub gp_lambda: f64,
    pub aux_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::preset("table5-g").expect("known preset")
    }
}

/// Ablation presets, one per row of the ablation table.
pub const PRESETS: [&str; 6] = ["table5-b", "table5-c", "table5-d", "table5-e", "table5-f", "table5-g"];

impl LossConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            adversarial: Adversarial::Vanilla,
            use_projection: false,
            use_aux_classifier: false,
            use_spectral_norm: false,
            gp_lambda: 10.0,
            aux_weight: 1.0,
        };
        Ok(match name {
            "table5-b" => Self {
                adversarial: Adversarial::WganGp,
                ..base
            },
            "table5-c" => base,
            "table5-d" => Self {
                use_spectral_norm: true,
                ..base
            },
            "table5-e" => Self {
                adversarial: Adversarial::Hinge,
                use_spectral_norm: true,
                ..base
            },
            "table5-f" => Self {
                adversarial: Adversarial::Hinge,
                use_spectral_norm: true,
                use_projection: true,
                ..base
            },
            "table5-g" => Self {
                adversarial: Adversarial::Hinge,
                use_spectral_norm: true,
                use_projection: true,
                use_aux_classifier: true,
                ..base
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown loss preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn conditioning(&self) -> Conditioning {
        if self.use_projection {
            Conditioning::Projection
        } else {
            Conditioning::Concat
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gp_lambda >= 0.0 && self.gp_lambda.is_finite()) {
            return Err(Error::Config("gp_lambda must be a finite non-negative number".into()));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::Config("aux_weight must be a finite non-negative number".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub g_steps_per_iter: usize,
    pub d_steps_per_iter: usize,
    pub epochs: u64,
    /// Stop after this many iterations; 0 runs the full `epochs`.
    pub max_iters: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub noise_dim: usize,
    /// Checkpoint period in iterations; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Sample-grid period in iterations; 0 writes only the final grid.
    pub grid_every: u64,
    /// Write elapsed seconds into the metrics log (makes it run-dependent).
    pub record_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            g_steps_per_iter: 5,
            d_steps_per_iter: 1,
            epochs: 300,
            max_iters: 0,
            batch_size: 64,
            seed: 0,
            noise_dim: 10,
            checkpoint_every: 0,
            grid_every: 0,
            record_wallclock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bad.push("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            bad.push("eps must be positive");
        }
        if self.g_steps_per_iter == 0 || self.d_steps_per_iter == 0 {
            bad.push("step counts must be positive");
        }
        if self.epochs == 0 && self.max_iters == 0 {
            bad.push("epochs or max_iters must be positive");
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be positive");
        }
        if self.noise_dim == 0 {
            bad.push("noise_dim must be positive");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

/// One Adam update of `params`; `t` is the 1-based step number.
pub fn adam_step(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        params[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
    }
}

/// Moments for the trainable parameters of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.trainable_ids().into_iter().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Applies `grads` (in trainable order) and rounds the touched state to
    /// `f32`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], cfg: &AdamConfig) {
        self.t += 1;
        for (k, id) in store.trainable_ids().into_iter().enumerate() {
            let p = store.get_mut(id);
            adam_step(p.data_mut(), grads[k].data(), self.m[k].data_mut(), self.v[k].data_mut(), self.t, cfg);
            p.round_to_f32();
            self.m[k].round_to_f32();
            self.v[k].round_to_f32();
        }
    }
}

/// Loss values of one discriminator evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct DiscLoss {
    pub total: f64,
    /// Mean adversarial term on real pairs.
    pub real: f64,
    /// Mean adversarial term on generated pairs.
    pub fake: f64,
    /// Weighted gradient penalty (WGAN-GP only).
    pub gp: f64,
    /// Unweighted mean `−log P_C(c|x)` on real images.
    pub aux_nll: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct GenLoss {
    pub total: f64,
    pub adversarial: f64,
    /// Unweighted mean `−log P_C(c|G(s, z))`.
    pub aux_nll: f64,
}

fn nll(g: &mut Graph, logp: Var, labels: &[usize]) -> crate::tensor::Result<Var> {
    let picked = g.pick(logp, labels)?;
    let m = g.mean(picked)?;
    g.scale(m, -1.0)
}

/// Input gradient of a per-example critic, one row per example.
pub fn critic_input_gradients<F>(critic: F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> crate::tensor::Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let scores = critic(&mut g, xv)?;
    let total = g.sum(scores)?;
    let grads = g.backward(total)?;
    Ok(grads.get(xv).expect("leaf gradient").clone())
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    let n = t.shape()[0];
    let row = t.len() / n;
    t.data().chunks(row).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// `λ · mean_i (‖∇_x critic(x̂_i)‖ − 1)²`.
pub fn gradient_penalty<F>(critic: F, x_hat: &Tensor, lambda: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> crate::tensor::Result<Var>,
{
    let grads = critic_input_gradients(critic, x_hat)?;
    let norms = row_norms(&grads);
    Ok(lambda * norms.iter().map(|n| (n - 1.0).powi(2)).sum::<f64>() / norms.len() as f64)
}

/// Step of the central difference used for the penalty's parameter gradient.
pub const GP_FD_STEP: f64 = 1e-6;

fn same_rows(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Inputs of one discriminator objective evaluation.
pub struct DiscBatch<'a> {
    pub real: &'a Tensor,
    pub fake: &'a Tensor,
    pub conditions: &'a Tensor,
    /// Image-side labels of the real examples.
    pub image_labels: &'a [usize],
}

/// Discriminator objective and, if `with_grads`, its parameter gradients in
/// trainable order. `rng` draws the WGAN-GP interpolation weights.
pub fn discriminator_objective<R: Rng + ?Sized>(
    disc: &Discriminator,
    cfg: &LossConfig,
    batch: &DiscBatch,
    rng: &mut R,
    with_grads: bool,
) -> Result<(DiscLoss, Option<Vec<Tensor>>)> {
    same_rows("real vs fake batch", batch.real, batch.fake)?;
    let n = batch.real.shape()[0];
    if n == 0 || batch.image_labels.len() != n || batch.conditions.shape()[0] != n {
        return Err(Error::Config(format!(
            "discriminator batch: {n} real images, {} labels, {} conditions",
            batch.image_labels.len(),
            batch.conditions.shape()[0]
        )));
    }
    let nf = n as f64;

    // The penalty needs ∇_x D at interpolates before the main graph exists.
    let mut probes = None;
    let mut gp_value = 0.0;
    if cfg.adversarial == Adversarial::WganGp {
        let eps: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let row = batch.real.len() / n;
        let mut x_hat = batch.real.clone();
        for (i, e) in eps.iter().enumerate() {
            let r = &mut x_hat.data_mut()[i * row..(i + 1) * row];
            for (h, f) in r.iter_mut().zip(&batch.fake.data()[i * row..(i + 1) * row]) {
                *h = e * *h + (1.0 - e) * f;
            }
        }
        let critic = |g: &mut Graph, x: Var| {
            let mut scope = Scope::new(disc.store(), false);
            let c = g.constant(batch.conditions.clone());
            Ok(disc.forward(g, &mut scope, x, c)?.score)
        };
        let grads = critic_input_gradients(critic, &x_hat)?;
        let norms = row_norms(&grads);
        gp_value = cfg.gp_lambda * norms.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / nf;
        if with_grads && cfg.gp_lambda > 0.0 {
            // d‖∇_x D‖/dθ = ∂/∂θ of the directional derivative along the unit
            // gradient, taken by a central difference in input space.
            let h = GP_FD_STEP;
            let (mut plus, mut minus) = (x_hat.clone(), x_hat.clone());
            let mut coef = Vec::with_capacity(n);
            for i in 0..n {
                let norm = norms[i];
                let live = norm > 1e-12;
                coef.push(if live { 2.0 * cfg.gp_lambda * (norm - 1.0) / nf / (2.0 * h) } else { 0.0 });
                for j in i * row..(i + 1) * row {
                    let u = if live { grads.data()[j] / norm } else { 0.0 };
                    plus.data_mut()[j] += h * u;
                    minus.data_mut()[j] -= h * u;
                }
            }
            probes = Some((plus, minus, coef));
        }
    }

    let mut g = Graph::new();
    let mut scope = Scope::new(disc.store(), with_grads);
    let mut images = g.constant(batch.real.clone());
    let fake = g.constant(batch.fake.clone());
    images = g.concat(images, fake, 0)?;
    let mut conds = g.constant(batch.conditions.clone());
    let mut copies = 2;
    if let Some((plus, minus, _)) = &probes {
        let p = g.constant(plus.clone());
        let m = g.constant(minus.clone());
        images = g.concat(images, p, 0)?;
        images = g.concat(images, m, 0)?;
        copies = 4;
    }
    let c1 = conds;
    for _ in 1..copies {
        conds = g.concat(conds, c1, 0)?;
    }
    let out = disc.forward(&mut g, &mut scope, images, conds)?;
    let d_real = g.narrow(out.score, 0, 0, n)?;
    let d_fake = g.narrow(out.score, 0, n, n)?;
    let (real_terms, fake_terms) = match cfg.adversarial {
        Adversarial::Hinge => {
            let a = g.scale(d_real, -1.0)?;
            let a = g.add_scalar(a, 1.0)?;
            let b = g.add_scalar(d_fake, 1.0)?;
            (g.relu(a)?, g.relu(b)?)
        }
        Adversarial::Vanilla => {
            let a = g.scale(d_real, -1.0)?;
            (g.softplus(a)?, g.softplus(d_fake)?)
        }
        Adversarial::WganGp => (g.scale(d_real, -1.0)?, d_fake),
    };
    let real_mean = g.mean(real_terms)?;
    let fake_mean = g.mean(fake_terms)?;
    let mut objective = g.add(real_mean, fake_mean)?;

    let real_features = g.narrow(out.features, 0, 0, n)?;
    let logp = disc.class_log_probs(&mut g, &mut scope, real_features)?;
    let aux = nll(&mut g, logp, batch.image_labels)?;
    if cfg.use_aux_classifier {
        let weighted = g.scale(aux, cfg.aux_weight)?;
        objective = g.add(objective, weighted)?;
    }

    let mut loss = DiscLoss {
        total: g.value(objective).item() + gp_value,
        real: g.value(real_mean).item(),
        fake: g.value(fake_mean).item(),
        gp: gp_value,
        aux_nll: g.value(aux).item(),
    };
    if !loss.total.is_finite() {
        loss.total = f64::NAN;
    }
    if !with_grads {
        return Ok((loss, None));
    }
    let mut surrogate = objective;
    if let Some((_, _, coef)) = &probes {
        let sp = g.narrow(out.score, 0, 2 * n, n)?;
        let sm = g.narrow(out.score, 0, 3 * n, n)?;
        let diff = g.sub(sp, sm)?;
        let w = g.constant(Tensor::from_vec(coef.clone()));
        let weighted = g.mul(diff, w)?;
        let pen = g.sum(weighted)?;
        surrogate = g.add(surrogate, pen)?;
    }
    let grads = g.backward(surrogate)?;
    Ok((loss, Some(scope.gradients(&grads))))
}

/// Generator objective for `(conditions, noise)`, scored by a frozen
/// discriminator against the sound-side labels.
pub fn generator_objective(
    gen: &Generator,
    disc: &Discriminator,
    cfg: &LossConfig,
    conditions: &Tensor,
    noise: &Tensor,
    sound_labels: &[usize],
    with_grads: bool,
) -> Result<(GenLoss, Option<Vec<Tensor>>)> {
    let n = conditions.shape()[0];
    if n == 0 || sound_labels.len() != n {
        return Err(Error::Config(format!(
            "generator batch: {n} conditions, {} labels",
            sound_labels.len()
        )));
    }
    let mut g = Graph::new();
    let mut gscope = Scope::new(gen.store(), with_grads);
    let mut dscope = Scope::new(disc.store(), false);
    let c = g.constant(conditions.clone());
    let z = g.constant(noise.clone());
    let fake = gen.forward(&mut g, &mut gscope, c, z)?;
    let out = disc.forward(&mut g, &mut dscope, fake, c)?;
    let adv_terms = match cfg.adversarial {
        Adversarial::Hinge | Adversarial::WganGp => g.scale(out.score, -1.0)?,
        Adversarial::Vanilla => {
            let neg = g.scale(out.score, -1.0)?;
            g.softplus(neg)?
        }
    };
    let adv = g.mean(adv_terms)?;
    let logp = disc.class_log_probs(&mut g, &mut dscope, out.features)?;
    let aux = nll(&mut g, logp, sound_labels)?;
    let mut objective = adv;
    if cfg.use_aux_classifier {
        let weighted = g.scale(aux, cfg.aux_weight)?;
        objective = g.add(objective, weighted)?;
    }
    let loss = GenLoss {
        total: g.value(objective).item(),
        adversarial: g.value(adv).item(),
        aux_nll: g.value(aux).item(),
    };
    if !with_grads {
        return Ok((loss, None));
    }
    let grads = g.backward(objective)?;
    Ok((loss, Some(gscope.gradients(&grads))))
}

pub fn generator_loss(
    gen: &Generator,
    disc: &Discriminator,
    cfg: &LossConfig,
    conditions: &Tensor,
    noise: &Tensor,
    sound_labels: &[usize],
) -> Result<GenLoss> {
    Ok(generator_objective(gen, disc, cfg, conditions, noise, sound_labels, false)?.0)
}

pub fn discriminator_loss<R: Rng + ?Sized>(
    disc: &Discriminator,
    cfg: &LossConfig,
    batch: &DiscBatch,
    rng: &mut R,
) -> Result<DiscLoss> {
    Ok(discriminator_objective(disc, cfg, batch, rng, false)?.0)
}

/// Per-dimension z-scoring of condition vectors, fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct CondNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CondNorm {
    pub fn fit(conditions: &Tensor) -> Self {
        let (n, d) = (conditions.shape()[0], conditions.shape()[1]);
        let mut mean = vec![0.0; d];
        for row in conditions.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for row in conditions.data().chunks(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        let std = var.into_iter().map(|v| if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 }).collect();
        let mut out = Self { mean, std };
        for v in out.mean.iter_mut().chain(out.std.iter_mut()) {
            *v = *v as f32 as f64;
        }
        out
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}

/// Everything needed to rebuild the networks and their input pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub features: FeatureConfig,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct AdvTerms {
    pub d_real: f64,
    pub d_fake: f64,
    pub gp: f64,
    pub g: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterMetrics {
    pub iter: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub aux_loss_real: f64,
    pub adv_terms: AdvTerms,
    pub wallclock_s: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    spec: ModelSpec,
    train: TrainConfig,
    loss: LossConfig,
    iter: u64,
    adam_g_t: u64,
    adam_d_t: u64,
}

fn map_nonfinite(iter: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::NonFinite {
            iter,
            what: format!("value in {op}"),
        },
        other => other,
    }
}

fn check_grads(grads: &[Tensor], iter: u64, what: &str) -> Result<()> {
    if grads.iter().all(Tensor::all_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            iter,
            what: format!("{what} gradient"),
        })
    }
}

/// Networks, optimizer state and data of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub loss: LossConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub norm: CondNorm,
    adam_g: AdamState,
    adam_d: AdamState,
    rng: ChaCha8Rng,
    iter: u64,
    data: TrainingSet,
}

impl Trainer {
    /// Fits the condition normalizer on `data` and initializes both networks
    /// from `config.seed`. Loss flags decide the discriminator's spectral
    /// normalization and conditioning; the data decides the condition width.
    pub fn new(mut spec: ModelSpec, config: TrainConfig, loss: LossConfig, data: TrainingSet) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        spec.generator.cond_dim = data.cond_dim();
        spec.generator.noise_dim = config.noise_dim;
        spec.discriminator.cond_dim = data.cond_dim();
        spec.discriminator.spectral_norm = loss.use_spectral_norm;
        spec.discriminator.conditioning = loss.conditioning();
        spec.discriminator.n_classes = spec.classes.len();
        let norm = CondNorm::fit(&data.conditions);
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(spec.generator.clone(), &mut init)?;
        let discriminator = Discriminator::new(spec.discriminator.clone(), &mut init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Self::assemble(spec, config, loss, generator, discriminator, norm, rng, 0, data)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        spec: ModelSpec,
        config: TrainConfig,
        loss: LossConfig,
        mut generator: Generator,
        mut discriminator: Discriminator,
        norm: CondNorm,
        rng: ChaCha8Rng,
        iter: u64,
        raw: TrainingSet,
    ) -> Result<Self> {
        ClassTable::new(spec.classes.clone()).map_err(Error::Config)?;
        if raw.max_label() >= spec.classes.len() {
            return Err(Error::Data(format!(
                "label {} outside the {} configured classes",
                raw.max_label(),
                spec.classes.len()
            )));
        }
        let g = &spec.generator;
        let want = [g.image_channels, g.image_size, g.image_size];
        if raw.image_shape() != want {
            return Err(Error::Data(format!(
                "images are {:?} but the generator produces {want:?}",
                raw.image_shape()
            )));
        }
        if spec.discriminator.image_size != g.image_size || spec.discriminator.image_channels != g.image_channels {
            return Err(Error::Config("generator and discriminator image shapes differ".into()));
        }
        if norm.dim() != raw.cond_dim() || g.cond_dim != raw.cond_dim() {
            return Err(Error::Data(format!(
                "conditions have {} entries, model expects {}",
                raw.cond_dim(),
                g.cond_dim
            )));
        }
        let data = raw.map_conditions(|c| norm.apply(c))?;
        generator.store_mut().round_to_f32();
        discriminator.store_mut().round_to_f32();
        let adam_g = AdamState::new(generator.store());
        let adam_d = AdamState::new(discriminator.store());
        Ok(Self {
            spec,
            config,
            loss,
            generator,
            discriminator,
            norm,
            adam_g,
            adam_d,
            rng,
            iter,
            data,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iter
    }

    pub fn data(&self) -> &TrainingSet {
        &self.data
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.config.batch_size) as u64
    }

    /// Iteration count at which training stops.
    pub fn total_iterations(&self) -> u64 {
        if self.config.max_iters > 0 {
            self.config.max_iters
        } else {
            self.config.epochs * self.batches_per_epoch()
        }
    }

    fn noise(&mut self, n: usize) -> Tensor {
        Tensor::randn(&[n, self.config.noise_dim], 1.0, &mut self.rng)
    }

    /// `d_steps_per_iter` discriminator updates on one batch, then
    /// `g_steps_per_iter` generator updates, each with fresh noise. Nothing
    /// is updated past the first non-finite loss or gradient.
    pub fn step(&mut self) -> Result<IterMetrics> {
        let iter = self.iter;
        let nonfinite = map_nonfinite(iter);
        let bpe = self.batches_per_epoch();
        let idx = batch_indices(self.data.len(), self.config.batch_size, self.config.seed, iter / bpe)
            .swap_remove((iter % bpe) as usize);
        let batch = self.data.batch(&idx);
        let n = idx.len();
        let adam = AdamConfig::from(&self.config);

        let mut d = DiscLoss::default();
        for _ in 0..self.config.d_steps_per_iter {
            if self.loss.use_spectral_norm {
                self.discriminator.refresh_spectral();
                self.discriminator.store_mut().round_to_f32();
            }
            let z = self.noise(n);
            let fake = self.generator.generate_batch(&batch.conditions, &z).map_err(|e| nonfinite(e.into()))?;
            let db = DiscBatch {
                real: &batch.images,
                fake: &fake,
                conditions: &batch.conditions,
                image_labels: &batch.image_labels,
            };
            let (loss, grads) =
                discriminator_objective(&self.discriminator, &self.loss, &db, &mut self.rng, true).map_err(&nonfinite)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite {
                    iter,
                    what: "discriminator loss".into(),
                });
            }
            let grads = grads.expect("requested");
            check_grads(&grads, iter, "discriminator")?;
            self.adam_d.step(self.discriminator.store_mut(), &grads, &adam);
            d = loss;
        }

        let mut g_total = 0.0;
        let mut g_adv = 0.0;
        for _ in 0..self.config.g_steps_per_iter {
            let z = self.noise(n);
            let (loss, grads) = generator_objective(
                &self.generator,
                &self.discriminator,
                &self.loss,
                &batch.conditions,
                &z,
                &batch.sound_labels,
                true,
            )
            .map_err(&nonfinite)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite {
                    iter,
                    what: "generator loss".into(),
                });
            }
            let grads = grads.expect("requested");
            check_grads(&grads, iter, "generator")?;
            self.adam_g.step(self.generator.store_mut(), &grads, &adam);
            g_total += loss.total;
            g_adv += loss.adversarial;
        }
        let k = self.config.g_steps_per_iter as f64;
        self.iter += 1;
        Ok(IterMetrics {
            iter,
            d_loss: d.total,
            g_loss: g_total / k,
            aux_loss_real: d.aux_nll,
            adv_terms: AdvTerms {
                d_real: d.real,
                d_fake: d.fake,
                gp: d.gp,
                g: g_adv / k,
            },
            wallclock_s: None,
        })
    }

    fn rng_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(56);
        b.extend_from_slice(&self.rng.get_seed());
        b.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        b.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        b
    }

    pub fn to_checkpoint(&self) -> Container {
        let meta = CheckpointMeta {
            spec: self.spec.clone(),
            train: self.config.clone(),
            loss: self.loss.clone(),
            iter: self.iter,
            adam_g_t: self.adam_g.t,
            adam_d_t: self.adam_d.t,
        };
        let mut c = Container {
            meta: serde_json::to_string(&meta).expect("serializable"),
            ..Default::default()
        };
        c.push_tensor("cond.mean", &Tensor::from_vec(self.norm.mean.clone()));
        c.push_tensor("cond.std", &Tensor::from_vec(self.norm.std.clone()));
        for (store, adam) in [
            (self.generator.store(), &self.adam_g),
            (self.discriminator.store(), &self.adam_d),
        ] {
            for id in store.ids() {
                c.push_tensor(store.name(id), store.get(id));
            }
            for (k, id) in store.trainable_ids().into_iter().enumerate() {
                c.push_tensor(format!("adam.m.{}", store.name(id)), &adam.m[k]);
                c.push_tensor(format!("adam.v.{}", store.name(id)), &adam.v[k]);
            }
        }
        c.push_bytes("rng", self.rng_bytes());
        c
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Restores the exact training state; `raw` must be the same training
    /// set (unnormalized) the run started from.
    pub fn from_checkpoint(c: &Container, raw: TrainingSet) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_str(&c.meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let models = LoadedModels::from_container(c)?;
        let rng_b = c.bytes("rng")?;
        if rng_b.len() != 56 {
            return Err(Error::Checkpoint("rng state must be 56 bytes".into()));
        }
        let mut rng = ChaCha8Rng::from_seed(rng_b[..32].try_into().expect("32 bytes"));
        rng.set_stream(u64::from_le_bytes(rng_b[32..40].try_into().expect("8 bytes")));
        rng.set_word_pos(u128::from_le_bytes(rng_b[40..56].try_into().expect("16 bytes")));
        let mut t = Self::assemble(
            meta.spec,
            meta.train,
            meta.loss,
            models.generator,
            models.discriminator,
            models.norm,
            rng,
            meta.iter,
            raw,
        )?;
        for (store, adam, steps) in [
            (t.generator.store(), &mut t.adam_g, meta.adam_g_t),
            (t.discriminator.store(), &mut t.adam_d, meta.adam_d_t),
        ] {
            adam.t = steps;
            for (k, id) in store.trainable_ids().into_iter().enumerate() {
                adam.m[k] = expect_shape(c, &format!("adam.m.{}", store.name(id)), store.get(id))?;
                adam.v[k] = expect_shape(c, &format!("adam.v.{}", store.name(id)), store.get(id))?;
            }
        }
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>, raw: TrainingSet) -> Result<Self> {
        Self::from_checkpoint(&Container::load(path)?, raw)
    }
}

fn expect_shape(c: &Container, name: &str, like: &Tensor) -> Result<Tensor> {
    let t = c.tensor(name)?;
    if t.shape() != like.shape() {
        return Err(Error::Checkpoint(format!(
            "{name} has shape {:?}, expected {:?}",
            t.shape(),
            like.shape()
        )));
    }
    Ok(t.clone())
}

fn fill_store(store: &mut ParamStore, c: &Container) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        *store.get_mut(id) = expect_shape(c, &name, store.get(id))?;
    }
    Ok(())
}

/// Trained networks and condition normalizer read back from a checkpoint.
#[derive(Debug, Clone)]
pub struct LoadedModels {
    pub spec: ModelSpec,
    pub loss: LossConfig,
    pub iter: u64,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub norm: CondNorm,
}

impl LoadedModels {
    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_str(&c.meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut generator = Generator::new(meta.spec.generator.clone(), &mut rng)?;
        let mut discriminator = Discriminator::new(meta.spec.discriminator.clone(), &mut rng)?;
        fill_store(generator.store_mut(), c)?;
        fill_store(discriminator.store_mut(), c)?;
        let mean = c.tensor("cond.mean")?.data().to_vec();
        let std = c.tensor("cond.std")?.data().to_vec();
        if mean.len() != meta.spec.generator.cond_dim || std.len() != mean.len() {
            return Err(Error::Checkpoint("condition statistics do not match the model".into()));
        }
        Ok(Self {
            spec: meta.spec,
            loss: meta.loss,
            iter: meta.iter,
            generator,
            discriminator,
            norm: CondNorm { mean, std },
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Output locations of a training run.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for d in [root.join("checkpoints"), root.join("grids")] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(Self { root })
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.ndjson")
    }

    pub fn checkpoint(&self, label: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{label}.sgck"))
    }

    pub fn grid(&self, tag: &str, iter: u64) -> PathBuf {
        self.root.join("grids").join(format!("grid_{tag}_{iter}.png"))
    }
}

/// Sample grid: one row per class (first training example of that class),
/// one column per fixed noise vector.
pub fn sample_grid(t: &Trainer, columns: usize) -> Result<Tensor> {
    let data = t.data();
    let mut rng = ChaCha8Rng::seed_from_u64(t.config.seed);
    rng.set_stream(2);
    let z = Tensor::randn(&[columns, t.config.noise_dim], 1.0, &mut rng);
    let mut rows = Vec::new();
    for k in 0..t.spec.classes.len() {
        let Some(i) = data.sound_labels.iter().position(|&l| l == k) else {
            continue;
        };
        let cond = data.batch(&vec![i; columns]).conditions;
        let imgs = t.generator.generate_batch(&cond, &z)?;
        rows.push((0..columns).map(|c| imgs.index0(c)).collect());
    }
    image::grid(&rows)
}

/// Runs `trainer` to its iteration budget, appending metrics to
/// `metrics.ndjson`, writing periodic and final checkpoints and grids. A
/// non-finite loss leaves a `diverged_<iter>` checkpoint of the last good
/// state and returns the error.
pub fn run(trainer: &mut Trainer, layout: &RunLayout, mut on_iter: impl FnMut(&IterMetrics)) -> Result<()> {
    let path = layout.metrics();
    let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    let mut log = BufWriter::new(file);
    let started = Instant::now();
    let total = trainer.total_iterations();
    while trainer.iteration() < total {
        let mut m = match trainer.step() {
            Ok(m) => m,
            Err(e @ Error::NonFinite { .. }) => {
                log.flush().map_err(|e| Error::io(&path, e))?;
                trainer.save(layout.checkpoint(&format!("diverged_{}", trainer.iteration())))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if trainer.config.record_wallclock {
            m.wallclock_s = Some(started.elapsed().as_secs_f64());
        }
        writeln!(log, "{}", serde_json::to_string(&m).expect("serializable")).map_err(|e| Error::io(&path, e))?;
        on_iter(&m);
        let done = trainer.iteration();
        let every = |k: u64| k > 0 && done % k == 0 && done < total;
        if every(trainer.config.checkpoint_every) {
            log.flush().map_err(|e| Error::io(&path, e))?;
            trainer.save(layout.checkpoint(&format!("iter_{done}")))?;
        }
        if every(trainer.config.grid_every) {
            image::write_png(layout.grid("train", done), &sample_grid(trainer, 8)?)?;
        }
    }
    log.flush().map_err(|e| Error::io(&path, e))?;
    trainer.save(layout.checkpoint("final"))?;
    image::write_png(layout.grid("train", trainer.iteration()), &sample_grid(trainer, 8)?)?;
    Ok(())
}

/// Creates an empty metrics file (truncating any previous one).
pub fn reset_metrics(layout: &RunLayout) -> Result<()> {
    let p = layout.metrics();
    File::create(&p).map(|_| ()).map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_ablation_rows() {
        let p = |n| LossConfig::preset(n).unwrap();
        let flags = |c: LossConfig| (c.adversarial, c.use_spectral_norm, c.use_projection, c.use_aux_classifier);
        assert_eq!(flags(p("table5-b")), (Adversarial::WganGp, false, false, false));
        assert_eq!(flags(p("table5-c")), (Adversarial::Vanilla, false, false, false));
        assert_eq!(flags(p("table5-d")), (Adversarial::Vanilla, true, false, false));
        assert_eq!(flags(p("table5-e")), (Adversarial::Hinge, true, false, false));
        assert_eq!(flags(p("table5-f")), (Adversarial::Hinge, true, true, false));
        assert_eq!(flags(p("table5-g")), (Adversarial::Hinge, true, true, true));
        assert!(LossConfig::preset("table5-a").is_err());
        assert_eq!(LossConfig::default(), p("table5-g"));
    }

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.lr, 0.0002);
        assert_eq!((c.g_steps_per_iter, c.d_steps_per_iter), (5, 1));
        assert_eq!(c.epochs, 300);
        assert_eq!(c.noise_dim, 10);
        assert_eq!(GeneratorConfig::default().input_dim(), 266);
        assert_eq!(LossConfig::default().gp_lambda, 10.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let cfg = AdamConfig::from(&TrainConfig::default());
        let mut p = vec![1.0, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &cfg);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::from(&TrainConfig::default());
        let mut p = vec![0.0, 0.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_step(&mut p, &[5.0, -300.0], &mut m, &mut v, 1, &cfg);
        assert!((p[0] + cfg.lr).abs() < 1e-10);
        assert!((p[1] - cfg.lr).abs() < 1e-10);
    }

    #[test]
    fn condition_normalizer() {
        let c = Tensor::new(&[2, 2], vec![1.0, 5.0, 3.0, 5.0]).unwrap();
        let n = CondNorm::fit(&c);
        assert_eq!(n.mean, vec![2.0, 5.0]);
        assert_eq!(n.std, vec![1.0, 1.0]);
        assert_eq!(n.apply(&[3.0, 7.0]), vec![1.0, 2.0]);
    }
}
