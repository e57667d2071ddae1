//! Inception score over a locally trained classifier, conditional accuracy
//! and the loudness probe.

use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{self, FeatureKind, Waveform};
use crate::checkpoint::Container;
use crate::data::{batch_indices, Manifest, Split};
use crate::error::{Error, Result};
use crate::image::{self, foreground_area};
use crate::layers::{Conv2d, Linear, ParamStore, Scope};
use crate::models::Generator;
use crate::tensor::{Graph, Tensor};
use crate::train::{AdamConfig, AdamState, CondNorm, LoadedModels, Trainer};

/// Floor applied to probabilities inside logarithms.
pub const POSTERIOR_FLOOR: f64 = 1e-12;
pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_FACTORS: [f64; 4] = [0.5, 1.0, 2.0, 3.0];

/// `exp(mean_x KL(p(y|x) ‖ p̄))` for one set of posterior rows, clamped to
/// the mathematical range `[1, K]`.
pub fn fold_score(posteriors: &[&[f64]]) -> f64 {
    let k = posteriors[0].len();
    let n = posteriors.len() as f64;
    let log_marginal: Vec<f64> = (0..k)
        .map(|y| running_mean(posteriors.iter().map(|p| p[y])).max(POSTERIOR_FLOOR).ln())
        .collect();
    let mean_kl = compensated_sum(posteriors.iter().map(|p| {
        compensated_sum(
            p.iter()
                .zip(&log_marginal)
                .filter(|(v, _)| **v > 0.0)
                .map(|(v, lm)| v * (v.max(POSTERIOR_FLOOR).ln() - lm)),
        )
    })) / n;
    mean_kl.exp().clamp(1.0, k as f64)
}

/// Incremental mean, exact when all values are equal (uniform posteriors
/// then score exactly 1).
fn running_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut m = 0.0;
    for (i, v) in values.enumerate() {
        m += (v - m) / (i + 1) as f64;
    }
    m
}

/// Neumaier summation; keeps the degenerate one-hot case within an ulp of
/// `ln K`.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        c += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
    pub folds: Vec<f64>,
    pub n_images: usize,
    pub n_folds: usize,
    pub clf_hash: String,
}

impl ScoreReport {
    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

/// Scores `n × K` posterior rows: seeded shuffle, `n_folds` equal contiguous
/// folds, remainder dropped.
pub fn inception_score_from_posteriors(posteriors: &Tensor, n_folds: usize, seed: u64) -> Result<ScoreReport> {
    if posteriors.rank() != 2 || posteriors.shape()[1] == 0 {
        return Err(Error::Eval(format!("posteriors must be n × K, got {:?}", posteriors.shape())));
    }
    let (n, k) = (posteriors.shape()[0], posteriors.shape()[1]);
    if n_folds == 0 || n < n_folds {
        return Err(Error::Eval(format!("{n} images cannot fill {n_folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let per = n / n_folds;
    let rows: Vec<&[f64]> = order.iter().map(|&i| &posteriors.data()[i * k..(i + 1) * k]).collect();
    let folds: Vec<f64> = rows.chunks_exact(per).take(n_folds).map(fold_score).collect();
    let mean = folds.iter().sum::<f64>() / n_folds as f64;
    let std = (folds.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n_folds as f64).sqrt();
    Ok(ScoreReport {
        mean,
        std,
        folds,
        n_images: n,
        n_folds,
        clf_hash: String::new(),
    })
}

pub fn inception_score(images: &Tensor, clf: &EvalClassifier, n_folds: usize, seed: u64) -> Result<ScoreReport> {
    let mut r = inception_score_from_posteriors(&clf.posteriors(images)?, n_folds, seed)?;
    r.clf_hash = clf.hash.clone();
    Ok(r)
}

/// Single-fold score of the images conditioned on each class; `None` for
/// classes without images.
pub fn per_class_scores(posteriors: &Tensor, labels: &[usize], n_classes: usize) -> Vec<Option<f64>> {
    let k = posteriors.shape()[1];
    (0..n_classes)
        .map(|c| {
            let rows: Vec<&[f64]> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == c)
                .map(|(i, _)| &posteriors.data()[i * k..(i + 1) * k])
                .collect();
            (!rows.is_empty()).then(|| fold_score(&rows))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub width: usize,
    pub blocks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Minimum held-out accuracy before the classifier may score anything.
    pub gate: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            width: 8,
            blocks: 3,
            epochs: 8,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            gate: 0.9,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassifierMeta {
    config: ClassifierConfig,
    classes: Vec<String>,
    image_shape: [usize; 3],
    held_out_accuracy: f64,
}

/// Stand-in for a pretrained image classifier: stride-2 conv blocks, mean
/// pooling and a linear head, trained on real images and frozen.
#[derive(Debug, Clone)]
pub struct EvalClassifier {
    pub config: ClassifierConfig,
    pub classes: Vec<String>,
    pub image_shape: [usize; 3],
    pub held_out_accuracy: f64,
    /// SHA-256 of the parameters, hex.
    pub hash: String,
    store: ParamStore,
    convs: Vec<Conv2d>,
    head: Linear,
}

/// Images with one label each.
#[derive(Debug, Clone)]
pub struct LabeledImages {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    /// Real images of one split, labeled by their image class.
    pub fn from_manifest(m: &Manifest, split: Split) -> Result<Self> {
        let part = m.split(split);
        let mut data = Vec::new();
        let mut shape = None;
        for ex in &part.examples {
            let img = image::read_png(m.resolve(&ex.image_path))?;
            if *shape.get_or_insert_with(|| img.shape().to_vec()) != img.shape() {
                return Err(Error::Data(format!("{}: image shape {:?} differs", ex.id, img.shape())));
            }
            data.extend_from_slice(img.data());
        }
        let s = shape.ok_or_else(|| Error::Data(format!("no {split:?} images in the manifest")))?;
        Ok(Self {
            images: Tensor::new(&[part.len(), s[0], s[1], s[2]], data)?,
            labels: part.examples.iter().map(|e| e.image_label.0).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn select(&self, idx: &[usize]) -> Tensor {
        let row = self.images.len() / self.len();
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
        }
        Tensor::new(&shape, data).expect("consistent shape")
    }
}

impl EvalClassifier {
    fn build(config: ClassifierConfig, classes: Vec<String>, image_shape: [usize; 3]) -> Result<Self> {
        let [c, s, _] = image_shape;
        if config.blocks == 0 || s % (1 << config.blocks) != 0 || config.width == 0 {
            return Err(Error::Config(format!(
                "classifier with {} blocks cannot downsample a {s}x{s} image",
                config.blocks
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = c;
        for b in 0..config.blocks {
            let cout = config.width << b;
            convs.push(Conv2d::new(&mut store, &format!("clf.conv{b}"), cin, cout, 4, 2, 1, false, &mut rng));
            cin = cout;
        }
        let head = Linear::new(&mut store, "clf.head", cin, classes.len(), true, false, &mut rng);
        Ok(Self {
            config,
            classes,
            image_shape,
            held_out_accuracy: 0.0,
            hash: String::new(),
            store,
            convs,
            head,
        })
    }

    fn log_probs_graph(&self, g: &mut Graph, scope: &mut Scope, x: &Tensor) -> Result<crate::tensor::Var> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.image_shape {
            return Err(Error::Eval(format!(
                "classifier expects n × {:?} images, got {:?}",
                self.image_shape,
                x.shape()
            )));
        }
        let mut h = g.constant(x.clone());
        for conv in &self.convs {
            h = conv.forward(g, scope, h)?;
            h = g.leaky_relu(h, 0.2)?;
        }
        let hs = g.shape(h).to_vec();
        let flat = g.reshape(h, &[hs[0], hs[1], hs[2] * hs[3]])?;
        let pooled = g.sum_axis(flat, 2)?;
        let pooled = g.scale(pooled, 1.0 / (hs[2] * hs[3]) as f64)?;
        let logits = self.head.forward(g, scope, pooled)?;
        Ok(g.log_softmax(logits, 1)?)
    }

    /// `n × K` log posteriors.
    pub fn log_probs(&self, images: &Tensor) -> Result<Tensor> {
        let n = images.shape().first().copied().unwrap_or(0);
        let k = self.classes.len();
        let row = images.len() / n.max(1);
        let mut out = Vec::with_capacity(n * k);
        for chunk in (0..n).collect::<Vec<_>>().chunks(64) {
            let mut shape = images.shape().to_vec();
            shape[0] = chunk.len();
            let part = Tensor::new(&shape, images.data()[chunk[0] * row..(chunk[0] + chunk.len()) * row].to_vec())?;
            let mut g = Graph::new();
            let mut scope = Scope::new(&self.store, false);
            let lp = self.log_probs_graph(&mut g, &mut scope, &part)?;
            out.extend_from_slice(g.value(lp).data());
        }
        Ok(Tensor::new(&[n, k], out)?)
    }

    pub fn posteriors(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.log_probs(images)?.map(f64::exp))
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let lp = self.log_probs(images)?;
        let k = self.classes.len();
        Ok(lp
            .data()
            .chunks(k)
            .map(|r| r.iter().enumerate().fold(0, |best, (i, v)| if *v > r[best] { i } else { best }))
            .collect())
    }

    pub fn accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::Eval("accuracy of an empty image set".into()));
        }
        let pred = self.predict(images)?;
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
    }

    fn param_bytes(&self) -> Vec<u8> {
        let mut c = Container::default();
        for id in self.store.ids() {
            c.push_tensor(self.store.name(id), self.store.get(id));
        }
        c.encode()
    }

    fn rehash(&mut self) {
        self.hash = hex(&Sha256::digest(self.param_bytes()));
    }

    pub fn to_container(&self) -> Container {
        let meta = ClassifierMeta {
            config: self.config.clone(),
            classes: self.classes.clone(),
            image_shape: self.image_shape,
            held_out_accuracy: self.held_out_accuracy,
        };
        let mut c = Container {
            meta: serde_json::to_string(&meta).expect("serializable"),
            ..Default::default()
        };
        for id in self.store.ids() {
            c.push_tensor(self.store.name(id), self.store.get(id));
        }
        c
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    /// Loads a frozen classifier; refuses one that never met its gate.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = Container::load(path)?;
        let meta: ClassifierMeta =
            serde_json::from_str(&c.meta).map_err(|e| Error::Checkpoint(format!("classifier metadata: {e}")))?;
        let mut clf = Self::build(meta.config, meta.classes, meta.image_shape)?;
        for id in clf.store.ids().collect::<Vec<_>>() {
            let t = c.tensor(clf.store.name(id))?;
            if t.shape() != clf.store.get(id).shape() {
                return Err(Error::Checkpoint(format!("{}: shape mismatch", clf.store.name(id))));
            }
            *clf.store.get_mut(id) = t.clone();
        }
        clf.held_out_accuracy = meta.held_out_accuracy;
        if clf.held_out_accuracy < clf.config.gate {
            return Err(Error::Eval(format!(
                "classifier accuracy {:.3} is below its gate {}",
                clf.held_out_accuracy, clf.config.gate
            )));
        }
        clf.rehash();
        Ok(clf)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains on `train`, measures `held_out`, and fails unless the held-out
/// accuracy reaches `config.gate`.
pub fn train_eval_classifier(
    train: &LabeledImages,
    held_out: &LabeledImages,
    classes: &[String],
    config: &ClassifierConfig,
) -> Result<EvalClassifier> {
    if train.is_empty() || held_out.is_empty() {
        return Err(Error::Eval("classifier needs non-empty training and held-out sets".into()));
    }
    if let Some(&l) = train.labels.iter().chain(&held_out.labels).find(|&&l| l >= classes.len()) {
        return Err(Error::Eval(format!("label {l} outside the {} classes", classes.len())));
    }
    let s = train.images.shape();
    let shape = [s[1], s[2], s[3]];
    let mut clf = EvalClassifier::build(config.clone(), classes.to_vec(), shape)?;
    let present: std::collections::BTreeSet<_> = train.labels.iter().collect();
    if present.len() < 2 {
        warn!("classifier trained on a single class; its priors are degenerate and scores are trivial");
    }
    let adam = AdamConfig {
        lr: config.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut state = AdamState::new(&clf.store);
    for epoch in 0..config.epochs {
        for idx in batch_indices(train.len(), config.batch_size, config.seed, epoch as u64) {
            let x = train.select(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let grads = {
                let mut g = Graph::new();
                let mut scope = Scope::new(&clf.store, true);
                let lp = clf.log_probs_graph(&mut g, &mut scope, &x)?;
                let picked = g.pick(lp, &labels)?;
                let nll = g.mean(picked)?;
                let loss = g.scale(nll, -1.0)?;
                if !g.value(loss).item().is_finite() {
                    return Err(Error::Eval(format!("classifier loss diverged in epoch {epoch}")));
                }
                scope.gradients(&g.backward(loss)?)
            };
            state.step(&mut clf.store, &grads, &adam);
        }
    }
    clf.held_out_accuracy = clf.accuracy(&held_out.images, &held_out.labels)?;
    if clf.held_out_accuracy < config.gate {
        return Err(Error::Eval(format!(
            "classifier held-out accuracy {:.3} is below the gate {}",
            clf.held_out_accuracy, config.gate
        )));
    }
    clf.rehash();
    Ok(clf)
}

/// Anything that maps raw condition rows and noise rows to images.
pub trait ConditionalSampler {
    fn noise_dim(&self) -> usize;
    fn sample(&self, raw_conditions: &Tensor, noise: &Tensor) -> Result<Tensor>;
}

/// A generator behind the condition normalizer it was trained with.
#[derive(Debug, Clone, Copy)]
pub struct NormalizedGenerator<'a> {
    pub generator: &'a Generator,
    pub norm: &'a CondNorm,
}

impl<'a> From<&'a LoadedModels> for NormalizedGenerator<'a> {
    fn from(m: &'a LoadedModels) -> Self {
        Self {
            generator: &m.generator,
            norm: &m.norm,
        }
    }
}

impl<'a> From<&'a Trainer> for NormalizedGenerator<'a> {
    fn from(t: &'a Trainer) -> Self {
        Self {
            generator: &t.generator,
            norm: &t.norm,
        }
    }
}

impl ConditionalSampler for NormalizedGenerator<'_> {
    fn noise_dim(&self) -> usize {
        self.generator.config().noise_dim
    }

    fn sample(&self, raw_conditions: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let d = raw_conditions.shape()[1];
        let normed: Vec<f64> = raw_conditions.data().chunks(d).flat_map(|r| self.norm.apply(r)).collect();
        let c = Tensor::new(raw_conditions.shape(), normed)?;
        Ok(self.generator.generate_batch(&c, noise)?)
    }
}

/// Noise rows for evaluation, independent of the training streams.
pub fn eval_noise(n: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    Tensor::randn(&[n, dim], 1.0, &mut rng)
}

/// One image per condition row, with per-row noise from `seed`.
pub fn generate_images(sampler: &impl ConditionalSampler, raw_conditions: &Tensor, seed: u64) -> Result<Tensor> {
    let n = raw_conditions.shape()[0];
    let noise = eval_noise(n, sampler.noise_dim(), seed);
    let (d, z) = (raw_conditions.shape()[1], sampler.noise_dim());
    let mut parts = Vec::new();
    let mut shape = Vec::new();
    for start in (0..n).step_by(64) {
        let len = 64.min(n - start);
        let c = Tensor::new(&[len, d], raw_conditions.data()[start * d..(start + len) * d].to_vec())?;
        let e = Tensor::new(&[len, z], noise.data()[start * z..(start + len) * z].to_vec())?;
        let imgs = sampler.sample(&c, &e)?;
        shape = imgs.shape().to_vec();
        parts.extend_from_slice(imgs.data());
    }
    if n == 0 {
        return Err(Error::Eval("no conditions to generate from".into()));
    }
    shape[0] = n;
    Ok(Tensor::new(&shape, parts)?)
}

/// Fraction of generated images the classifier assigns to the sound label
/// they were conditioned on.
pub fn conditional_accuracy(
    sampler: &impl ConditionalSampler,
    raw_conditions: &Tensor,
    sound_labels: &[usize],
    clf: &EvalClassifier,
    seed: u64,
) -> Result<f64> {
    if sound_labels.is_empty() {
        return Err(Error::Eval("conditional accuracy over an empty test set".into()));
    }
    let images = generate_images(sampler, raw_conditions, seed)?;
    clf.accuracy(&images, sound_labels)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub factors: Vec<f64>,
    /// `areas[sound][factor]` in pixels.
    pub areas: Vec<Vec<usize>>,
    pub median_area: Vec<f64>,
    /// Largest clipped-sample fraction seen at each factor.
    pub max_clipped: Vec<f64>,
    #[serde(skip)]
    pub grid: Tensor,
}

impl ProbeReport {
    pub fn is_non_decreasing(&self) -> bool {
        self.median_area.windows(2).all(|w| w[0] <= w[1])
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Rescales each sound by every factor, featurizes, and generates with the
/// same noise per sound; one grid row per sound.
pub fn volume_probe(
    models: &LoadedModels,
    sounds: &[Waveform],
    factors: &[f64],
    background: &[f64],
    seed: u64,
) -> Result<ProbeReport> {
    if sounds.is_empty() || factors.is_empty() {
        return Err(Error::Eval("volume probe needs at least one sound and one factor".into()));
    }
    let features = &models.spec.features;
    if features.kind == FeatureKind::Embedding {
        return Err(Error::Eval("precomputed embeddings cannot be recomputed at another volume".into()));
    }
    let sampler = NormalizedGenerator::from(models);
    let noise = eval_noise(sounds.len(), sampler.noise_dim(), seed);
    let z = sampler.noise_dim();
    let mut areas = Vec::new();
    let mut rows = Vec::new();
    let mut max_clipped = vec![0.0f64; factors.len()];
    for (si, sound) in sounds.iter().enumerate() {
        let mut conds = Vec::new();
        for (fi, &f) in factors.iter().enumerate() {
            let (scaled, clipped) = audio::scale_volume(sound, f)?;
            max_clipped[fi] = max_clipped[fi].max(clipped);
            conds.extend(audio::condition_from_waveform(&scaled, features)?.vector);
        }
        let d = conds.len() / factors.len();
        let c = Tensor::new(&[factors.len(), d], conds)?;
        let row_noise: Vec<f64> = (0..factors.len())
            .flat_map(|_| noise.data()[si * z..(si + 1) * z].iter().copied())
            .collect();
        let imgs = sampler.sample(&c, &Tensor::new(&[factors.len(), z], row_noise)?)?;
        let row: Vec<Tensor> = (0..factors.len()).map(|i| imgs.index0(i)).collect();
        areas.push(row.iter().map(|img| foreground_area(img, background)).collect::<Vec<_>>());
        rows.push(row);
    }
    let median_area = (0..factors.len())
        .map(|fi| median(&areas.iter().map(|a| a[fi] as f64).collect::<Vec<_>>()))
        .collect();
    Ok(ProbeReport {
        factors: factors.to_vec(),
        areas,
        median_area,
        max_clipped,
        grid: image::grid(&rows)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn fold_score_limits() {
        let u = [0.25; 4];
        assert_eq!(fold_score(&[&u, &u, &u]), 1.0);
        let eye: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let rows: Vec<&[f64]> = eye.iter().map(Vec::as_slice).collect();
        assert_eq!(fold_score(&rows), 4.0);
    }
}
