//! Paired sound/image manifests, classifier-agreement cleaning, the
//! synthetic dataset generator, and in-memory training sets.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{self, FeatureConfig, FeatureKind, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::image;
use crate::models::{ClassId, ClassTable, DEFAULT_CLASSES};
use crate::tensor::Tensor;

/// Pairs per class after cleaning, in [`DEFAULT_CLASSES`] order.
pub const REFERENCE_CLASS_COUNTS: [usize; 9] = [264, 259, 207, 1899, 2803, 900, 584, 2077, 1708];

pub const MANIFEST_FILE: &str = "manifest.ndjson";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairedExample {
    pub id: String,
    /// Relative to the manifest's directory.
    pub audio_path: PathBuf,
    pub image_path: PathBuf,
    pub sound_label: ClassId,
    pub image_label: ClassId,
    pub split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    classes: Vec<String>,
    provenance: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub examples: Vec<PairedExample>,
    pub classes: ClassTable,
    pub provenance: String,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(examples: Vec<PairedExample>, classes: ClassTable, provenance: impl Into<String>) -> Result<Self> {
        let m = Self {
            examples,
            classes,
            provenance: provenance.into(),
            root: PathBuf::from("."),
        };
        m.validate()?;
        Ok(m)
    }

    /// Unique ids and in-range labels.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for ex in &self.examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::Data(format!("duplicate example id {:?}", ex.id)));
            }
            for l in [ex.sound_label, ex.image_label] {
                if !self.classes.contains(l) {
                    return Err(Error::Data(format!(
                        "example {:?} has label {l} outside {} classes",
                        ex.id,
                        self.classes.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> Manifest {
        Manifest {
            examples: self.examples.iter().filter(|e| e.split == split).cloned().collect(),
            ..self.clone()
        }
    }

    /// A header line with the class table and provenance, then one record
    /// per example.
    pub fn to_ndjson(&self) -> String {
        let header = ManifestHeader {
            classes: self.classes.names().to_vec(),
            provenance: self.provenance.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("serializable");
        out.push('\n');
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| Error::Data("manifest has no header line".into()))?;
        let header: ManifestHeader =
            serde_json::from_str(first).map_err(|e| Error::Data(format!("manifest header: {e}")))?;
        let classes = ClassTable::new(header.classes).map_err(Error::Data)?;
        let mut examples = Vec::new();
        for (i, line) in lines {
            let ex: PairedExample =
                serde_json::from_str(line).map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1)))?;
            examples.push(ex);
        }
        let mut m = Self::new(examples, classes, header.provenance)?;
        m.root = root.into();
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        Self::parse(&text, root)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_ndjson()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CleanReport {
    pub total: usize,
    pub kept: usize,
    pub discarded: usize,
    /// `discarded / total`, or 0 for an empty manifest.
    pub discard_fraction: f64,
    /// Set when the manifest was empty and the fraction is not meaningful.
    pub undefined: bool,
}

/// Keeps exactly the pairs whose sound and image labels agree.
pub fn clean(m: &Manifest) -> (Manifest, CleanReport) {
    let examples: Vec<_> = m.examples.iter().filter(|e| e.sound_label == e.image_label).cloned().collect();
    let total = m.len();
    let kept = examples.len();
    let report = CleanReport {
        total,
        kept,
        discarded: total - kept,
        discard_fraction: if total == 0 { 0.0 } else { (total - kept) as f64 / total as f64 },
        undefined: total == 0,
    };
    (Manifest { examples, ..m.clone() }, report)
}

/// Source of per-example class predictions, e.g. an external classifier.
pub trait LabelProvider {
    fn label(&self, example: &PairedExample) -> Option<ClassId>;
}

/// Predictions read from a sidecar file of `id<TAB>class` lines, where the
/// class is a name from the manifest's table or a numeric id.
#[derive(Debug, Clone, Default)]
pub struct SidecarLabels {
    labels: BTreeMap<String, ClassId>,
}

impl SidecarLabels {
    pub fn load(path: impl AsRef<Path>, classes: &ClassTable) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut labels = BTreeMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, class) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("{}:{}: expected id<TAB>class", path.display(), i + 1)))?;
            let class = class.trim();
            let cid = classes
                .id(class)
                .or_else(|| class.parse().ok().map(ClassId).filter(|c| classes.contains(*c)))
                .ok_or_else(|| Error::Data(format!("{}:{}: unknown class {class:?}", path.display(), i + 1)))?;
            labels.insert(id.to_string(), cid);
        }
        Ok(Self { labels })
    }
}

impl LabelProvider for SidecarLabels {
    fn label(&self, example: &PairedExample) -> Option<ClassId> {
        self.labels.get(&example.id).copied()
    }
}

/// Overwrites labels with provider predictions where available.
pub fn apply_labels(m: &mut Manifest, sound: Option<&dyn LabelProvider>, image: Option<&dyn LabelProvider>) {
    for ex in &mut m.examples {
        if let Some(l) = sound.and_then(|p| p.label(ex)) {
            ex.sound_label = l;
        }
        if let Some(l) = image.and_then(|p| p.label(ex)) {
            ex.image_label = l;
        }
    }
}

/// Examples per class, counted by sound label.
pub fn load_class_counts(m: &Manifest) -> Result<Vec<usize>> {
    let mut counts = vec![0; m.classes.len()];
    for ex in &m.examples {
        *counts
            .get_mut(ex.sound_label.0)
            .ok_or_else(|| Error::Data(format!("unknown class id {} in {:?}", ex.sound_label, ex.id)))? += 1;
    }
    Ok(counts)
}

/// Permutation of `0..n` for one epoch, keyed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Index batches covering `0..n` once; the final partial batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    epoch_order(n, seed, epoch).chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn batch_iterator(
    m: &Manifest,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = Vec<&PairedExample>> + '_ {
    batch_indices(m.len(), batch_size, seed, epoch)
        .into_iter()
        .map(move |b| b.into_iter().map(|i| &m.examples[i]).collect())
}

/// Recipe for the synthetic paired dataset. Each class gets a pure-tone
/// carrier in its own octave band and an image of a class-specific shape
/// and colour on a shared background; object area follows loudness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: Vec<String>,
    pub counts: Vec<usize>,
    pub image_size: usize,
    pub sample_rate: u32,
    pub duration_s: f64,
    /// Peak amplitudes are drawn log-uniformly from this range.
    pub volume_min: f64,
    pub volume_max: f64,
    /// Object area grows as `(v / v_mid)^coupling`.
    pub coupling: f64,
    /// Probability that the image shows a different class than the sound.
    pub label_noise: f64,
    /// White-noise amplitude relative to the carrier.
    pub noise_mix: f64,
    /// Relative standard deviation of the object size.
    pub size_jitter: f64,
    pub test_fraction: f64,
    pub background: [f64; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            counts: REFERENCE_CLASS_COUNTS.iter().map(|c| (c + 5) / 10).collect(),
            image_size: 32,
            sample_rate: DEFAULT_SAMPLE_RATE,
            duration_s: 0.5,
            volume_min: 0.02,
            volume_max: 0.3,
            coupling: 1.0,
            label_noise: 0.0,
            noise_mix: 0.05,
            size_jitter: 0.03,
            test_fraction: 0.2,
            background: [-1.0, -1.0, -1.0],
        }
    }
}

const PALETTE: [[f64; 3]; 9] = [
    [0.9, -0.7, -0.7],
    [-0.7, 0.8, -0.7],
    [-0.6, -0.5, 0.9],
    [0.9, 0.9, -0.7],
    [0.9, -0.6, 0.9],
    [-0.6, 0.9, 0.9],
    [0.95, 0.2, -0.8],
    [0.9, 0.9, 0.9],
    [0.1, -0.7, 0.6],
];

impl SynthSpec {
    /// Two well-separated classes, the smallest useful smoke dataset.
    pub fn two_class(per_class: usize) -> Self {
        Self {
            classes: DEFAULT_CLASSES[..2].iter().map(|s| s.to_string()).collect(),
            counts: vec![per_class; 2],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        ClassTable::new(self.classes.clone()).map_err(Error::Config)?;
        if self.classes.len() > PALETTE.len() {
            return bad(format!("at most {} synthetic classes are supported", PALETTE.len()));
        }
        if self.counts.len() != self.classes.len() {
            return bad(format!("{} counts for {} classes", self.counts.len(), self.classes.len()));
        }
        if !(8..=64).contains(&self.image_size) {
            return bad(format!("image size {} outside 8..=64", self.image_size));
        }
        if !(self.volume_min > 0.0 && self.volume_min <= self.volume_max && self.volume_max <= 1.0) {
            return bad("volume range must satisfy 0 < min <= max <= 1".into());
        }
        if !(self.coupling >= 0.0) {
            return bad("coupling must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.label_noise) || !(0.0..=1.0).contains(&self.test_fraction) {
            return bad("label_noise and test_fraction must lie in [0, 1]".into());
        }
        if self.label_noise > 0.0 && self.classes.len() < 2 {
            return bad("label noise needs at least two classes".into());
        }
        if !(self.duration_s > 0.0) || self.sample_rate == 0 {
            return bad("duration and sample rate must be positive".into());
        }
        Ok(())
    }

    pub fn class_table(&self) -> Result<ClassTable> {
        ClassTable::new(self.classes.clone()).map_err(Error::Config)
    }

    /// Carrier frequency of class `k`: octave-spaced around 640 Hz, at most
    /// two octaves apart.
    pub fn carrier_hz(&self, k: usize) -> f64 {
        let n = self.classes.len();
        if n == 1 {
            return 640.0;
        }
        let step = (8.0 / (n - 1) as f64).min(2.0);
        640.0 * 2f64.powf((k as f64 - (n - 1) as f64 / 2.0) * step)
    }

    pub fn volume_mid(&self) -> f64 {
        (self.volume_min * self.volume_max).sqrt()
    }

    /// Object radius before jitter for loudness `v`.
    pub fn radius(&self, v: f64) -> f64 {
        let s = self.image_size as f64;
        let r = s / 6.0 * (v / self.volume_mid()).powf(self.coupling / 2.0);
        r.clamp(1.5, s / 2.0 - 1.0)
    }

    pub fn color(&self, k: usize) -> [f64; 3] {
        PALETTE[k]
    }
}

/// Pure tone of `freq` with 10 ms linear fades plus white noise.
pub fn synth_audio<R: Rng + ?Sized>(spec: &SynthSpec, freq: f64, volume: f64, rng: &mut R) -> Result<Waveform> {
    let sr = f64::from(spec.sample_rate);
    let n = (spec.duration_s * sr).round() as usize;
    let fade = (0.01 * sr).round().max(1.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = (i as f64 / fade).min((n - i) as f64 / fade).min(1.0);
            let noise: f64 = rng.sample(StandardNormal);
            volume * (env * (2.0 * PI * freq * t + phase).sin() + spec.noise_mix * noise)
        })
        .collect();
    Ok(Waveform::new(samples, spec.sample_rate)?)
}

/// Whether the pixel offset `(dx, dy)` lies inside shape `k` of size `r`.
fn inside(k: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match k % 9 {
        0 => dx * dx + dy * dy <= r * r,
        1 => ax.max(ay) <= 0.886 * r,
        2 => ax + ay <= 1.2533 * r,
        3 => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= 1.15 * r && d >= 0.55 * r
        }
        4 => ax.max(ay) <= 1.1 * r && ax.min(ay) <= 0.4 * r,
        5 => ax <= 1.4 * r && ay <= 0.56 * r,
        6 => ay <= 1.4 * r && ax <= 0.56 * r,
        7 => dy <= 0.8 * r && dy >= -1.2 * r && ax <= 0.675 * (dy + 1.2 * r),
        _ => (dx / 1.3).powi(2) + (dy / 0.77).powi(2) <= r * r,
    }
}

/// Class-`k` object of radius `r` centred at `(cx, cy)`.
pub fn synth_image(spec: &SynthSpec, k: usize, r: f64, cx: f64, cy: f64) -> Tensor {
    let s = spec.image_size;
    let color = spec.color(k);
    let mut img = Tensor::zeros(&[3, s, s]);
    let d = img.data_mut();
    for y in 0..s {
        for x in 0..s {
            let on = inside(k, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
            for c in 0..3 {
                d[(c * s + y) * s + x] = if on { color[c] } else { spec.background[c] };
            }
        }
    }
    img
}

/// One synthesized pair before it is written out.
#[derive(Debug, Clone)]
pub struct SynthExample {
    pub example: PairedExample,
    pub volume: f64,
    pub audio: Waveform,
    pub image: Tensor,
}

/// Example `index` of class `class`, drawn from its own random stream.
pub fn synth_example(spec: &SynthSpec, seed: u64, index: usize, class: usize) -> Result<SynthExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let n = spec.classes.len();
    let (lo, hi) = (spec.volume_min.ln(), spec.volume_max.ln());
    let volume = if hi > lo { rng.gen_range(lo..hi).exp() } else { spec.volume_min };
    let image_class = if rng.gen::<f64>() < spec.label_noise {
        (class + rng.gen_range(1..n)) % n
    } else {
        class
    };
    let split = if rng.gen::<f64>() < spec.test_fraction { Split::Test } else { Split::Train };
    let band = spec.carrier_hz(class) * 2f64.powf(rng.gen_range(-0.05..0.05));
    let jitter: f64 = rng.sample(StandardNormal);
    let r = spec.radius(volume) * (1.0 + spec.size_jitter * jitter).max(0.5);
    let s = spec.image_size as f64;
    let slack = (s / 16.0).max(0.5);
    let cx = s / 2.0 + rng.gen_range(-slack..slack);
    let cy = s / 2.0 + rng.gen_range(-slack..slack);
    let audio = synth_audio(spec, band, volume, &mut rng)?;
    let image = synth_image(spec, image_class, r, cx, cy);
    let id = format!("ex{index:06}");
    Ok(SynthExample {
        example: PairedExample {
            audio_path: PathBuf::from("audio").join(format!("{id}.wav")),
            image_path: PathBuf::from("images").join(format!("{id}.png")),
            id,
            sound_label: ClassId(class),
            image_label: ClassId(image_class),
            split,
        },
        volume,
        audio,
        image,
    })
}

/// Probe sound `index` of `class` at the geometric mid loudness, so that
/// scaling by 0.5 to 3 stays inside `[volume_min, volume_max]`.
pub fn synth_probe_sound(spec: &SynthSpec, seed: u64, index: usize, class: usize) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROBE_SALT);
    rng.set_stream(index as u64);
    let band = spec.carrier_hz(class) * 2f64.powf(rng.gen_range(-0.05..0.05));
    synth_audio(spec, band, spec.volume_mid(), &mut rng)
}

/// Keeps probe streams apart from the example streams of the same seed.
const PROBE_SALT: u64 = 0x7072_6f62_65;

/// Writes `n` probe sounds, cycling through the classes, as
/// `probe_NNN.wav` under `dir`.
pub fn write_probe_sounds(spec: &SynthSpec, seed: u64, n: usize, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..n)
        .map(|i| {
            let p = dir.join(format!("probe_{i:03}.wav"));
            synth_probe_sound(spec, seed, i, i % spec.classes.len())?.write_wav(&p)?;
            Ok(p)
        })
        .collect()
}

/// Class of every example index, in generation order.
pub fn synth_classes(spec: &SynthSpec) -> Vec<usize> {
    spec.counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat(k).take(c)).collect()
}

/// Writes `audio/`, `images/`, the manifest and the spec under `out`.
pub fn synthesize_dataset(spec: &SynthSpec, seed: u64, out: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out = out.as_ref();
    for sub in ["audio", "images"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut examples = Vec::new();
    for (i, class) in synth_classes(spec).into_iter().enumerate() {
        let ex = synth_example(spec, seed, i, class)?;
        ex.audio.write_wav(out.join(&ex.example.audio_path))?;
        image::write_png(out.join(&ex.example.image_path), &ex.image)?;
        examples.push(ex.example);
    }
    let provenance = format!(
        "synthetic: seed {seed}, {} classes, coupling {}, label noise {}",
        spec.classes.len(),
        spec.coupling,
        spec.label_noise
    );
    let mut m = Manifest::new(examples, spec.class_table()?, provenance)?;
    m.root = out.to_path_buf();
    m.save(out.join(MANIFEST_FILE))?;
    let spec_path = out.join("synth.toml");
    fs::write(&spec_path, toml::to_string(spec).expect("serializable")).map_err(|e| Error::io(&spec_path, e))?;
    Ok(m)
}

/// Where condition vectors come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditionSource {
    /// Featurize each example's audio file.
    Extract(FeatureConfig),
    /// Read `<dir>/<id>.sne` files, time-averaging each.
    Directory(PathBuf, FeatureKind),
}

/// Condition vector of one example.
pub fn load_condition(m: &Manifest, ex: &PairedExample, source: &ConditionSource) -> Result<Vec<f64>> {
    match source {
        ConditionSource::Extract(cfg) if cfg.kind == FeatureKind::Embedding => {
            let p = m.resolve(&ex.audio_path).with_extension("sne");
            Ok(audio::average_condition(&audio::load_embedding_sequence(p)?).vector)
        }
        ConditionSource::Extract(cfg) => {
            let w = Waveform::read_wav(m.resolve(&ex.audio_path))?;
            Ok(audio::condition_from_waveform(&w, cfg)?.vector)
        }
        ConditionSource::Directory(dir, kind) => {
            let seq = audio::read_feature_file(dir.join(format!("{}.sne", ex.id)), *kind)?;
            Ok(audio::average_condition(&seq).vector)
        }
    }
}

/// Images, raw condition vectors and both label sets of a manifest, held in
/// memory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub ids: Vec<String>,
    /// `n × c × s × s`.
    pub images: Tensor,
    /// `n × d`.
    pub conditions: Tensor,
    pub sound_labels: Vec<usize>,
    pub image_labels: Vec<usize>,
}

/// Rows of a [`TrainingSet`].
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub conditions: Tensor,
    pub sound_labels: Vec<usize>,
    pub image_labels: Vec<usize>,
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let row = t.len() / t.shape()[0];
    let mut data = Vec::with_capacity(row * idx.len());
    for &i in idx {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data).expect("consistent rows")
}

impl TrainingSet {
    pub fn new(
        ids: Vec<String>,
        images: Tensor,
        conditions: Tensor,
        sound_labels: Vec<usize>,
        image_labels: Vec<usize>,
    ) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::Data("training set is empty".into()));
        }
        if images.rank() != 4
            || images.shape()[0] != n
            || conditions.rank() != 2
            || conditions.shape()[0] != n
            || sound_labels.len() != n
            || image_labels.len() != n
        {
            return Err(Error::Data(format!(
                "inconsistent training set: {n} ids, images {:?}, conditions {:?}, {} / {} labels",
                images.shape(),
                conditions.shape(),
                sound_labels.len(),
                image_labels.len()
            )));
        }
        Ok(Self {
            ids,
            images,
            conditions,
            sound_labels,
            image_labels,
        })
    }

    pub fn from_manifest(m: &Manifest, source: &ConditionSource) -> Result<Self> {
        if m.is_empty() {
            return Err(Error::Data("manifest has no examples".into()));
        }
        let mut images = Vec::new();
        let mut conds = Vec::new();
        let mut shape = None;
        let mut dim = None;
        for ex in &m.examples {
            let img = image::read_png(m.resolve(&ex.image_path))?;
            if *shape.get_or_insert_with(|| img.shape().to_vec()) != img.shape() {
                return Err(Error::Data(format!("image {:?} has shape {:?}", ex.id, img.shape())));
            }
            images.extend_from_slice(img.data());
            let c = load_condition(m, ex, source)?;
            if *dim.get_or_insert(c.len()) != c.len() {
                return Err(Error::Data(format!("condition of {:?} has {} entries", ex.id, c.len())));
            }
            conds.extend(c);
        }
        let n = m.len();
        let mut ishape = vec![n];
        ishape.extend(shape.expect("non-empty"));
        Self::new(
            m.examples.iter().map(|e| e.id.clone()).collect(),
            Tensor::new(&ishape, images)?,
            Tensor::new(&[n, dim.expect("non-empty")], conds)?,
            m.examples.iter().map(|e| e.sound_label.0).collect(),
            m.examples.iter().map(|e| e.image_label.0).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn cond_dim(&self) -> usize {
        self.conditions.shape()[1]
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn max_label(&self) -> usize {
        self.sound_labels.iter().chain(&self.image_labels).copied().max().unwrap_or(0)
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch {
            images: gather_rows(&self.images, idx),
            conditions: gather_rows(&self.conditions, idx),
            sound_labels: idx.iter().map(|&i| self.sound_labels[i]).collect(),
            image_labels: idx.iter().map(|&i| self.image_labels[i]).collect(),
        }
    }

    /// Copy with conditions mapped through `f`.
    pub fn map_conditions(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let d = self.cond_dim();
        let data: Vec<f64> = self.conditions.data().chunks(d).flat_map(f).collect();
        let mut out = self.clone();
        out.conditions = Tensor::new(&[self.len(), data.len() / self.len()], data)?;
        Ok(out)
    }
}

/// Writes one condition vector per example as a single-frame `SNE1` file.
pub fn write_conditions(m: &Manifest, cfg: &FeatureConfig, out: impl AsRef<Path>) -> Result<Vec<(String, Error)>> {
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut failures = Vec::new();
    let source = ConditionSource::Extract(cfg.clone());
    for ex in &m.examples {
        match load_condition(m, ex, &source) {
            Ok(v) => {
                let dim = v.len();
                let seq = audio::FeatureSequence::new(v, 1, dim, cfg.kind, 0.0)?;
                audio::write_feature_file(out.join(format!("{}.sne", ex.id)), &seq)?;
            }
            Err(e) => failures.push((ex.id.clone(), e)),
        }
    }
    let cfg_path = out.join("features.toml");
    let mut f = BufWriter::new(fs::File::create(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?);
    f.write_all(toml::to_string(cfg).expect("serializable").as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(&cfg_path, e))?;
    Ok(failures)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: &str, s: usize, i: usize) -> PairedExample {
        PairedExample {
            id: id.into(),
            audio_path: format!("audio/{id}.wav").into(),
            image_path: format!("images/{id}.png").into(),
            sound_label: ClassId(s),
            image_label: ClassId(i),
            split: Split::Train,
        }
    }

    #[test]
    fn manifest_round_trip() {
        let m = Manifest::new(vec![ex("a", 0, 0), ex("b", 1, 2)], ClassTable::default(), "test").unwrap();
        let back = Manifest::parse(&m.to_ndjson(), ".").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn manifest_rejects_duplicates_and_bad_labels() {
        assert!(Manifest::new(vec![ex("a", 0, 0), ex("a", 1, 1)], ClassTable::default(), "").is_err());
        assert!(Manifest::new(vec![ex("a", 0, 9)], ClassTable::default(), "").is_err());
    }

    #[test]
    fn empty_manifest_cleans_to_flagged_zero() {
        let m = Manifest::new(vec![], ClassTable::default(), "").unwrap();
        let (kept, r) = clean(&m);
        assert!(kept.is_empty());
        assert_eq!(r.discard_fraction, 0.0);
        assert!(r.undefined);
        assert_eq!(load_class_counts(&m).unwrap(), vec![0; 9]);
    }

    #[test]
    fn carriers_are_at_least_an_octave_apart() {
        for n in 1..=9 {
            let spec = SynthSpec {
                classes: DEFAULT_CLASSES[..n].iter().map(|s| s.to_string()).collect(),
                counts: vec![1; n],
                ..Default::default()
            };
            for k in 1..n {
                assert!(spec.carrier_hz(k) / spec.carrier_hz(k - 1) >= 2.0 - 1e-12);
            }
            assert!(spec.carrier_hz(n - 1) * 2f64.powf(0.05) < f64::from(spec.sample_rate) / 2.0);
        }
    }

    #[test]
    fn shapes_grow_with_radius() {
        let spec = SynthSpec::default();
        for k in 0..9 {
            let mut last = 0;
            for r in [2.0, 4.0, 6.0, 8.0] {
                let a = image::foreground_area(&synth_image(&spec, k, r, 16.0, 16.0), &spec.background);
                assert!(a > last, "class {k} radius {r}");
                last = a;
            }
        }
    }
}
