//! Sound featurization: framing, power spectrogram, log-mel filterbank,
//! MFCC, precomputed embedding files, and time-averaging into the
//! generator's condition vector.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Log floor for filterbank energies.
pub const LOG_FLOOR: f64 = 1e-10;
/// Width of precomputed sound embeddings.
pub const EMBEDDING_DIM: usize = 256;
pub const DEFAULT_SAMPLE_RATE: u32 = 22050;

const EMBEDDING_MAGIC: &[u8; 4] = b"SNE1";

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("waveform is empty")]
    Empty,
    #[error("waveform has {len} samples, shorter than one {frame}-sample frame")]
    TooShort { len: usize, frame: usize },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("invalid feature configuration: {0}")]
    InvalidConfig(String),
    #[error("unsupported audio layout: {0}")]
    UnsupportedFormat(String),
    #[error("malformed embedding file: {0}")]
    MalformedEmbedding(String),
    #[error("expected feature dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// Mono PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(AudioError::Empty);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite(i));
        }
        if sample_rate == 0 {
            return Err(AudioError::InvalidConfig("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Clamps to `[-1, 1]` and returns the fraction of samples that were
    /// out of range.
    pub fn clip(&mut self) -> f64 {
        let mut clipped = 0usize;
        for s in &mut self.samples {
            if s.abs() > 1.0 {
                clipped += 1;
                *s = s.clamp(-1.0, 1.0);
            }
        }
        clipped as f64 / self.samples.len() as f64
    }

    /// Reads a 16-bit PCM mono WAV file.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1
            || spec.bits_per_sample != 16
            || spec.sample_format != hound::SampleFormat::Int
        {
            return Err(AudioError::UnsupportedFormat(format!(
                "{} channel(s), {}-bit {:?}; expected mono 16-bit PCM",
                spec.channels, spec.bits_per_sample, spec.sample_format
            )));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(samples, spec.sample_rate)
    }

    /// Writes 16-bit PCM mono. Samples outside `[-1, 1]` saturate.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            writer.write_sample((s * 32767.0).round().clamp(-32768.0, 32767.0) as i16)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

/// Multiplies every sample by `factor`, clips to `[-1, 1]`, and reports
/// the clipped fraction.
pub fn scale_volume(w: &Waveform, factor: f64) -> Result<(Waveform, f64)> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(AudioError::InvalidConfig(format!(
            "volume factor must be positive, got {factor}"
        )));
    }
    let mut out = Waveform {
        samples: w.samples.iter().map(|s| s * factor).collect(),
        sample_rate: w.sample_rate,
    };
    let clipped = out.clip();
    Ok((out, clipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Spectrogram,
    Fbank,
    Mfcc,
    Embedding,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Spectrogram => "spectrogram",
            Self::Fbank => "fbank",
            Self::Mfcc => "mfcc",
            Self::Embedding => "embedding",
        })
    }
}

impl FromStr for FeatureKind {
    type Err = AudioError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectrogram" => Ok(Self::Spectrogram),
            "fbank" => Ok(Self::Fbank),
            "mfcc" => Ok(Self::Mfcc),
            "embedding" => Ok(Self::Embedding),
            other => Err(AudioError::InvalidConfig(format!("unknown feature kind {other:?}"))),
        }
    }
}

/// Featurization settings. Defaults are the usual speech front-end values:
/// 25 ms Hann frames every 10 ms, 40 mel filters over `[0, Nyquist]`, 13
/// cepstra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub kind: FeatureKind,
    pub sample_rate: u32,
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub n_ceps: usize,
    pub f_min: f64,
    /// Upper filterbank edge; `0` means Nyquist.
    pub f_max: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            kind: FeatureKind::Fbank,
            sample_rate: DEFAULT_SAMPLE_RATE,
            frame_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 40,
            n_ceps: 13,
            f_min: 0.0,
            f_max: 0.0,
        }
    }
}

impl FeatureConfig {
    pub fn upper_edge(&self) -> f64 {
        if self.f_max > 0.0 {
            self.f_max
        } else {
            f64::from(self.sample_rate) / 2.0
        }
    }

    /// Width of the condition vector this configuration produces.
    pub fn dim(&self) -> usize {
        match self.kind {
            FeatureKind::Spectrogram => fft_size(ms_to_samples(self.frame_ms, self.sample_rate)) / 2 + 1,
            FeatureKind::Fbank => self.n_mels,
            FeatureKind::Mfcc => self.n_ceps,
            FeatureKind::Embedding => EMBEDDING_DIM,
        }
    }
}

/// Time-major `T × d` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: Vec<f64>,
    frames: usize,
    dim: usize,
    pub kind: FeatureKind,
    pub frame_hop_s: f64,
}

impl FeatureSequence {
    pub fn new(data: Vec<f64>, frames: usize, dim: usize, kind: FeatureKind, frame_hop_s: f64) -> Result<Self> {
        if frames == 0 || dim == 0 || data.len() != frames * dim {
            return Err(AudioError::Dimension {
                expected: frames * dim,
                got: data.len(),
            });
        }
        Ok(Self {
            data,
            frames,
            dim,
            kind,
            frame_hop_s,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Fixed-length vector conditioning the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SoundCondition {
    pub vector: Vec<f64>,
    pub kind: FeatureKind,
}

/// Hann-windowed analysis frames of one waveform.
#[derive(Debug, Clone)]
pub struct Frames {
    pub frames: Vec<Vec<f64>>,
    pub frame_len: usize,
    pub hop_len: usize,
    pub sample_rate: u32,
}

fn ms_to_samples(ms: f64, sample_rate: u32) -> usize {
    (ms * f64::from(sample_rate) / 1000.0).round() as usize
}

/// Smallest power of two holding a frame.
pub fn fft_size(frame_len: usize) -> usize {
    frame_len.next_power_of_two()
}

pub fn hann(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Splits `w` into `1 + ⌊(len − frame)/hop⌋` Hann-windowed frames.
pub fn frame_and_window(w: &Waveform, frame_ms: f64, hop_ms: f64) -> Result<Frames> {
    if !(hop_ms > 0.0 && frame_ms >= hop_ms) {
        return Err(AudioError::InvalidConfig(format!(
            "need frame_ms >= hop_ms > 0, got {frame_ms} / {hop_ms}"
        )));
    }
    let frame_len = ms_to_samples(frame_ms, w.sample_rate);
    let hop_len = ms_to_samples(hop_ms, w.sample_rate).max(1);
    if frame_len == 0 {
        return Err(AudioError::InvalidConfig("frame shorter than one sample".into()));
    }
    if w.len() < frame_len {
        return Err(AudioError::TooShort {
            len: w.len(),
            frame: frame_len,
        });
    }
    let window = hann(frame_len);
    let count = 1 + (w.len() - frame_len) / hop_len;
    let frames = (0..count)
        .map(|t| {
            w.samples[t * hop_len..t * hop_len + frame_len]
                .iter()
                .zip(&window)
                .map(|(s, h)| s * h)
                .collect()
        })
        .collect();
    Ok(Frames {
        frames,
        frame_len,
        hop_len,
        sample_rate: w.sample_rate,
    })
}

/// `|FFT|²` of each zero-padded frame, bins `0..=fft_size/2`.
pub fn power_spectrogram(frames: &Frames) -> Result<FeatureSequence> {
    let n = fft_size(frames.frame_len);
    let bins = n / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut data = Vec::with_capacity(frames.frames.len() * bins);
    for frame in &frames.frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, &s) in buf.iter_mut().zip(frame) {
            b.re = s;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
    }
    FeatureSequence::new(
        data,
        frames.frames.len(),
        bins,
        FeatureKind::Spectrogram,
        frames.hop_len as f64 / f64::from(frames.sample_rate),
    )
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters (unit peak) evaluated at the `bins` FFT bin
/// frequencies; row-major `n_mels × bins`.
pub fn mel_filterbank(
    n_mels: usize,
    bins: usize,
    sample_rate: u32,
    f_min: f64,
    f_max: f64,
) -> Result<Vec<f64>> {
    let nyquist = f64::from(sample_rate) / 2.0;
    if !(0.0 <= f_min && f_min < f_max && f_max <= nyquist) || n_mels == 0 || bins < 2 {
        return Err(AudioError::InvalidConfig(format!(
            "need 0 <= f_min < f_max <= {nyquist}, n_mels > 0; got [{f_min}, {f_max}], {n_mels}"
        )));
    }
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = nyquist / (bins - 1) as f64;
    let mut weights = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * bins..(m + 1) * bins];
        for (b, w) in row.iter_mut().enumerate() {
            let f = b as f64 * bin_hz;
            *w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(AudioError::InvalidConfig(format!(
                "{n_mels} mel filters exceed the {bins}-bin resolution (filter {m} is empty)"
            )));
        }
    }
    Ok(weights)
}

/// `log(ε + mel-filtered energy)` per frame.
pub fn fbank(
    spec: &FeatureSequence,
    sample_rate: u32,
    n_mels: usize,
    f_min: f64,
    f_max: f64,
) -> Result<FeatureSequence> {
    if spec.kind != FeatureKind::Spectrogram {
        return Err(AudioError::InvalidConfig("fbank needs a power spectrogram".into()));
    }
    let bins = spec.dim();
    let filters = mel_filterbank(n_mels, bins, sample_rate, f_min, f_max)?;
    // Each triangle is non-zero on one contiguous run of bins.
    let support: Vec<(usize, usize)> = filters
        .chunks(bins)
        .map(|row| {
            let lo = row.iter().position(|&w| w != 0.0).unwrap_or(0);
            let hi = row.iter().rposition(|&w| w != 0.0).map_or(lo, |i| i + 1);
            (lo, hi)
        })
        .collect();
    let mut data = Vec::with_capacity(spec.frames() * n_mels);
    for t in 0..spec.frames() {
        let frame = spec.frame(t);
        for (row, &(lo, hi)) in filters.chunks(bins).zip(&support) {
            let e: f64 = row[lo..hi].iter().zip(&frame[lo..hi]).map(|(w, p)| w * p).sum();
            data.push((LOG_FLOOR + e).ln());
        }
    }
    FeatureSequence::new(data, spec.frames(), n_mels, FeatureKind::Fbank, spec.frame_hop_s)
}

fn dct_basis(n: usize) -> Vec<f64> {
    let mut basis = vec![0.0; n * n];
    for k in 0..n {
        let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            basis[k * n + i] =
                s * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos();
        }
    }
    basis
}

/// Orthonormal DCT-II.
pub fn dct2(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    dct_basis(n)
        .chunks(n)
        .map(|row| row.iter().zip(x).map(|(b, v)| b * v).sum())
        .collect()
}

/// Inverse of [`dct2`] (orthonormal DCT-III).
pub fn idct2(c: &[f64]) -> Vec<f64> {
    let n = c.len();
    let basis = dct_basis(n);
    (0..n)
        .map(|i| (0..n).map(|k| basis[k * n + i] * c[k]).sum())
        .collect()
}

/// Leading `n_ceps` orthonormal DCT-II coefficients of each log-mel frame.
pub fn mfcc(fb: &FeatureSequence, n_ceps: usize) -> Result<FeatureSequence> {
    if fb.kind != FeatureKind::Fbank {
        return Err(AudioError::InvalidConfig("mfcc needs log-mel input".into()));
    }
    let n = fb.dim();
    if n_ceps == 0 || n_ceps > n {
        return Err(AudioError::InvalidConfig(format!(
            "n_ceps must be in 1..={n}, got {n_ceps}"
        )));
    }
    let basis = dct_basis(n);
    let mut data = Vec::with_capacity(fb.frames() * n_ceps);
    for t in 0..fb.frames() {
        let frame = fb.frame(t);
        for row in basis.chunks(n).take(n_ceps) {
            data.push(row.iter().zip(frame).map(|(b, v)| b * v).sum());
        }
    }
    FeatureSequence::new(data, fb.frames(), n_ceps, FeatureKind::Mfcc, fb.frame_hop_s)
}

/// Runs the configured pipeline on a waveform.
pub fn extract(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    if w.sample_rate() != cfg.sample_rate {
        return Err(AudioError::InvalidConfig(format!(
            "waveform is {} Hz but features are configured for {} Hz",
            w.sample_rate(),
            cfg.sample_rate
        )));
    }
    let frames = frame_and_window(w, cfg.frame_ms, cfg.hop_ms)?;
    let spec = power_spectrogram(&frames)?;
    match cfg.kind {
        FeatureKind::Spectrogram => Ok(spec),
        FeatureKind::Fbank => fbank(&spec, cfg.sample_rate, cfg.n_mels, cfg.f_min, cfg.upper_edge()),
        FeatureKind::Mfcc => {
            let fb = fbank(&spec, cfg.sample_rate, cfg.n_mels, cfg.f_min, cfg.upper_edge())?;
            mfcc(&fb, cfg.n_ceps)
        }
        FeatureKind::Embedding => Err(AudioError::InvalidConfig(
            "embeddings are loaded from files, not computed from audio".into(),
        )),
    }
}

/// Arithmetic mean over the time axis.
pub fn average_condition(f: &FeatureSequence) -> SoundCondition {
    let mut sum = vec![0.0; f.dim()];
    for t in 0..f.frames() {
        for (s, v) in sum.iter_mut().zip(f.frame(t)) {
            *s += v;
        }
    }
    let n = f.frames() as f64;
    SoundCondition {
        vector: sum.into_iter().map(|s| s / n).collect(),
        kind: f.kind,
    }
}

pub fn condition_from_waveform(w: &Waveform, cfg: &FeatureConfig) -> Result<SoundCondition> {
    Ok(average_condition(&extract(w, cfg)?))
}

/// Writes a `T × d` matrix in the little-endian `SNE1` layout.
pub fn write_feature_file(path: impl AsRef<Path>, seq: &FeatureSequence) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(EMBEDDING_MAGIC)?;
    out.write_all(&(seq.frames() as u32).to_le_bytes())?;
    out.write_all(&(seq.dim() as u32).to_le_bytes())?;
    for &v in seq.data() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads an `SNE1` file of any width, tagging it with `kind`.
pub fn read_feature_file(path: impl AsRef<Path>, kind: FeatureKind) -> Result<FeatureSequence> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(AudioError::MalformedEmbedding("missing SNE1 header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (frames, dim) = (word(4), word(8));
    if frames == 0 || dim == 0 {
        return Err(AudioError::MalformedEmbedding(format!("empty matrix {frames}x{dim}")));
    }
    let expected = 12 + 4 * frames * dim;
    if bytes.len() != expected {
        return Err(AudioError::MalformedEmbedding(format!(
            "{frames}x{dim} needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    FeatureSequence::new(data, frames, dim, kind, 0.0)
}

/// Loads a precomputed 256-wide sound embedding sequence.
pub fn load_embedding_sequence(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let seq = read_feature_file(path, FeatureKind::Embedding)?;
    if seq.dim() != EMBEDDING_DIM {
        return Err(AudioError::Dimension {
            expected: EMBEDDING_DIM,
            got: seq.dim(),
        });
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64, sr: u32, amp: f64) -> Waveform {
        let n = (secs * f64::from(sr)) as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / f64::from(sr)).sin())
            .collect();
        Waveform::new(samples, sr).unwrap()
    }

    #[test]
    fn frame_count_for_one_second() {
        let w = Waveform::new(vec![0.1; 22050], 22050).unwrap();
        let f = frame_and_window(&w, 25.0, 10.0).unwrap();
        assert_eq!(f.frame_len, 551);
        assert_eq!(f.frames.len(), 1 + (22050 - 551) / f.hop_len);
        assert_eq!(f.frames.len(), 98);
    }

    #[test]
    fn zero_input_gives_zero_frames_and_spectrum() {
        let w = Waveform::new(vec![0.0; 4000], 22050).unwrap();
        let f = frame_and_window(&w, 25.0, 10.0).unwrap();
        assert!(f.frames.iter().flatten().all(|&v| v == 0.0));
        let s = power_spectrogram(&f).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frame_equal_to_signal_gives_one_frame() {
        let w = Waveform::new(vec![0.2; 441], 22050).unwrap();
        let f = frame_and_window(&w, 20.0, 10.0).unwrap();
        assert_eq!(f.frame_len, 441);
        assert_eq!(f.frames.len(), 1);
        let short = Waveform::new(vec![0.2; 100], 22050).unwrap();
        assert!(matches!(
            frame_and_window(&short, 20.0, 10.0),
            Err(AudioError::TooShort { .. })
        ));
        assert!(frame_and_window(&w, 5.0, 10.0).is_err());
    }

    #[test]
    fn scale_volume_examples() {
        let w = sine(440.0, 0.1, 22050, 0.8);
        let (same, c) = scale_volume(&w, 1.0).unwrap();
        assert_eq!(same, w);
        assert_eq!(c, 0.0);
        let (half, c) = scale_volume(&w, 0.5).unwrap();
        assert!((half.peak() - 0.4).abs() < 1e-3);
        assert_eq!(c, 0.0);
        let (loud, c) = scale_volume(&w, 3.0).unwrap();
        let direct = w.samples().iter().filter(|s| (3.0 * *s).abs() > 1.0).count();
        assert_eq!(c, direct as f64 / w.len() as f64);
        assert!(loud.peak() <= 1.0);
        assert!(scale_volume(&w, 0.0).is_err());
    }

    #[test]
    fn mfcc_of_constant_frame_is_dc_only() {
        let n_mels = 40;
        let fb = FeatureSequence::new(vec![-3.0; n_mels], 1, n_mels, FeatureKind::Fbank, 0.01).unwrap();
        let m = mfcc(&fb, 13).unwrap();
        assert!((m.frame(0)[0] - (-3.0 * (n_mels as f64).sqrt())).abs() < 1e-12);
        assert!(m.frame(0)[1..].iter().all(|v| v.abs() < 1e-12));
        assert!(mfcc(&fb, 41).is_err());
    }

    #[test]
    fn zero_spectrum_fbank_is_log_floor() {
        let spec = FeatureSequence::new(vec![0.0; 513 * 2], 2, 513, FeatureKind::Spectrogram, 0.01).unwrap();
        let fb = fbank(&spec, 22050, 40, 0.0, 11025.0).unwrap();
        assert!(fb.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn too_many_mels_is_an_error() {
        let spec = FeatureSequence::new(vec![1.0; 17], 1, 17, FeatureKind::Spectrogram, 0.01).unwrap();
        assert!(fbank(&spec, 22050, 64, 0.0, 11025.0).is_err());
    }

    #[test]
    fn average_condition_examples() {
        let one = FeatureSequence::new(vec![1.0, -2.0], 1, 2, FeatureKind::Fbank, 0.01).unwrap();
        assert_eq!(average_condition(&one).vector, vec![1.0, -2.0]);
        let sym = FeatureSequence::new(vec![1.5, -2.0, -1.5, 2.0], 2, 2, FeatureKind::Fbank, 0.01).unwrap();
        assert_eq!(average_condition(&sym).vector, vec![0.0, 0.0]);
    }

    #[test]
    fn feature_kind_parses() {
        for k in ["spectrogram", "fbank", "mfcc", "embedding"] {
            assert_eq!(k.parse::<FeatureKind>().unwrap().to_string(), k);
        }
        assert!("soundnet".parse::<FeatureKind>().is_err());
    }

    #[test]
    fn config_dims() {
        let mut cfg = FeatureConfig::default();
        assert_eq!(cfg.dim(), 40);
        cfg.kind = FeatureKind::Spectrogram;
        assert_eq!(cfg.dim(), 513);
        cfg.kind = FeatureKind::Mfcc;
        assert_eq!(cfg.dim(), 13);
        cfg.kind = FeatureKind::Embedding;
        assert_eq!(cfg.dim(), 256);
    }
}
