use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soundgan::audio::{
    self, average_condition, dct2, extract, fbank, frame_and_window, idct2, load_embedding_sequence,
    mel_filterbank, mfcc, power_spectrogram, read_feature_file, scale_volume, write_feature_file,
    AudioError, FeatureConfig, FeatureKind, FeatureSequence, Waveform, LOG_FLOOR,
};

const SR: u32 = 22050;

fn noise(n: usize, amp: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..n).map(|_| amp * rng.gen_range(-1.0..1.0)).collect(), SR).unwrap()
}

fn naive_power(frame: &[f64], n: usize) -> Vec<f64> {
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &x) in frame.iter().enumerate() {
                let ang = -2.0 * PI * (k * t) as f64 / n as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            re * re + im * im
        })
        .collect()
}

#[test]
fn sine_at_bin_center_peaks_at_that_bin() {
    let n = 1024;
    for k in [5usize, 37, 100, 300] {
        let freq = k as f64 * f64::from(SR) / n as f64;
        let samples = (0..8000)
            .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / f64::from(SR)).sin())
            .collect();
        let w = Waveform::new(samples, SR).unwrap();
        let frames = frame_and_window(&w, 25.0, 10.0).unwrap();
        let spec = power_spectrogram(&frames).unwrap();
        assert_eq!(spec.dim(), n / 2 + 1);
        for t in 0..spec.frames() {
            let argmax = |v: &[f64]| {
                v.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(argmax(spec.frame(t)), k);
            let oracle = naive_power(&frames.frames[t], n);
            assert_eq!(argmax(&oracle), k);
        }
        // the FFT path agrees with the direct DFT on one frame
        let oracle = naive_power(&frames.frames[0], n);
        for (a, b) in spec.frame(0).iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }
}

#[test]
fn parseval_identity() {
    let w = noise(6000, 0.7, 4);
    let frames = frame_and_window(&w, 25.0, 10.0).unwrap();
    let spec = power_spectrogram(&frames).unwrap();
    let n = audio::fft_size(frames.frame_len);
    for t in 0..spec.frames() {
        // one-sided bins: interior bins stand for their mirror image too
        let p = spec.frame(t);
        let total: f64 = p
            .iter()
            .enumerate()
            .map(|(k, v)| if k == 0 || k == n / 2 { *v } else { 2.0 * v })
            .sum();
        let mean_square: f64 = frames.frames[t].iter().map(|x| x * x).sum::<f64>() / n as f64;
        let want = (n * n) as f64 * mean_square;
        assert!((total - want).abs() / want < 1e-9);
    }
}

#[test]
fn volume_scaling_multiplies_spectrum_by_square() {
    let w = noise(5000, 0.3, 9);
    let base = power_spectrogram(&frame_and_window(&w, 25.0, 10.0).unwrap()).unwrap();
    for k in [0.5, 2.0, 3.0] {
        let (scaled, clipped) = scale_volume(&w, k).unwrap();
        assert_eq!(clipped, 0.0);
        let s = power_spectrogram(&frame_and_window(&scaled, 25.0, 10.0).unwrap()).unwrap();
        for (a, b) in s.data().iter().zip(base.data()) {
            if *b > 1e-300 {
                assert!((a - k * k * b).abs() / (k * k * b) < 1e-9);
            }
        }
    }
}

/// Triangle weight at `f` re-derived from the mel formula.
fn triangle(f: f64, m: usize, n_mels: usize, f_min: f64, f_max: f64) -> f64 {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let step = (mel(f_max) - mel(f_min)) / (n_mels + 1) as f64;
    let l = inv(mel(f_min) + step * m as f64);
    let c = inv(mel(f_min) + step * (m + 1) as f64);
    let r = inv(mel(f_min) + step * (m + 2) as f64);
    if f > l && f <= c {
        (f - l) / (c - l)
    } else if f > c && f < r {
        (r - f) / (r - c)
    } else {
        0.0
    }
}

#[test]
fn white_spectrum_gives_filter_areas() {
    let (bins, n_mels, f_min, f_max) = (513, 40, 0.0, 11025.0);
    let level = 3.5;
    let spec = FeatureSequence::new(vec![level; bins], 1, bins, FeatureKind::Spectrogram, 0.01).unwrap();
    let fb = fbank(&spec, SR, n_mels, f_min, f_max).unwrap();
    let bin_hz = f64::from(SR) / 1024.0;
    for m in 0..n_mels {
        let area: f64 = (0..bins).map(|b| triangle(b as f64 * bin_hz, m, n_mels, f_min, f_max)).sum();
        assert!((fb.frame(0)[m] - (LOG_FLOOR + level * area).ln()).abs() < 1e-10);
    }
}

#[test]
fn filterbank_covers_interior_bins() {
    for (f_min, f_max) in [(0.0, 11025.0), (300.0, 8000.0)] {
        let w = mel_filterbank(40, 513, SR, f_min, f_max).unwrap();
        let bin_hz = f64::from(SR) / 1024.0;
        for b in 0..513 {
            let f = b as f64 * bin_hz;
            if f > f_min && f < f_max {
                let total: f64 = (0..40).map(|m| w[m * 513 + b]).sum();
                assert!(total > 0.0, "bin {b} ({f} Hz) uncovered");
            }
        }
        // unit peak: no weight above one
        assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    assert!(mel_filterbank(40, 513, SR, 5000.0, 4000.0).is_err());
    assert!(mel_filterbank(40, 513, SR, 0.0, 20000.0).is_err());
}

#[test]
fn dct_matches_naive_sum_and_inverts() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [8usize, 13, 40] {
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let c = dct2(&x);
        for (k, ck) in c.iter().enumerate() {
            let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            let naive: f64 = (0..n)
                .map(|i| x[i] * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                .sum::<f64>()
                * s;
            assert!((ck - naive).abs() < 1e-10);
        }
        let back = idct2(&c);
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn mfcc_truncates_the_dct() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frame: Vec<f64> = (0..40).map(|_| rng.gen_range(-20.0..0.0)).collect();
    let fb = FeatureSequence::new(frame.clone(), 1, 40, FeatureKind::Fbank, 0.01).unwrap();
    let m = mfcc(&fb, 13).unwrap();
    assert_eq!(m.dim(), 13);
    assert_eq!(m.frame(0), &dct2(&frame)[..13]);
}

#[test]
fn average_matches_columnwise_oracle() {
    let w = noise(9000, 0.5, 3);
    let cfg = FeatureConfig::default();
    let seq = extract(&w, &cfg).unwrap();
    let cond = average_condition(&seq);
    for d in 0..seq.dim() {
        let col: f64 = (0..seq.frames()).map(|t| seq.data()[t * seq.dim() + d]).sum();
        assert!((cond.vector[d] - col / seq.frames() as f64).abs() < 1e-12);
    }
}

#[test]
fn trailing_silence_shifts_average_by_frame_weighting() {
    // frame == hop so no frame straddles the signal/silence boundary
    let mut cfg = FeatureConfig {
        frame_ms: 20.0,
        hop_ms: 20.0,
        ..FeatureConfig::default()
    };
    let frame = 441;
    let loud = noise(frame * 12, 0.5, 8);
    let mut padded = loud.samples().to_vec();
    padded.extend(std::iter::repeat(0.0).take(frame * 5));
    let padded = Waveform::new(padded, SR).unwrap();
    for kind in [FeatureKind::Fbank, FeatureKind::Mfcc] {
        cfg.kind = kind;
        let a = average_condition(&extract(&loud, &cfg).unwrap()).vector;
        let b = average_condition(&extract(&padded, &cfg).unwrap()).vector;
        let silence = average_condition(&extract(&Waveform::new(vec![0.0; frame], SR).unwrap(), &cfg).unwrap()).vector;
        for d in 0..a.len() {
            let want = (12.0 * a[d] + 5.0 * silence[d]) / 17.0;
            assert!((b[d] - want).abs() < 1e-9, "{kind} dim {d}");
        }
    }
}

#[test]
fn extraction_is_bit_identical() {
    let w = noise(7000, 0.4, 12);
    for kind in [FeatureKind::Spectrogram, FeatureKind::Fbank, FeatureKind::Mfcc] {
        let cfg = FeatureConfig {
            kind,
            ..FeatureConfig::default()
        };
        let a = extract(&w, &cfg).unwrap();
        let b = extract(&w.clone(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), cfg.dim());
    }
}

#[test]
fn zero_wave_gives_zero_spectrogram_condition() {
    let cfg = FeatureConfig {
        kind: FeatureKind::Spectrogram,
        ..FeatureConfig::default()
    };
    let w = Waveform::new(vec![0.0; 5000], SR).unwrap();
    let c = audio::condition_from_waveform(&w, &cfg).unwrap();
    assert!(c.vector.iter().all(|&v| v == 0.0));
}

#[test]
fn embedding_files() {
    let dir = tempfile::tempdir().unwrap();
    let zero = dir.path().join("zero.sne");
    let seq = FeatureSequence::new(vec![0.0; 256], 1, 256, FeatureKind::Embedding, 0.0).unwrap();
    write_feature_file(&zero, &seq).unwrap();
    let back = load_embedding_sequence(&zero).unwrap();
    assert_eq!(back.frames(), 1);
    assert!(back.frame(0).iter().all(|&v| v == 0.0));

    // round trip at f32-representable values
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<f64> = (0..3 * 256).map(|_| f64::from(rng.gen::<f32>())).collect();
    let seq = FeatureSequence::new(data, 3, 256, FeatureKind::Embedding, 0.0).unwrap();
    let path = dir.path().join("seq.sne");
    write_feature_file(&path, &seq).unwrap();
    assert_eq!(load_embedding_sequence(&path).unwrap().data(), seq.data());

    let narrow = FeatureSequence::new(vec![1.0; 40], 1, 40, FeatureKind::Fbank, 0.0).unwrap();
    let p40 = dir.path().join("narrow.sne");
    write_feature_file(&p40, &narrow).unwrap();
    assert!(matches!(
        load_embedding_sequence(&p40),
        Err(AudioError::Dimension { expected: 256, got: 40 })
    ));
    assert_eq!(read_feature_file(&p40, FeatureKind::Fbank).unwrap().dim(), 40);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_embedding_sequence(&path), Err(AudioError::MalformedEmbedding(_))));
    std::fs::write(&path, b"RIFF0000").unwrap();
    assert!(matches!(load_embedding_sequence(&path), Err(AudioError::MalformedEmbedding(_))));
}

#[test]
fn wav_round_trip_and_layout_checks() {
    let dir = tempfile::tempdir().unwrap();
    let w = noise(3000, 0.9, 21);
    let path = dir.path().join("a.wav");
    w.write_wav(&path).unwrap();
    let back = Waveform::read_wav(&path).unwrap();
    assert_eq!(back.len(), w.len());
    for (a, b) in back.samples().iter().zip(w.samples()) {
        assert!((a - b).abs() < 1.0 / 16000.0);
    }

    let stereo = dir.path().join("stereo.wav");
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: SR,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut wr = hound::WavWriter::create(&stereo, spec).unwrap();
    for _ in 0..100 {
        wr.write_sample(0i16).unwrap();
    }
    wr.finalize().unwrap();
    assert!(matches!(Waveform::read_wav(&stereo), Err(AudioError::UnsupportedFormat(_))));
}
