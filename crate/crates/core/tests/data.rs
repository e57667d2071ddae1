use proptest::prelude::*;
use soundgan::audio::{FeatureConfig, Waveform};
use soundgan::data::*;
use soundgan::image::{foreground_area, read_png};
use soundgan::{ClassId, ClassTable};

fn ex(i: usize, s: usize, im: usize) -> PairedExample {
    let id = format!("p{i:05}");
    PairedExample {
        audio_path: format!("audio/{id}.wav").into(),
        image_path: format!("images/{id}.png").into(),
        id,
        sound_label: ClassId(s),
        image_label: ClassId(im),
        split: Split::Train,
    }
}

/// 1000 pairs over 9 classes of which exactly 780 disagree.
fn disagreeing_manifest() -> Manifest {
    let examples = (0..1000)
        .map(|i| {
            let s = i % 9;
            let im = if i % 50 < 39 { (s + 1 + i % 8) % 9 } else { s };
            ex(i, s, im)
        })
        .collect();
    Manifest::new(examples, ClassTable::default(), "constructed").unwrap()
}

#[test]
fn cleaning_discards_exactly_the_disagreeing_fraction() {
    let m = disagreeing_manifest();
    let (kept, report) = clean(&m);
    assert_eq!(report.total, 1000);
    assert_eq!(report.discarded, 780);
    assert_eq!(report.discard_fraction, 0.78);
    assert!(!report.undefined);
    assert!(kept.examples.iter().all(|e| e.sound_label == e.image_label));
    let (again, second) = clean(&kept);
    assert_eq!(again, kept);
    assert_eq!(second.discarded, 0);
}

#[test]
fn sidecar_labels_override_before_cleaning() {
    let dir = tempfile::tempdir().unwrap();
    let m = Manifest::new(vec![ex(0, 1, 1), ex(1, 2, 2), ex(2, 3, 3)], ClassTable::default(), "t").unwrap();
    let p = dir.path().join("image.tsv");
    std::fs::write(&p, "# predictions\np00000\tdog\np00001\t2\n").unwrap();
    let image = SidecarLabels::load(&p, &m.classes).unwrap();
    let mut relabeled = m.clone();
    apply_labels(&mut relabeled, None, Some(&image));
    assert_eq!(relabeled.examples[0].image_label, ClassId(0));
    assert_eq!(relabeled.examples[1].image_label, ClassId(2));
    assert_eq!(relabeled.examples[2].image_label, ClassId(3));
    assert_eq!(clean(&relabeled).1.discarded, 1);

    std::fs::write(&p, "p00000\tunicorn\n").unwrap();
    assert!(SidecarLabels::load(&p, &m.classes).is_err());
}

#[test]
fn reference_class_table() {
    let classes = ClassTable::default();
    assert_eq!(classes.names(), ["dog", "drum", "guitar", "piano", "plane", "speedboat", "dam", "soccer", "baseball"]);
    assert_eq!(REFERENCE_CLASS_COUNTS.iter().sum::<usize>(), 10701);
    let examples = REFERENCE_CLASS_COUNTS
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat(k).take(c))
        .enumerate()
        .map(|(i, k)| ex(i, k, k))
        .collect();
    let m = Manifest::new(examples, classes, "reference").unwrap();
    assert_eq!(load_class_counts(&m).unwrap(), REFERENCE_CLASS_COUNTS);
}

#[test]
fn manifest_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = disagreeing_manifest();
    let p = dir.path().join(MANIFEST_FILE);
    m.save(&p).unwrap();
    let back = Manifest::load(&p).unwrap();
    assert_eq!(back.examples, m.examples);
    assert_eq!(back.classes, m.classes);
    assert_eq!(back.provenance, m.provenance);
    assert!(Manifest::parse("{\"classes\":[\"a\"],\"provenance\":\"x\"}\n{\"id\":1}\n", ".").is_err());
}

proptest! {
    #[test]
    fn batches_partition_the_epoch(n in 1usize..200, bs in 1usize..40, seed in any::<u64>(), epoch in 0u64..5) {
        let batches = batch_indices(n, bs, seed, epoch);
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        prop_assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == bs));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(batch_indices(n, bs, seed, epoch), batches);
    }
}

#[test]
fn epochs_are_shuffled_differently() {
    assert_ne!(epoch_order(100, 1, 0), epoch_order(100, 1, 1));
    assert_ne!(epoch_order(100, 1, 0), epoch_order(100, 2, 0));
    assert_ne!(epoch_order(100, 1, 0), (0..100).collect::<Vec<_>>());
}

fn small_spec() -> SynthSpec {
    SynthSpec {
        counts: vec![3, 2, 2, 1, 1, 1, 1, 1, 1],
        image_size: 16,
        duration_s: 0.25,
        label_noise: 0.3,
        ..Default::default()
    }
}

#[test]
fn synthesis_is_byte_deterministic_and_decodable() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = small_spec();
    let ma = synthesize_dataset(&spec, 7, a.path()).unwrap();
    synthesize_dataset(&spec, 7, b.path()).unwrap();
    assert_eq!(ma.len(), 13);
    for e in &ma.examples {
        for rel in [&e.audio_path, &e.image_path] {
            assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
        }
        let w = Waveform::read_wav(a.path().join(&e.audio_path)).unwrap();
        assert_eq!(w.sample_rate(), spec.sample_rate);
        assert!(!w.is_empty());
        let img = read_png(a.path().join(&e.image_path)).unwrap();
        assert_eq!(img.shape(), &[3, 16, 16]);
    }
    assert_eq!(
        std::fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
        std::fs::read(b.path().join(MANIFEST_FILE)).unwrap()
    );
    let c = tempfile::tempdir().unwrap();
    synthesize_dataset(&spec, 8, c.path()).unwrap();
    let e = &ma.examples[0];
    assert_ne!(
        std::fs::read(a.path().join(&e.audio_path)).unwrap(),
        std::fs::read(c.path().join(&e.audio_path)).unwrap()
    );
    let loaded = Manifest::load(a.path().join(MANIFEST_FILE)).unwrap();
    let set = TrainingSet::from_manifest(&loaded, &ConditionSource::Extract(FeatureConfig::default())).unwrap();
    assert_eq!(set.len(), 13);
    assert_eq!(set.cond_dim(), FeatureConfig::default().dim());
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// (log volume, foreground area) of `n` examples of one class.
fn volume_area(spec: &SynthSpec, n: usize) -> (Vec<f64>, Vec<f64>) {
    (0..n)
        .map(|i| {
            let e = synth_example(spec, 3, i, i % 2).unwrap();
            (e.volume.ln(), foreground_area(&e.image, &spec.background) as f64)
        })
        .unzip()
}

#[test]
fn area_tracks_loudness_when_coupled() {
    let spec = SynthSpec {
        duration_s: 0.05,
        ..SynthSpec::two_class(100)
    };
    let (v, a) = volume_area(&spec, 200);
    let rho = pearson(&ranks(&v), &ranks(&a));
    assert!(rho > 0.9, "spearman {rho}");
}

#[test]
fn area_ignores_loudness_when_uncoupled() {
    let spec = SynthSpec {
        coupling: 0.0,
        duration_s: 0.05,
        ..SynthSpec::two_class(500)
    };
    let (v, a) = volume_area(&spec, 1000);
    let r = pearson(&v, &a);
    assert!(r.abs() < 0.1, "pearson {r}");
}

#[test]
fn label_noise_sets_the_discard_fraction() {
    let spec = SynthSpec {
        counts: vec![112, 111, 111, 111, 111, 111, 111, 111, 111],
        duration_s: 0.05,
        image_size: 8,
        label_noise: 0.4,
        ..Default::default()
    };
    let examples: Vec<_> = synth_classes(&spec)
        .into_iter()
        .enumerate()
        .map(|(i, k)| synth_example(&spec, 11, i, k).unwrap().example)
        .collect();
    let m = Manifest::new(examples, spec.class_table().unwrap(), "noisy").unwrap();
    let r = clean(&m).1;
    assert_eq!(r.total, 1000);
    assert!((r.discard_fraction - 0.4).abs() < 0.05, "{}", r.discard_fraction);
}

#[test]
fn spec_validation() {
    assert!(SynthSpec::default().validate().is_ok());
    let total: usize = SynthSpec::default().counts.iter().sum();
    assert!((1060..=1080).contains(&total), "{total}");
    for bad in [
        SynthSpec {
            counts: vec![1],
            ..Default::default()
        },
        SynthSpec {
            label_noise: 1.5,
            ..Default::default()
        },
        SynthSpec {
            volume_min: 0.0,
            ..Default::default()
        },
        SynthSpec {
            image_size: 2,
            ..Default::default()
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}
