//! Fixtures shared by the benchmarks.

use soundgan::audio::{condition_from_waveform, FeatureConfig};
use soundgan::data::{synth_classes, synth_example, Split, SynthSpec, TrainingSet};
use soundgan::models::{DiscriminatorConfig, GeneratorConfig};
use soundgan::tensor::Tensor;
use soundgan::train::{LossConfig, ModelSpec, TrainConfig, Trainer};

/// Train split of the two-class synthetic set, conditions extracted from audio.
pub fn two_class_set(per_class: usize, seed: u64) -> (SynthSpec, TrainingSet) {
    let spec = SynthSpec::two_class(per_class);
    let fc = FeatureConfig::default();
    let (mut ids, mut imgs, mut conds, mut sl, mut il) = (vec![], vec![], vec![], vec![], vec![]);
    for (i, c) in synth_classes(&spec).into_iter().enumerate() {
        let e = synth_example(&spec, seed, i, c).unwrap();
        if e.example.split != Split::Train {
            continue;
        }
        conds.extend(condition_from_waveform(&e.audio, &fc).unwrap().vector);
        imgs.extend_from_slice(e.image.data());
        ids.push(e.example.id);
        sl.push(c);
        il.push(e.example.image_label.0);
    }
    let (n, s) = (ids.len(), spec.image_size);
    let images = Tensor::new(&[n, 3, s, s], imgs).unwrap();
    let conds = Tensor::new(&[n, fc.dim()], conds).unwrap();
    let set = TrainingSet::new(ids, images, conds, sl, il).unwrap();
    (spec, set)
}

pub fn trainer(preset: &str, width: usize, batch_size: usize) -> Trainer {
    let (data, set) = two_class_set(40, 0);
    let s = data.image_size;
    let spec = ModelSpec {
        generator: GeneratorConfig {
            image_size: s,
            width,
            ..Default::default()
        },
        discriminator: DiscriminatorConfig {
            image_size: s,
            width,
            ..Default::default()
        },
        features: FeatureConfig::default(),
        classes: data.classes.clone(),
    };
    let cfg = TrainConfig {
        batch_size,
        max_iters: u64::MAX,
        ..Default::default()
    };
    Trainer::new(spec, cfg, LossConfig::preset(preset).unwrap(), set).unwrap()
}
