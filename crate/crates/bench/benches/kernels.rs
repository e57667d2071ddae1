use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soundgan::audio::{extract, FeatureConfig, FeatureKind};
use soundgan::data::{synth_probe_sound, SynthSpec};
use soundgan::tensor::{conv2d, conv2d_transposed, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("conv2d");
    for (ch, size) in [(16, 32), (64, 16), (128, 8)] {
        let x = random(&[8, ch, size, size], &mut rng);
        let w = random(&[ch, ch, 3, 3], &mut rng);
        g.bench_with_input(BenchmarkId::new("forward", format!("{ch}x{size}")), &(), |b, _| {
            b.iter(|| conv2d(black_box(&x), black_box(&w), 1, 1).unwrap())
        });
        let wt = random(&[ch, ch / 2, 4, 4], &mut rng);
        g.bench_with_input(BenchmarkId::new("transposed", format!("{ch}x{size}")), &(), |b, _| {
            b.iter(|| conv2d_transposed(black_box(&x), black_box(&wt), 2, 1).unwrap())
        });
    }
    g.finish();
}

fn features(c: &mut Criterion) {
    let spec = SynthSpec::two_class(1);
    let w = synth_probe_sound(&spec, 0, 0, 0).unwrap();
    let mut g = c.benchmark_group("features");
    for kind in [FeatureKind::Fbank, FeatureKind::Mfcc] {
        let cfg = FeatureConfig {
            kind,
            ..Default::default()
        };
        g.bench_function(kind.to_string(), |b| b.iter(|| extract(black_box(&w), &cfg).unwrap()));
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for preset in ["table5-c", "table5-g", "table5-b"] {
        let mut t = soundgan_bench::trainer(preset, 4, 16);
        g.bench_function(preset, |b| b.iter(|| t.step().unwrap()));
    }
    g.finish();
}

criterion_group!(benches, conv, features, train_step);
criterion_main!(benches);
