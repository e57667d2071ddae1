use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use soundgan::layers::{ParamStore, Scope};
use soundgan::models::{Conditioning, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use soundgan::tensor::{Graph, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_d(conditioning: Conditioning, spectral_norm: bool) -> DiscriminatorConfig {
    DiscriminatorConfig {
        image_size: 8,
        cond_dim: 5,
        width: 2,
        n_classes: 9,
        spectral_norm,
        conditioning,
        concat_embed_dim: 4,
        ..Default::default()
    }
}

fn param(store: &ParamStore, name: &str) -> Tensor {
    store.get(store.find(name).unwrap()).clone()
}

fn randomize(store: &mut ParamStore, std: f64, seed: u64) {
    let mut r = rng(seed);
    for id in store.trainable_ids() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(&shape, std, &mut r);
    }
}

#[test]
fn generator_default_shape_and_determinism() {
    let g = Generator::new(GeneratorConfig::default(), &mut rng(0)).unwrap();
    let s = Tensor::randn(&[256], 1.0, &mut rng(1));
    let z = Tensor::randn(&[10], 1.0, &mut rng(2));
    let a = g.generate(s.data(), z.data()).unwrap();
    let b = g.generate(s.data(), z.data()).unwrap();
    assert_eq!(a.shape(), &[3, 64, 64]);
    assert_eq!(a, b);
}

#[test]
fn generator_output_in_tanh_range() {
    let cfg = GeneratorConfig {
        image_size: 32,
        cond_dim: 8,
        width: 4,
        ..Default::default()
    };
    let mut g = Generator::new(cfg, &mut rng(3)).unwrap();
    randomize(g.store_mut(), 0.5, 4);
    let s = Tensor::randn(&[100, 8], 3.0, &mut rng(5));
    let z = Tensor::randn(&[100, 10], 1.0, &mut rng(6));
    let out = g.generate_batch(&s, &z).unwrap();
    assert_eq!(out.shape(), &[100, 3, 32, 32]);
    assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    // Single-example inference equals batch inference.
    let one = g.generate(s.index0(7).data(), z.index0(7).data()).unwrap();
    assert_eq!(one, out.index0(7));
}

#[test]
fn feature_trunk_shape_and_stability() {
    let d = Discriminator::new(small_d(Conditioning::Projection, true), &mut rng(7)).unwrap();
    let x = Tensor::randn(&[3, 3, 8, 8], 0.5, &mut rng(8));
    let a = d.feature_trunk(&x).unwrap();
    assert_eq!(a.shape(), &[3, d.config().feat_dim()]);
    assert_eq!(a, d.feature_trunk(&x).unwrap());
    for v in [-1.0, 1.0] {
        let f = d.feature_trunk(&Tensor::full(&[1, 3, 8, 8], v)).unwrap();
        assert!(f.all_finite());
    }
    assert!(d.feature_trunk(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
}

#[test]
fn zero_projection_makes_score_independent_of_condition() {
    let mut d = Discriminator::new(small_d(Conditioning::Projection, false), &mut rng(9)).unwrap();
    randomize(d.store_mut(), 0.3, 10);
    let p = d.projection().unwrap().w.weight;
    *d.store_mut().get_mut(p) = Tensor::zeros(&[5, 16]);
    let x = Tensor::randn(&[2, 3, 8, 8], 0.5, &mut rng(11));
    let s1 = Tensor::randn(&[2, 5], 1.0, &mut rng(12));
    let s2 = Tensor::randn(&[2, 5], 1.0, &mut rng(13));
    assert_eq!(d.discriminate(&x, &s1).unwrap(), d.discriminate(&x, &s2).unwrap());
}

#[test]
fn zero_condition_leaves_only_the_scalar_head() {
    let mut d = Discriminator::new(small_d(Conditioning::Projection, false), &mut rng(14)).unwrap();
    randomize(d.store_mut(), 0.3, 15);
    let x = Tensor::randn(&[2, 3, 8, 8], 0.5, &mut rng(16));
    let phi = d.feature_trunk(&x).unwrap();
    let store = d.store();
    let w = param(store, "d.psi.weight");
    let b = param(store, "d.psi.bias").data()[0];
    let score = d.discriminate(&x, &Tensor::zeros(&[2, 5])).unwrap();
    for (i, sc) in score.iter().enumerate() {
        let psi: f64 = phi.index0(i).data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>() + b;
        assert!((sc - psi).abs() < 1e-12);
    }
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.2 * v
    }
}

/// Same-padded 3×3 convolution over `cin × 4 × 4`, one output channel at a time.
fn naive_conv3(x: &[f64], cin: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let cout = w.shape()[0];
    let mut y = vec![0.0; cout * 16];
    for o in 0..cout {
        for i in 0..4i64 {
            for j in 0..4i64 {
                let mut acc = b.data()[o];
                for c in 0..cin {
                    for di in 0..3i64 {
                        for dj in 0..3i64 {
                            let (ii, jj) = (i + di - 1, j + dj - 1);
                            if (0..4).contains(&ii) && (0..4).contains(&jj) {
                                let wv = w.data()[((o * cin + c) * 3 + di as usize) * 3 + dj as usize];
                                acc += wv * x[c * 16 + (ii * 4 + jj) as usize];
                            }
                        }
                    }
                }
                y[o * 16 + (i * 4 + j) as usize] = acc;
            }
        }
    }
    y
}

#[test]
fn tiny_net_score_matches_hand_computation() {
    let cfg = DiscriminatorConfig {
        image_size: 4,
        image_channels: 1,
        cond_dim: 2,
        width: 1,
        n_classes: 3,
        spectral_norm: false,
        conditioning: Conditioning::Projection,
        ..Default::default()
    };
    let mut d = Discriminator::new(cfg, &mut rng(17)).unwrap();
    randomize(d.store_mut(), 0.4, 18);
    let x = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng(19));
    let s = [0.7, -1.3];
    let store = d.store();

    let mut h = x.data().to_vec();
    let mut cin = 1;
    for i in 0..4 {
        let w = param(store, &format!("d.conv{i}.weight"));
        let b = param(store, &format!("d.conv{i}.bias"));
        h = naive_conv3(&h, cin, &w, &b).into_iter().map(leaky).collect();
        cin = w.shape()[0];
    }
    assert_eq!(cin, 8);
    let phi: Vec<f64> = (0..8).map(|c| h[c * 16..(c + 1) * 16].iter().sum()).collect();
    let wpsi = param(store, "d.psi.weight");
    let psi: f64 = phi.iter().zip(wpsi.data()).map(|(a, b)| a * b).sum::<f64>() + param(store, "d.psi.bias").data()[0];
    let p = param(store, "d.proj.weight");
    let mut inner = 0.0;
    for (k, phik) in phi.iter().enumerate() {
        let ps = s[0] * p.data()[k] + s[1] * p.data()[8 + k];
        inner += ps * phik;
    }
    let expected = psi + inner;
    let got = d.discriminate(&x, &Tensor::new(&[1, 2], s.to_vec()).unwrap()).unwrap()[0];
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn zero_aux_weights_give_uniform_posterior() {
    let mut d = Discriminator::new(small_d(Conditioning::Projection, false), &mut rng(20)).unwrap();
    let aux = d.aux_head().w.weight;
    *d.store_mut().get_mut(aux) = Tensor::zeros(&[16, 9]);
    let lp = d.classify(&Tensor::randn(&[2, 3, 8, 8], 0.5, &mut rng(21))).unwrap();
    for v in lp.data() {
        assert!((v - (1.0f64 / 9.0).ln()).abs() < 1e-12);
    }
}

#[test]
fn posteriors_sum_to_one() {
    let mut d = Discriminator::new(small_d(Conditioning::Projection, true), &mut rng(22)).unwrap();
    randomize(d.store_mut(), 0.5, 23);
    let lp = d.classify(&Tensor::randn(&[5, 3, 8, 8], 1.0, &mut rng(24))).unwrap();
    for i in 0..5 {
        let total: f64 = lp.index0(i).data().iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}

#[test]
fn aux_head_is_separate_from_score() {
    let mut d = Discriminator::new(small_d(Conditioning::Projection, false), &mut rng(25)).unwrap();
    randomize(d.store_mut(), 0.3, 26);
    let x = Tensor::randn(&[2, 3, 8, 8], 0.5, &mut rng(27));
    let s = Tensor::randn(&[2, 5], 1.0, &mut rng(28));
    let (score0, cls0) = (d.discriminate(&x, &s).unwrap(), d.classify(&x).unwrap());
    let aux = d.aux_head().w.weight;
    let bumped = d.store().get(aux).map(|v| v + 0.1);
    *d.store_mut().get_mut(aux) = bumped;
    assert_eq!(d.discriminate(&x, &s).unwrap(), score0);
    assert_ne!(d.classify(&x).unwrap(), cls0);
}

#[test]
fn aux_loss_reaches_trunk_weights() {
    let mut d = Discriminator::new(small_d(Conditioning::Projection, true), &mut rng(29)).unwrap();
    d.refresh_spectral();
    let x = Tensor::randn(&[4, 3, 8, 8], 0.5, &mut rng(30));
    let mut g = Graph::new();
    let mut scope = Scope::new(d.store(), true);
    let xv = g.constant(x);
    let f = d.trunk(&mut g, &mut scope, xv).unwrap();
    let lp = d.class_log_probs(&mut g, &mut scope, f).unwrap();
    let picked = g.pick(lp, &[0, 3, 8, 1]).unwrap();
    let loss = g.mean(picked).unwrap();
    let loss = g.scale(loss, -1.0).unwrap();
    let grads = scope.gradients(&g.backward(loss).unwrap());
    let ids = d.store().trainable_ids();
    for (id, grad) in ids.iter().zip(&grads) {
        let name = d.store().name(*id);
        let norm = grad.l2_norm();
        if name.starts_with("d.conv") || name.starts_with("d.aux") {
            assert!(norm > 0.0, "{name} got no gradient");
        } else {
            assert_eq!(norm, 0.0, "{name}");
        }
    }
}

#[test]
fn unconditional_score_has_zero_condition_gradient() {
    for (mode, expect_zero) in [(Conditioning::None, true), (Conditioning::Concat, false), (Conditioning::Projection, false)] {
        let mut d = Discriminator::new(small_d(mode, false), &mut rng(31)).unwrap();
        randomize(d.store_mut(), 0.3, 32);
        let mut g = Graph::new();
        let mut scope = Scope::new(d.store(), false);
        let x = g.constant(Tensor::randn(&[2, 3, 8, 8], 0.5, &mut rng(33)));
        let s = g.leaf(Tensor::randn(&[2, 5], 1.0, &mut rng(34)));
        let out = d.forward(&mut g, &mut scope, x, s).unwrap();
        let total = g.sum(out.score).unwrap();
        let grads = g.backward(total).unwrap();
        let norm = grads.get(s).unwrap().l2_norm();
        assert_eq!(norm == 0.0, expect_zero, "{mode:?}: {norm}");
    }
}
