//! Generator, projection discriminator with a shared-trunk auxiliary
//! classifier, and the class label table.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{Conv2d, ConvTranspose2d, Linear, ParamStore, Scope};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

/// The nine sound classes kept after cleaning, in label order.
pub const DEFAULT_CLASSES: [&str; 9] = [
    "dog", "drum", "guitar", "piano", "plane", "speedboat", "dam", "soccer", "baseball",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub usize);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Bijection between class ids `0..n` and label names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    names: Vec<String>,
}

impl Default for ClassTable {
    fn default() -> Self {
        Self::new(DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect()).expect("distinct defaults")
    }
}

impl ClassTable {
    /// Fails on an empty table or repeated names.
    pub fn new(names: Vec<String>) -> std::result::Result<Self, String> {
        if names.is_empty() {
            return Err("class table is empty".into());
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(format!("class name {n:?} appears twice"));
            }
        }
        Ok(Self { names })
    }

    /// The first `n` default classes.
    pub fn first(n: usize) -> std::result::Result<Self, String> {
        if n == 0 || n > DEFAULT_CLASSES.len() {
            return Err(format!("need 1..=9 default classes, got {n}"));
        }
        Self::new(DEFAULT_CLASSES[..n].iter().map(|s| s.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ClassId) -> Option<&str> {
        self.names.get(id.0).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<ClassId> {
        self.names.iter().position(|n| n == name).map(ClassId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, id: ClassId) -> bool {
        id.0 < self.names.len()
    }
}

/// Number of stride-2 resampling blocks taking 4×4 to `image_size`.
fn resampling_blocks(image_size: usize) -> Result<usize> {
    if image_size < 4 || !image_size.is_power_of_two() || image_size > 64 {
        return Err(TensorError::InvalidConv(format!(
            "image size must be a power of two in 4..=64, got {image_size}"
        )));
    }
    Ok((image_size / 4).trailing_zeros() as usize)
}

pub const BLOCKS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub cond_dim: usize,
    pub noise_dim: usize,
    /// Channels of the last hidden block; earlier blocks use 2×, 4×, 8×.
    pub width: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            image_channels: 3,
            cond_dim: 256,
            noise_dim: 10,
            width: 32,
        }
    }
}

impl GeneratorConfig {
    pub fn input_dim(&self) -> usize {
        self.cond_dim + self.noise_dim
    }
}

/// Project-and-reshape to `8w × 4 × 4`, then four transposed-convolution
/// blocks with ReLU between them and `tanh` on the image.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    store: ParamStore,
    fc: Linear,
    blocks: Vec<ConvTranspose2d>,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        let ups = resampling_blocks(config.image_size)?;
        let w = config.width;
        let mut store = ParamStore::new();
        let fc = Linear::new(&mut store, "g.fc", config.input_dim(), 8 * w * 16, true, false, rng);
        let mut blocks = Vec::with_capacity(BLOCKS);
        let mut ch = 8 * w;
        for i in 0..BLOCKS {
            let out = if i + 1 == BLOCKS { config.image_channels } else { ch / 2 };
            let (k, s, p) = if i < ups { (4, 2, 1) } else { (3, 1, 1) };
            blocks.push(ConvTranspose2d::new(&mut store, &format!("g.up{i}"), ch, out, k, s, p, false, rng));
            ch = out;
        }
        Ok(Self {
            config,
            store,
            fc,
            blocks,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `cond: n × cond_dim`, `noise: n × noise_dim` → images `n × c × s × s`.
    pub fn forward(&self, g: &mut Graph, scope: &mut Scope, cond: Var, noise: Var) -> Result<Var> {
        let (cs, ns) = (g.shape(cond).to_vec(), g.shape(noise).to_vec());
        if cs.len() != 2
            || ns.len() != 2
            || cs[0] != ns[0]
            || cs[1] != self.config.cond_dim
            || ns[1] != self.config.noise_dim
        {
            return Err(TensorError::ShapeMismatch {
                op: "generator input",
                lhs: cs,
                rhs: ns,
            });
        }
        let n = cs[0];
        let input = g.concat(cond, noise, 1)?;
        let h = self.fc.forward(g, scope, input)?;
        let h = g.relu(h)?;
        let mut h = g.reshape(h, &[n, 8 * self.config.width, 4, 4])?;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(g, scope, h)?;
            h = if i + 1 == self.blocks.len() { g.tanh(h)? } else { g.relu(h)? };
        }
        Ok(h)
    }

    /// Batch generation outside any training graph.
    pub fn generate_batch(&self, cond: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut scope = Scope::new(&self.store, false);
        let c = g.constant(cond.clone());
        let z = g.constant(noise.clone());
        let out = self.forward(&mut g, &mut scope, c, z)?;
        Ok(g.value(out).clone())
    }

    /// One image `c × s × s` from a condition vector and a noise vector.
    pub fn generate(&self, cond: &[f64], noise: &[f64]) -> Result<Tensor> {
        if cond.len() + noise.len() != self.config.input_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "generate",
                lhs: vec![cond.len(), noise.len()],
                rhs: vec![self.config.cond_dim, self.config.noise_dim],
            });
        }
        let c = Tensor::new(&[1, cond.len()], cond.to_vec())?;
        let z = Tensor::new(&[1, noise.len()], noise.to_vec())?;
        Ok(self.generate_batch(&c, &z)?.index0(0))
    }
}

/// How the discriminator sees the condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// `ψ(φ) + ⟨P s, φ⟩`.
    Projection,
    /// `ψ(leaky(J [φ; E s]))`, the naive conditional baseline.
    Concat,
    /// `ψ(φ)`; the condition is ignored.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub cond_dim: usize,
    /// Channels of the first block; later blocks use 2×, 4×, 8×.
    pub width: usize,
    pub n_classes: usize,
    pub leaky_slope: f64,
    pub spectral_norm: bool,
    pub conditioning: Conditioning,
    /// Width of the condition embedding in [`Conditioning::Concat`].
    pub concat_embed_dim: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            image_channels: 3,
            cond_dim: 256,
            width: 32,
            n_classes: 9,
            leaky_slope: 0.2,
            spectral_norm: true,
            conditioning: Conditioning::Projection,
            concat_embed_dim: 32,
        }
    }
}

impl DiscriminatorConfig {
    pub fn feat_dim(&self) -> usize {
        8 * self.width
    }
}

#[derive(Debug, Clone)]
enum CondHead {
    Projection(Linear),
    Concat { embed: Linear, joint: Linear },
    None,
}

/// Graph nodes produced by one discriminator pass.
#[derive(Debug, Clone, Copy)]
pub struct DiscOutput {
    /// Per-example score, shape `n`.
    pub score: Var,
    /// Pooled trunk features φ(x), shape `n × feat_dim`.
    pub features: Var,
}

/// Four strided convolutions with leaky ReLU, global sum pooling, a scalar
/// head ψ, a conditioning head, and an auxiliary classifier on the same
/// pooled features.
#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    store: ParamStore,
    convs: Vec<Conv2d>,
    psi: Linear,
    cond: CondHead,
    aux: Linear,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        let downs = resampling_blocks(config.image_size)?;
        let sn = config.spectral_norm;
        let mut store = ParamStore::new();
        let mut convs = Vec::with_capacity(BLOCKS);
        let mut ch = config.image_channels;
        for i in 0..BLOCKS {
            let out = config.width << i;
            let (k, s, p) = if i < downs { (4, 2, 1) } else { (3, 1, 1) };
            convs.push(Conv2d::new(&mut store, &format!("d.conv{i}"), ch, out, k, s, p, sn, rng));
            ch = out;
        }
        let feat = config.feat_dim();
        let psi = Linear::new(&mut store, "d.psi", feat, 1, true, sn, rng);
        let cond = match config.conditioning {
            Conditioning::Projection => {
                CondHead::Projection(Linear::new(&mut store, "d.proj", config.cond_dim, feat, false, sn, rng))
            }
            Conditioning::Concat => CondHead::Concat {
                embed: Linear::new(&mut store, "d.embed", config.cond_dim, config.concat_embed_dim, true, sn, rng),
                joint: Linear::new(&mut store, "d.joint", feat + config.concat_embed_dim, feat, true, sn, rng),
            },
            Conditioning::None => CondHead::None,
        };
        let aux = Linear::new(&mut store, "d.aux", feat, config.n_classes, true, sn, rng);
        Ok(Self {
            config,
            store,
            convs,
            psi,
            cond,
            aux,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn psi(&self) -> &Linear {
        &self.psi
    }

    pub fn aux_head(&self) -> &Linear {
        &self.aux
    }

    pub fn projection(&self) -> Option<&Linear> {
        match &self.cond {
            CondHead::Projection(p) => Some(p),
            _ => None,
        }
    }

    pub fn convs(&self) -> &[Conv2d] {
        &self.convs
    }

    /// One power-iteration step for every normalized layer. Called once per
    /// discriminator update; forward passes never touch the stored vectors.
    pub fn refresh_spectral(&mut self) {
        let store = &mut self.store;
        for c in &self.convs {
            c.refresh_spectral(store);
        }
        self.psi.refresh_spectral(store);
        self.aux.refresh_spectral(store);
        match &self.cond {
            CondHead::Projection(p) => p.refresh_spectral(store),
            CondHead::Concat { embed, joint } => {
                embed.refresh_spectral(store);
                joint.refresh_spectral(store);
            }
            CondHead::None => {}
        }
    }

    /// Global-sum-pooled activations of the last convolution block.
    pub fn trunk(&self, g: &mut Graph, scope: &mut Scope, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.image_channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(TensorError::ShapeMismatch {
                op: "discriminator input",
                lhs: s,
                rhs: vec![0, c.image_channels, c.image_size, c.image_size],
            });
        }
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, scope, h)?;
            h = g.leaky_relu(h, c.leaky_slope)?;
        }
        let hs = g.shape(h).to_vec();
        let flat = g.reshape(h, &[hs[0], hs[1], hs[2] * hs[3]])?;
        g.sum_axis(flat, 2)
    }

    /// Score of each `(image, condition)` pair.
    pub fn forward(&self, g: &mut Graph, scope: &mut Scope, x: Var, cond: Var) -> Result<DiscOutput> {
        let features = self.trunk(g, scope, x)?;
        let n = g.shape(features)[0];
        let cs = g.shape(cond).to_vec();
        if cs != [n, self.config.cond_dim] {
            return Err(TensorError::ShapeMismatch {
                op: "discriminator condition",
                lhs: cs,
                rhs: vec![n, self.config.cond_dim],
            });
        }
        let score = match &self.cond {
            CondHead::Projection(proj) => {
                let uncond = self.psi.forward(g, scope, features)?;
                let uncond = g.reshape(uncond, &[n])?;
                let projected = proj.forward(g, scope, cond)?;
                let prod = g.mul(projected, features)?;
                let similarity = g.sum_axis(prod, 1)?;
                g.add(uncond, similarity)?
            }
            CondHead::Concat { embed, joint } => {
                let e = embed.forward(g, scope, cond)?;
                let e = g.leaky_relu(e, self.config.leaky_slope)?;
                let cat = g.concat(features, e, 1)?;
                let h = joint.forward(g, scope, cat)?;
                let h = g.leaky_relu(h, self.config.leaky_slope)?;
                let s = self.psi.forward(g, scope, h)?;
                g.reshape(s, &[n])?
            }
            CondHead::None => {
                let s = self.psi.forward(g, scope, features)?;
                g.reshape(s, &[n])?
            }
        };
        Ok(DiscOutput { score, features })
    }

    /// Auxiliary-classifier log-probabilities `n × n_classes` from pooled
    /// trunk features.
    pub fn class_log_probs(&self, g: &mut Graph, scope: &mut Scope, features: Var) -> Result<Var> {
        let logits = self.aux.forward(g, scope, features)?;
        g.log_softmax(logits, 1)
    }

    pub fn feature_trunk(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut scope = Scope::new(&self.store, false);
        let xv = g.constant(x.clone());
        let f = self.trunk(&mut g, &mut scope, xv)?;
        Ok(g.value(f).clone())
    }

    pub fn discriminate(&self, x: &Tensor, cond: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut scope = Scope::new(&self.store, false);
        let xv = g.constant(x.clone());
        let cv = g.constant(cond.clone());
        let out = self.forward(&mut g, &mut scope, xv, cv)?;
        Ok(g.value(out.score).data().to_vec())
    }

    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut scope = Scope::new(&self.store, false);
        let xv = g.constant(x.clone());
        let f = self.trunk(&mut g, &mut scope, xv)?;
        let lp = self.class_log_probs(&mut g, &mut scope, f)?;
        Ok(g.value(lp).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn class_table_is_bijective() {
        let t = ClassTable::default();
        assert_eq!(t.len(), 9);
        for (i, n) in t.names().iter().enumerate() {
            assert_eq!(t.id(n), Some(ClassId(i)));
            assert_eq!(t.name(ClassId(i)), Some(n.as_str()));
        }
        assert!(ClassTable::new(vec!["a".into(), "a".into()]).is_err());
        assert!(ClassTable::first(10).is_err());
    }

    #[test]
    fn image_sizes() {
        assert_eq!(resampling_blocks(64).unwrap(), 4);
        assert_eq!(resampling_blocks(32).unwrap(), 3);
        assert_eq!(resampling_blocks(4).unwrap(), 0);
        assert!(resampling_blocks(48).is_err());
        assert!(resampling_blocks(128).is_err());
    }

    #[test]
    fn generator_rejects_wrong_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = GeneratorConfig {
            image_size: 8,
            cond_dim: 4,
            noise_dim: 2,
            width: 2,
            ..Default::default()
        };
        let g = Generator::new(cfg, &mut rng).unwrap();
        assert!(g.generate(&[0.0; 4], &[0.0; 3]).is_err());
        assert_eq!(g.generate(&[0.0; 4], &[0.0; 2]).unwrap().shape(), &[3, 8, 8]);
    }
}
