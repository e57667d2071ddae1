//! Parameter storage, linear/convolutional layers, and spectral
//! normalization by power iteration.

use rand::Rng;

use crate::tensor::{Gradients, Graph, Result, Tensor, Var};

/// Standard deviation of the normal weight initializer.
pub const INIT_STD: f64 = 0.02;
/// Smallest spectral-norm estimate that is still divided out.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named tensors owned by one network: trainable weights plus persistent
/// buffers such as power-iteration vectors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Rounds every tensor to `f32` storage precision.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            e.value.round_to_f32();
        }
    }
}

/// Per-graph view of a [`ParamStore`]: each parameter becomes a graph node
/// the first time a layer asks for it.
pub struct Scope<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Scope<'a> {
    /// `trainable == false` binds parameters as constants, so no gradient
    /// flows into them (used for the frozen network of an update step).
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            trainable,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable && self.store.is_trainable(id) {
            g.leaf(value)
        } else {
            g.constant(value)
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients for every trainable parameter, in [`ParamStore::trainable_ids`]
    /// order; parameters the loss never touched get exact zeros.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                self.vars[id.0]
                    .and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()))
            })
            .collect()
    }
}

/// Result of one power-iteration step on a weight matrix.
#[derive(Debug, Clone)]
pub struct PowerStep {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub sigma: f64,
}

/// Rows/columns of the matrix view of a weight: the leading axis against
/// everything else (`out × in·kh·kw` for convolution kernels).
pub fn matrix_dims(w: &Tensor) -> (usize, usize) {
    let rows = w.shape()[0];
    (rows, w.len() / rows)
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

fn mat_vec(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    w.chunks(cols).take(rows).map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn mat_t_vec(w: &[f64], cols: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, &ur) in w.chunks(cols).zip(u) {
        for (o, &a) in out.iter_mut().zip(r) {
            *o += a * ur;
        }
    }
    out
}

/// `v' = normalize(Wᵀu)`, `u' = normalize(W v')`, `σ̂ = u'ᵀ W v'`.
///
/// A zero matrix yields `σ̂ = 0` and leaves `u` unchanged.
pub fn power_iteration_step(w: &Tensor, u: &[f64]) -> PowerStep {
    let (rows, cols) = matrix_dims(w);
    assert_eq!(u.len(), rows, "power iteration vector has the wrong length");
    let mut v = mat_t_vec(w.data(), cols, u);
    if normalize(&mut v) == 0.0 {
        return PowerStep {
            u: u.to_vec(),
            v,
            sigma: 0.0,
        };
    }
    let mut u_next = mat_vec(w.data(), rows, cols, &v);
    let norm = normalize(&mut u_next);
    if norm == 0.0 {
        return PowerStep {
            u: u.to_vec(),
            v,
            sigma: 0.0,
        };
    }
    // u'ᵀWv' equals ‖Wv'‖ since u' is its direction
    PowerStep {
        u: u_next,
        v,
        sigma: norm,
    }
}

/// Spectral-norm estimate from a stored left vector without changing it:
/// the `σ̂` one more power step would report.
pub fn sigma_estimate(w: &Tensor, u: &[f64]) -> f64 {
    power_iteration_step(w, u).sigma
}

/// Random unit vector for initializing power iteration.
pub fn random_unit<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut u = Tensor::randn(&[n], 1.0, rng).into_data();
        if normalize(&mut u) > 0.0 {
            return u;
        }
    }
}

/// One power-iteration step on `u` followed by division by the resulting
/// estimate. A zero weight is returned unscaled, with a warning.
pub fn spectrally_normalized_weight(w: &Tensor, u: &mut Vec<f64>) -> Tensor {
    *u = power_iteration_step(w, u).u;
    let sigma = sigma_estimate(w, u);
    if sigma < SIGMA_FLOOR {
        log::warn!("spectral norm of a zero weight; leaving it unnormalized");
        return w.clone();
    }
    w.map(|x| x / sigma)
}

/// Weight handle with optional spectral normalization.
#[derive(Debug, Clone)]
pub struct WeightRef {
    pub weight: ParamId,
    /// Persistent left singular vector estimate, present iff normalized.
    pub sn_u: Option<ParamId>,
}

impl WeightRef {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        shape: &[usize],
        spectral: bool,
        rng: &mut R,
    ) -> Self {
        let w = Tensor::randn(shape, INIT_STD, rng);
        let rows = shape[0];
        let weight = store.add(format!("{name}.weight"), w, true);
        let sn_u = spectral.then(|| {
            let u = Tensor::from_vec(random_unit(rows, rng));
            store.add(format!("{name}.sn_u"), u, false)
        });
        Self { weight, sn_u }
    }

    pub fn is_normalized(&self) -> bool {
        self.sn_u.is_some()
    }

    /// Current divisor applied to the weight (1 when not normalized).
    pub fn sigma(&self, store: &ParamStore) -> f64 {
        match self.sn_u {
            None => 1.0,
            Some(u) => {
                let s = sigma_estimate(store.get(self.weight), store.get(u).data());
                if s < SIGMA_FLOOR {
                    log::warn!("spectral norm of {} is zero; leaving it unnormalized", store.name(self.weight));
                    1.0
                } else {
                    s
                }
            }
        }
    }

    /// Graph node for the effective weight. `σ̂` is a constant of the graph:
    /// no gradient flows through the power iteration.
    pub fn var(&self, g: &mut Graph, scope: &mut Scope) -> Result<Var> {
        let w = scope.var(g, self.weight);
        if self.sn_u.is_none() {
            return Ok(w);
        }
        let sigma = self.sigma(scope.store());
        if sigma == 1.0 {
            return Ok(w);
        }
        g.scale(w, 1.0 / sigma)
    }

    /// Advances the stored power-iteration vector by one step.
    pub fn refresh(&self, store: &mut ParamStore) {
        if let Some(u) = self.sn_u {
            let step = power_iteration_step(store.get(self.weight), store.get(u).data());
            store.get_mut(u).data_mut().copy_from_slice(&step.u);
        }
    }

    /// Effective weight as a plain tensor.
    pub fn effective(&self, store: &ParamStore) -> Tensor {
        let sigma = self.sigma(store);
        store.get(self.weight).map(|x| x / sigma)
    }
}

fn bias(store: &mut ParamStore, name: &str, n: usize, with: bool) -> Option<ParamId> {
    with.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[n]), true))
}

/// `y = x·W + b` with `W: in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: WeightRef,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        spectral: bool,
        rng: &mut R,
    ) -> Self {
        let w = WeightRef::new(store, name, &[in_dim, out_dim], spectral, rng);
        let bias = bias(store, name, out_dim, with_bias);
        Self {
            w,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, scope: &mut Scope, x: Var) -> Result<Var> {
        let w = self.w.var(g, scope)?;
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let bv = scope.var(g, b);
                g.add_row_bias(y, bv)
            }
            None => Ok(y),
        }
    }

    pub fn refresh_spectral(&self, store: &mut ParamStore) {
        self.w.refresh(store);
    }
}

/// Strided convolution with an `out × in × k × k` kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: WeightRef,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        spectral: bool,
        rng: &mut R,
    ) -> Self {
        let w = WeightRef::new(store, name, &[out_ch, in_ch, kernel, kernel], spectral, rng);
        let bias = bias(store, name, out_ch, true);
        Self {
            w,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, scope: &mut Scope, x: Var) -> Result<Var> {
        let w = self.w.var(g, scope)?;
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        match self.bias {
            Some(b) => {
                let bv = scope.var(g, b);
                g.add_channel_bias(y, bv)
            }
            None => Ok(y),
        }
    }

    pub fn refresh_spectral(&self, store: &mut ParamStore) {
        self.w.refresh(store);
    }
}

/// Transposed convolution with an `in × out × k × k` kernel.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: WeightRef,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        spectral: bool,
        rng: &mut R,
    ) -> Self {
        let w = WeightRef::new(store, name, &[in_ch, out_ch, kernel, kernel], spectral, rng);
        let bias = bias(store, name, out_ch, true);
        Self {
            w,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, scope: &mut Scope, x: Var) -> Result<Var> {
        let w = self.w.var(g, scope)?;
        let y = g.conv2d_transposed(x, w, self.stride, self.pad)?;
        match self.bias {
            Some(b) => {
                let bv = scope.var(g, b);
                g.add_channel_bias(y, bv)
            }
            None => Ok(y),
        }
    }

    pub fn refresh_spectral(&self, store: &mut ParamStore) {
        self.w.refresh(store);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_has_unit_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 5] = 1.0;
        }
        for _ in 0..5 {
            let u = random_unit(4, &mut rng);
            let step = power_iteration_step(&eye, &u);
            assert!((step.sigma - 1.0).abs() < 1e-12);
            let n: f64 = step.u.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_spectrum_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::new(&[2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let mut u = random_unit(2, &mut rng);
        let mut sigma = 0.0;
        for _ in 0..20 {
            let s = power_iteration_step(&w, &u);
            u = s.u;
            sigma = s.sigma;
        }
        assert!((sigma - 3.0).abs() < 1e-6);
    }

    #[test]
    fn zero_matrix_is_left_unnormalized() {
        let w = Tensor::zeros(&[3, 2]);
        let mut u = vec![1.0, 0.0, 0.0];
        let s = power_iteration_step(&w, &u);
        assert_eq!(s.sigma, 0.0);
        assert_eq!(s.u, u);
        assert_eq!(spectrally_normalized_weight(&w, &mut u), w);
    }

    #[test]
    fn scope_binds_each_parameter_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "fc", 3, 2, true, false, &mut rng);
        let mut g = Graph::new();
        let mut scope = Scope::new(&store, true);
        let x = g.constant(Tensor::ones(&[1, 3]));
        let a = lin.forward(&mut g, &mut scope, x).unwrap();
        let b = lin.forward(&mut g, &mut scope, x).unwrap();
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        let pg = scope.gradients(&grads);
        assert_eq!(pg.len(), 2);
        // both applications accumulate into the same weight gradient
        assert!(pg[0].data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
        assert_eq!(pg[1].data(), &[2.0, 2.0]);
    }

    #[test]
    fn frozen_scope_yields_no_parameter_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "fc", 3, 2, true, true, &mut rng);
        let mut g = Graph::new();
        let mut scope = Scope::new(&store, false);
        let x = g.leaf(Tensor::ones(&[1, 3]));
        let y = lin.forward(&mut g, &mut scope, x).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_some());
        assert!(scope.gradients(&grads).iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[1]), true);
        let r = std::panic::catch_unwind(move || {
            store.add("a", Tensor::zeros(&[1]), true);
        });
        assert!(r.is_err());
    }
}
