//! Minimal neural-network toolkit on `ndarray`, f64 end to end.
//!
//! Parameters live in a flat [`ParamStore`]; layers hold [`ParamId`] handles
//! plus hyperparameters and implement explicit `forward` (returning a cache
//! of whatever backward needs) and `backward` (accumulating into [`Grads`]
//! and returning the input gradient). There is no autodiff: every backward
//! pass is written out and unit-tested against central finite differences.
//!
//! Feature maps use a tokens-first layout: a [`FeatMap`] stores an `(h*w, c)`
//! matrix plus its spatial extent, so convolutions (im2col + GEMM) and
//! attention (already token-shaped) share one representation.

pub mod attention;
pub mod check;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod ops;

pub use attention::{CrossAttention, SelfAttention};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{GroupNorm, LayerNorm};

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, IxDyn};
use rand::Rng;
use rand_distr::Normal;
use std::collections::BTreeMap;

/// Handle to one named parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered collection of named parameter tensors.
#[derive(Debug, Clone)]
pub struct ParamStore {
    values: Vec<ArrayD<f64>>,
    names: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { values: Vec::new(), names: Vec::new(), index: BTreeMap::new() }
    }

    /// Register a tensor under a unique name. Panics on duplicates: layer
    /// construction is static, so a clash is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id.0);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|i| ParamId(*i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn val(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn val_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    /// View a parameter as a matrix (panics if it is not 2-d).
    pub fn p2(&self, id: ParamId) -> ArrayView2<'_, f64> {
        self.values[id.0].view().into_dimensionality().unwrap()
    }

    /// View a parameter as a vector (panics if it is not 1-d).
    pub fn p1(&self, id: ParamId) -> ArrayView1<'_, f64> {
        self.values[id.0].view().into_dimensionality().unwrap()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    g: Vec<ArrayD<f64>>,
}

impl Grads {
    pub fn zeros(store: &ParamStore) -> Self {
        Grads { g: store.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.g[id.0]
    }

    pub fn add2(&mut self, id: ParamId, delta: &Array2<f64>) {
        let mut view = self.g[id.0]
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        view += delta;
    }

    pub fn add1(&mut self, id: ParamId, delta: &Array1<f64>) {
        let mut view = self.g[id.0]
            .view_mut()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        view += delta;
    }

    pub fn add_dyn(&mut self, id: ParamId, delta: &ArrayD<f64>) {
        self.g[id.0] += delta;
    }

    /// Elementwise sum with another accumulator (index-aligned).
    pub fn accumulate(&mut self, other: &Grads) {
        assert_eq!(self.g.len(), other.g.len());
        for (a, b) in self.g.iter_mut().zip(&other.g) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.g.iter_mut() {
            a.mapv_inplace(|v| v * s);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.g
            .iter()
            .map(|a| a.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.g.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Max absolute gradient over a set of parameters (0 for empty sets).
    pub fn max_abs_over(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .flat_map(|id| self.g[id.0].iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal with std `1/sqrt(fan_in)`.
    Lecun,
    /// All zeros (output projections that must start as identity-residual).
    Zeros,
    /// Normal with an explicit std.
    Normal(f64),
}

pub fn init_tensor(rng: &mut impl Rng, shape: &[usize], init: Init, fan_in: usize) -> ArrayD<f64> {
    match init {
        Init::Zeros => ArrayD::zeros(IxDyn(shape)),
        Init::Lecun => {
            let std = 1.0 / (fan_in.max(1) as f64).sqrt();
            sample_normal(rng, shape, std)
        }
        Init::Normal(std) => sample_normal(rng, shape, std),
    }
}

fn sample_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.sample(dist))
}

/// Spatial feature map in tokens-first layout: row `y*w + x` holds the
/// channel vector of pixel `(y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatMap {
    pub data: Array2<f64>,
    pub h: usize,
    pub w: usize,
}

impl FeatMap {
    pub fn new(data: Array2<f64>, h: usize, w: usize) -> Self {
        assert_eq!(data.nrows(), h * w, "token count must equal h*w");
        FeatMap { data, h, w }
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        FeatMap { data: Array2::zeros((h * w, c)), h, w }
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    /// From an `(h, w, c)` image array.
    pub fn from_image(image: &ndarray::Array3<f64>) -> Self {
        let (h, w, c) = image.dim();
        let flat: Vec<f64> = image.iter().copied().collect();
        FeatMap { data: Array2::from_shape_vec((h * w, c), flat).unwrap(), h, w }
    }

    /// Back to an `(h, w, c)` image array.
    pub fn to_image(&self) -> ndarray::Array3<f64> {
        let c = self.channels();
        ndarray::Array3::from_shape_vec(
            (self.h, self.w, c),
            self.data.iter().copied().collect(),
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn store_round_trips_names_and_values() {
        let mut store = ParamStore::new();
        let a = store.add("block.w", ArrayD::zeros(IxDyn(&[2, 3])));
        let b = store.add("block.b", ArrayD::zeros(IxDyn(&[3])));
        assert_eq!(store.len(), 2);
        assert_eq!(store.scalar_count(), 9);
        assert_eq!(store.name(a), "block.w");
        assert_eq!(store.id_by_name("block.b"), Some(b));
        assert_eq!(store.p2(a).dim(), (2, 3));
        assert_eq!(store.p1(b).len(), 3);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut store = ParamStore::new();
        store.add("w", ArrayD::zeros(IxDyn(&[1])));
        store.add("w", ArrayD::zeros(IxDyn(&[1])));
    }

    #[test]
    fn grads_accumulate_and_norm() {
        let mut store = ParamStore::new();
        let a = store.add("w", ArrayD::zeros(IxDyn(&[2, 2])));
        let mut g1 = Grads::zeros(&store);
        g1.add2(a, &Array2::from_elem((2, 2), 1.0));
        let mut g2 = Grads::zeros(&store);
        g2.add2(a, &Array2::from_elem((2, 2), 2.0));
        g1.accumulate(&g2);
        assert_eq!(g1.get(a).iter().copied().sum::<f64>(), 12.0);
        assert!((g1.l2_norm() - (4.0 * 9.0f64).sqrt()).abs() < 1e-12);
        g1.scale(0.5);
        assert_eq!(g1.get(a)[[0, 0]], 1.5);
    }

    #[test]
    fn lecun_init_has_expected_scale() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
        let t = init_tensor(&mut rng, &[100, 100], Init::Lecun, 100);
        let var = t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        assert!((var - 0.01).abs() < 0.002, "var {var}");
        let z = init_tensor(&mut rng, &[4, 4], Init::Zeros, 4);
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn featmap_image_round_trip() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
        let img = ndarray::Array3::from_shape_simple_fn((3, 4, 3), || {
            rand::Rng::random::<f64>(&mut rng)
        });
        let fm = FeatMap::from_image(&img);
        assert_eq!(fm.h, 3);
        assert_eq!(fm.w, 4);
        assert_eq!(fm.channels(), 3);
        assert_eq!(fm.to_image(), img);
        // row y*w+x holds pixel (y, x)
        assert_eq!(fm.data[[1 * 4 + 2, 1]], img[[1, 2, 1]]);
    }
}
