//! Group and layer normalisation with learned scale/shift.

use super::{Grads, ParamId, ParamStore};
use ndarray::{Array1, Array2};
use ndarray::s;

const EPS: f64 = 1e-5;

/// Normalises each channel group over all tokens of one sample. Works per
/// call (no batch dimension), so statistics never leak across samples.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub c: usize,
}

pub struct GroupNormCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, groups: usize, c: usize) -> Self {
        assert!(groups >= 1 && c % groups == 0, "groups {groups} must divide channels {c}");
        let gamma = store.add(
            format!("{name}.gamma"),
            ndarray::ArrayD::from_elem(ndarray::IxDyn(&[c]), 1.0),
        );
        let beta = store.add(format!("{name}.beta"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[c])));
        GroupNorm { gamma, beta, groups, c }
    }

    pub fn forward(&self, x: &Array2<f64>, store: &ParamStore) -> (Array2<f64>, GroupNormCache) {
        debug_assert_eq!(x.ncols(), self.c);
        let cg = self.c / self.groups;
        let n = x.nrows();
        let mut xhat = Array2::zeros(x.raw_dim());
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let cols = g * cg..(g + 1) * cg;
            let slab = x.slice(s![.., cols.clone()]);
            let count = (n * cg) as f64;
            let mean = slab.sum() / count;
            let var = slab.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std.push(istd);
            let mut dst = xhat.slice_mut(s![.., cols]);
            dst.assign(&slab);
            dst.mapv_inplace(|v| (v - mean) * istd);
        }
        let gamma = store.p1(self.gamma);
        let beta = store.p1(self.beta);
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            for c in 0..self.c {
                row[c] = row[c] * gamma[c] + beta[c];
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        dy: &Array2<f64>,
        cache: &GroupNormCache,
        store: &ParamStore,
        grads: &mut Grads,
    ) -> Array2<f64> {
        let cg = self.c / self.groups;
        let n = dy.nrows();
        let gamma = store.p1(self.gamma);

        let mut dgamma = Array1::zeros(self.c);
        let mut dbeta = Array1::zeros(self.c);
        for r in 0..n {
            for c in 0..self.c {
                dgamma[c] += dy[[r, c]] * cache.xhat[[r, c]];
                dbeta[c] += dy[[r, c]];
            }
        }
        grads.add1(self.gamma, &dgamma);
        grads.add1(self.beta, &dbeta);

        let mut dx = Array2::zeros(dy.raw_dim());
        for g in 0..self.groups {
            let cols = g * cg..(g + 1) * cg;
            let count = (n * cg) as f64;
            // dxhat, and its group-level statistics
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for r in 0..n {
                for c in cols.clone() {
                    let dxh = dy[[r, c]] * gamma[c];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * cache.xhat[[r, c]];
                }
            }
            let istd = cache.inv_std[g];
            for r in 0..n {
                for c in cols.clone() {
                    let dxh = dy[[r, c]] * gamma[c];
                    dx[[r, c]] = istd
                        * (dxh
                            - sum_dxhat / count
                            - cache.xhat[[r, c]] * sum_dxhat_xhat / count);
                }
            }
        }
        dx
    }
}

/// Per-token normalisation over the channel dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub d: usize,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            ndarray::ArrayD::from_elem(ndarray::IxDyn(&[d]), 1.0),
        );
        let beta = store.add(format!("{name}.beta"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[d])));
        LayerNorm { gamma, beta, d }
    }

    pub fn forward(&self, x: &Array2<f64>, store: &ParamStore) -> (Array2<f64>, LayerNormCache) {
        debug_assert_eq!(x.ncols(), self.d);
        let mut xhat = Array2::zeros(x.raw_dim());
        let mut inv_std = Vec::with_capacity(x.nrows());
        for (r, row) in x.rows().into_iter().enumerate() {
            let mean = row.sum() / self.d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / self.d as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std.push(istd);
            for c in 0..self.d {
                xhat[[r, c]] = (row[c] - mean) * istd;
            }
        }
        let gamma = store.p1(self.gamma);
        let beta = store.p1(self.beta);
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            for c in 0..self.d {
                row[c] = row[c] * gamma[c] + beta[c];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        dy: &Array2<f64>,
        cache: &LayerNormCache,
        store: &ParamStore,
        grads: &mut Grads,
    ) -> Array2<f64> {
        let gamma = store.p1(self.gamma);
        let mut dgamma = Array1::zeros(self.d);
        let mut dbeta = Array1::zeros(self.d);
        let mut dx = Array2::zeros(dy.raw_dim());
        for r in 0..dy.nrows() {
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for c in 0..self.d {
                dgamma[c] += dy[[r, c]] * cache.xhat[[r, c]];
                dbeta[c] += dy[[r, c]];
                let dxh = dy[[r, c]] * gamma[c];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * cache.xhat[[r, c]];
            }
            let istd = cache.inv_std[r];
            let d = self.d as f64;
            for c in 0..self.d {
                let dxh = dy[[r, c]] * gamma[c];
                dx[[r, c]] =
                    istd * (dxh - sum_dxhat / d - cache.xhat[[r, c]] * sum_dxhat_xhat / d);
            }
        }
        grads.add1(self.gamma, &dgamma);
        grads.add1(self.beta, &dbeta);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::{central_diff, grad_close};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn groupnorm_standardises_each_group() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let gn = GroupNorm::new(&mut store, "gn", 2, 6);
        let x = Array2::from_shape_simple_fn((10, 6), || 3.0 * rng.random::<f64>() + 1.0);
        let (y, _) = gn.forward(&x, &store);
        for g in 0..2 {
            let slab = y.slice(s![.., g * 3..(g + 1) * 3]);
            let mean = slab.sum() / 30.0;
            let var = slab.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 30.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    #[should_panic(expected = "must divide")]
    fn groupnorm_rejects_nondividing_groups() {
        let mut store = ParamStore::new();
        GroupNorm::new(&mut store, "gn", 4, 6);
    }

    #[test]
    fn groupnorm_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let gn = GroupNorm::new(&mut store, "gn", 2, 4);
        // disturb gamma/beta so the test is not at the identity point
        store.val_mut(gn.gamma).mapv_inplace(|v| v + 0.3);
        store.val_mut(gn.beta).mapv_inplace(|v| v - 0.1);
        let x = Array2::from_shape_simple_fn((6, 4), || rng.random::<f64>() * 2.0 - 1.0);
        let proj = Array2::from_shape_simple_fn((6, 4), || rng.random::<f64>() - 0.5);

        let (_, cache) = gn.forward(&x, &store);
        let mut grads = Grads::zeros(&store);
        let dx = gn.backward(&proj, &cache, &store, &mut grads);

        let mut loss = |s: &ParamStore| (&gn.forward(&x, s).0 * &proj).sum();
        for id in [gn.gamma, gn.beta] {
            for flat in 0..4 {
                let num = central_diff(&mut store, id, flat, 1e-6, &mut loss);
                let ana = grads.get(id).as_slice().unwrap()[flat];
                assert!(grad_close(ana, num, 1e-5), "{ana} vs {num}");
            }
        }
        let h = 1e-6;
        for &(r, c) in &[(0usize, 0usize), (3, 2), (5, 3)] {
            let mut x2 = x.clone();
            x2[[r, c]] += h;
            let up = (&gn.forward(&x2, &store).0 * &proj).sum();
            x2[[r, c]] -= 2.0 * h;
            let down = (&gn.forward(&x2, &store).0 * &proj).sum();
            assert!(grad_close(dx[[r, c]], (up - down) / (2.0 * h), 1e-5));
        }
    }

    #[test]
    fn layernorm_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 5);
        store.val_mut(ln.gamma).mapv_inplace(|v| v * 1.2);
        let x = Array2::from_shape_simple_fn((4, 5), || rng.random::<f64>() * 2.0 - 1.0);
        let proj = Array2::from_shape_simple_fn((4, 5), || rng.random::<f64>() - 0.5);

        let (_, cache) = ln.forward(&x, &store);
        let mut grads = Grads::zeros(&store);
        let dx = ln.backward(&proj, &cache, &store, &mut grads);

        let mut loss = |s: &ParamStore| (&ln.forward(&x, s).0 * &proj).sum();
        for id in [ln.gamma, ln.beta] {
            for flat in 0..5 {
                let num = central_diff(&mut store, id, flat, 1e-6, &mut loss);
                let ana = grads.get(id).as_slice().unwrap()[flat];
                assert!(grad_close(ana, num, 1e-5));
            }
        }
        let h = 1e-6;
        for &(r, c) in &[(0usize, 0usize), (2, 4)] {
            let mut x2 = x.clone();
            x2[[r, c]] += h;
            let up = (&ln.forward(&x2, &store).0 * &proj).sum();
            x2[[r, c]] -= 2.0 * h;
            let down = (&ln.forward(&x2, &store).0 * &proj).sum();
            assert!(grad_close(dx[[r, c]], (up - down) / (2.0 * h), 1e-5));
        }
    }
}
