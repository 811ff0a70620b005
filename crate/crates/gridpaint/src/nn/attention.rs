//! Single-head scaled dot-product attention, self and cross variants.

use super::ops::{softmax_backward, softmax_rows};
use super::{Grads, Init, ParamId, ParamStore};
use ndarray::{Array2, Axis};
use rand::Rng;

/// Attention of a token sequence over itself: `x (L, D) -> (L, D)`.
/// Projections are bias-free; only the output projection has a bias.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub d: usize,
}

pub struct SelfAttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    av: Array2<f64>,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize) -> Self {
        let wq = store.add(format!("{name}.wq"), super::init_tensor(rng, &[d, d], Init::Lecun, d));
        let wk = store.add(format!("{name}.wk"), super::init_tensor(rng, &[d, d], Init::Lecun, d));
        let wv = store.add(format!("{name}.wv"), super::init_tensor(rng, &[d, d], Init::Lecun, d));
        let wo = store.add(format!("{name}.wo"), super::init_tensor(rng, &[d, d], Init::Lecun, d));
        let bo = store.add(format!("{name}.bo"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[d])));
        SelfAttention { wq, wk, wv, wo, bo, d }
    }

    pub fn forward(&self, x: &Array2<f64>, store: &ParamStore) -> (Array2<f64>, SelfAttnCache) {
        let q = x.dot(&store.p2(self.wq));
        let k = x.dot(&store.p2(self.wk));
        let v = x.dot(&store.p2(self.wv));
        let scale = 1.0 / (self.d as f64).sqrt();
        let attn = softmax_rows(&(q.dot(&k.t()) * scale));
        let av = attn.dot(&v);
        let mut y = av.dot(&store.p2(self.wo));
        y += &store.p1(self.bo);
        (y, SelfAttnCache { q, k, v, attn, av })
    }

    pub fn backward(
        &self,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        cache: &SelfAttnCache,
        store: &ParamStore,
        grads: &mut Grads,
    ) -> Array2<f64> {
        let scale = 1.0 / (self.d as f64).sqrt();
        grads.add2(self.wo, &cache.av.t().dot(dy));
        grads.add1(self.bo, &dy.sum_axis(Axis(0)));
        let dav = dy.dot(&store.p2(self.wo).t());

        let dattn = dav.dot(&cache.v.t());
        let dv = cache.attn.t().dot(&dav);
        let dscores = softmax_backward(&cache.attn, &dattn);
        let dq = dscores.dot(&cache.k) * scale;
        let dk = dscores.t().dot(&cache.q) * scale;

        grads.add2(self.wq, &x.t().dot(&dq));
        grads.add2(self.wk, &x.t().dot(&dk));
        grads.add2(self.wv, &x.t().dot(&dv));

        let mut dx = dq.dot(&store.p2(self.wq).t());
        dx += &dk.dot(&store.p2(self.wk).t());
        dx += &dv.dot(&store.p2(self.wv).t());
        dx
    }
}

/// Attention of `x (L, D)` over a context sequence `(Lc, Dc)`. The output
/// projection starts at zero so a freshly added cross-attention block leaves
/// its residual stream untouched.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub d: usize,
    pub d_ctx: usize,
}

pub struct CrossAttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    av: Array2<f64>,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        d_ctx: usize,
    ) -> Self {
        let wq = store.add(
            format!("{name}.wq"),
            super::init_tensor(rng, &[d, d], Init::Lecun, d),
        );
        let wk = store.add(
            format!("{name}.wk"),
            super::init_tensor(rng, &[d_ctx, d], Init::Lecun, d_ctx),
        );
        let wv = store.add(
            format!("{name}.wv"),
            super::init_tensor(rng, &[d_ctx, d], Init::Lecun, d_ctx),
        );
        let wo = store.add(
            format!("{name}.wo"),
            super::init_tensor(rng, &[d, d], Init::Zeros, d),
        );
        let bo = store.add(format!("{name}.bo"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[d])));
        CrossAttention { wq, wk, wv, wo, bo, d, d_ctx }
    }

    pub fn forward(
        &self,
        x: &Array2<f64>,
        ctx: &Array2<f64>,
        store: &ParamStore,
    ) -> (Array2<f64>, CrossAttnCache) {
        debug_assert_eq!(ctx.ncols(), self.d_ctx);
        let q = x.dot(&store.p2(self.wq));
        let k = ctx.dot(&store.p2(self.wk));
        let v = ctx.dot(&store.p2(self.wv));
        let scale = 1.0 / (self.d as f64).sqrt();
        let attn = softmax_rows(&(q.dot(&k.t()) * scale));
        let av = attn.dot(&v);
        let mut y = av.dot(&store.p2(self.wo));
        y += &store.p1(self.bo);
        (y, CrossAttnCache { q, k, v, attn, av })
    }

    /// Returns `(dx, dctx)`.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        ctx: &Array2<f64>,
        dy: &Array2<f64>,
        cache: &CrossAttnCache,
        store: &ParamStore,
        grads: &mut Grads,
    ) -> (Array2<f64>, Array2<f64>) {
        let scale = 1.0 / (self.d as f64).sqrt();
        grads.add2(self.wo, &cache.av.t().dot(dy));
        grads.add1(self.bo, &dy.sum_axis(Axis(0)));
        let dav = dy.dot(&store.p2(self.wo).t());

        let dattn = dav.dot(&cache.v.t());
        let dv = cache.attn.t().dot(&dav);
        let dscores = softmax_backward(&cache.attn, &dattn);
        let dq = dscores.dot(&cache.k) * scale;
        let dk = dscores.t().dot(&cache.q) * scale;

        grads.add2(self.wq, &x.t().dot(&dq));
        grads.add2(self.wk, &ctx.t().dot(&dk));
        grads.add2(self.wv, &ctx.t().dot(&dv));

        let dx = dq.dot(&store.p2(self.wq).t());
        let mut dctx = dk.dot(&store.p2(self.wk).t());
        dctx += &dv.dot(&store.p2(self.wv).t());
        (dx, dctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::{central_diff, grad_close};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn self_attention_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let attn = SelfAttention::new(&mut store, &mut rng, "sa", 4);
        let x = Array2::from_shape_simple_fn((6, 4), || rng.random::<f64>() - 0.5);
        let proj = Array2::from_shape_simple_fn((6, 4), || rng.random::<f64>() - 0.5);

        let (_, cache) = attn.forward(&x, &store);
        let mut grads = Grads::zeros(&store);
        let dx = attn.backward(&x, &proj, &cache, &store, &mut grads);

        let mut loss = |s: &ParamStore| (&attn.forward(&x, s).0 * &proj).sum();
        for id in [attn.wq, attn.wk, attn.wv, attn.wo] {
            for flat in 0..16 {
                let num = central_diff(&mut store, id, flat, 1e-6, &mut loss);
                let ana = grads.get(id).as_slice().unwrap()[flat];
                assert!(
                    grad_close(ana, num, 1e-5),
                    "{} [{flat}]: {ana} vs {num}",
                    store.name(id)
                );
            }
        }
        let h = 1e-6;
        for &(r, c) in &[(0usize, 0usize), (3, 2), (5, 3)] {
            let mut x2 = x.clone();
            x2[[r, c]] += h;
            let up = (&attn.forward(&x2, &store).0 * &proj).sum();
            x2[[r, c]] -= 2.0 * h;
            let down = (&attn.forward(&x2, &store).0 * &proj).sum();
            assert!(grad_close(dx[[r, c]], (up - down) / (2.0 * h), 1e-5));
        }
    }

    #[test]
    fn cross_attention_output_is_zero_at_init() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let attn = CrossAttention::new(&mut store, &mut rng, "ca", 4, 3);
        let x = Array2::from_shape_simple_fn((5, 4), || rng.random::<f64>() - 0.5);
        let ctx = Array2::from_shape_simple_fn((7, 3), || rng.random::<f64>() - 0.5);
        let (y, _) = attn.forward(&x, &ctx, &store);
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cross_attention_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let attn = CrossAttention::new(&mut store, &mut rng, "ca", 4, 3);
        // move the zero-initialised output projection off zero, otherwise
        // most gradients vanish and the check is trivial
        store.val_mut(attn.wo).mapv_inplace(|_| rng.random::<f64>() - 0.5);
        let x = Array2::from_shape_simple_fn((5, 4), || rng.random::<f64>() - 0.5);
        let ctx = Array2::from_shape_simple_fn((7, 3), || rng.random::<f64>() - 0.5);
        let proj = Array2::from_shape_simple_fn((5, 4), || rng.random::<f64>() - 0.5);

        let (_, cache) = attn.forward(&x, &ctx, &store);
        let mut grads = Grads::zeros(&store);
        let (dx, dctx) = attn.backward(&x, &ctx, &proj, &cache, &store, &mut grads);

        let mut loss = |s: &ParamStore| (&attn.forward(&x, &ctx, s).0 * &proj).sum();
        for id in [attn.wq, attn.wk, attn.wv, attn.wo] {
            let n = store.val(id).len();
            for flat in 0..n {
                let num = central_diff(&mut store, id, flat, 1e-6, &mut loss);
                let ana = grads.get(id).as_slice().unwrap()[flat];
                assert!(grad_close(ana, num, 1e-5), "{} [{flat}]", store.name(id));
            }
        }
        let h = 1e-6;
        // dx and dctx at a few positions
        for &(r, c) in &[(0usize, 1usize), (4, 3)] {
            let mut x2 = x.clone();
            x2[[r, c]] += h;
            let up = (&attn.forward(&x2, &ctx, &store).0 * &proj).sum();
            x2[[r, c]] -= 2.0 * h;
            let down = (&attn.forward(&x2, &ctx, &store).0 * &proj).sum();
            assert!(grad_close(dx[[r, c]], (up - down) / (2.0 * h), 1e-5));
        }
        for &(r, c) in &[(0usize, 0usize), (6, 2)] {
            let mut c2 = ctx.clone();
            c2[[r, c]] += h;
            let up = (&attn.forward(&x, &c2, &store).0 * &proj).sum();
            c2[[r, c]] -= 2.0 * h;
            let down = (&attn.forward(&x, &c2, &store).0 * &proj).sum();
            assert!(grad_close(dctx[[r, c]], (up - down) / (2.0 * h), 1e-5));
        }
    }
}
