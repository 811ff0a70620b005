//! Dense layer over token matrices.

use super::{Grads, Init, ParamId, ParamStore};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

/// `y = x W + b` with `x: (n, din)`, `W: (din, dout)`, `b: (dout)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
    ) -> Self {
        let w = store.add(format!("{name}.w"), super::init_tensor(rng, &[din, dout], init, din));
        let b = store.add(format!("{name}.b"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[dout])));
        Linear { w, b, din, dout }
    }

    pub fn forward(&self, x: &Array2<f64>, store: &ParamStore) -> Array2<f64> {
        debug_assert_eq!(x.ncols(), self.din);
        let mut y = x.dot(&store.p2(self.w));
        y += &store.p1(self.b);
        y
    }

    /// `x` is the forward input; returns `dx` and accumulates `dW`, `db`.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        store: &ParamStore,
        grads: &mut Grads,
    ) -> Array2<f64> {
        grads.add2(self.w, &x.t().dot(dy));
        grads.add1(self.b, &dy.sum_axis(Axis(0)));
        dy.dot(&store.p2(self.w).t())
    }
}

/// Convenience for layers with a single bias-like vector parameter.
pub fn bias_param(store: &mut ParamStore, name: &str, dim: usize) -> ParamId {
    store.add(name, ndarray::ArrayD::zeros(ndarray::IxDyn(&[dim])))
}

/// Gradient of a bias added per-row: column sums of `dy`.
pub fn bias_backward(dy: &Array2<f64>) -> Array1<f64> {
    dy.sum_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::{central_diff, grad_close};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn forward_matches_hand_computation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, &mut rng, "l", 2, 3, Init::Lecun);
        let x = Array2::from_shape_vec((1, 2), vec![1.0, -2.0]).unwrap();
        let y = lin.forward(&x, &store);
        let w = store.p2(lin.w);
        for j in 0..3 {
            let want = 1.0 * w[[0, j]] - 2.0 * w[[1, j]];
            assert!((y[[0, j]] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let lin = Linear::new(&mut store, &mut rng, "l", 4, 3, Init::Lecun);
        let x = Array2::from_shape_simple_fn((5, 4), || rng.random::<f64>() - 0.5);
        let proj = Array2::from_shape_simple_fn((5, 3), || rng.random::<f64>() - 0.5);

        // loss = sum(proj * y)
        let mut loss = |s: &ParamStore| (&lin.forward(&x, s) * &proj).sum();
        let mut grads = Grads::zeros(&store);
        let dx = lin.backward(&x, &proj, &store, &mut grads);

        for (id, count) in [(lin.w, 12), (lin.b, 3)] {
            for flat in 0..count {
                let num = central_diff(&mut store, id, flat, 1e-6, &mut loss);
                let ana = grads.get(id).as_slice().unwrap()[flat];
                assert!(grad_close(ana, num, 1e-6), "param {flat}: {ana} vs {num}");
            }
        }
        // dx check via perturbing x directly
        let mut x2 = x.clone();
        let h = 1e-6;
        x2[[2, 1]] += h;
        let up = (&lin.forward(&x2, &store) * &proj).sum();
        x2[[2, 1]] -= 2.0 * h;
        let down = (&lin.forward(&x2, &store) * &proj).sum();
        let num_dx = (up - down) / (2.0 * h);
        assert!(grad_close(dx[[2, 1]], num_dx, 1e-6));
    }
}
