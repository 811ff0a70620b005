//! Parameter-free operations: activations, softmax, time embeddings,
//! nearest-neighbour resampling, channel concat/split.

use super::FeatMap;
use ndarray::{concatenate, Array1, Array2, Axis};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `silu(x) = x * sigmoid(x)` — smooth, which keeps finite-difference
/// gradient checks clean.
pub fn silu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v * sigmoid(v))
}

/// `dx` given the forward input and upstream gradient.
pub fn silu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    out.zip_mut_with(dy, |v, g| {
        let s = sigmoid(*v);
        *v = g * (s * (1.0 + *v * (1.0 - s)));
    });
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Given `attn = softmax(scores)` and `d_attn`, return `d_scores`.
pub fn softmax_backward(attn: &Array2<f64>, d_attn: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(attn.raw_dim());
    for i in 0..attn.nrows() {
        let a = attn.row(i);
        let da = d_attn.row(i);
        let dot: f64 = a.iter().zip(da.iter()).map(|(x, y)| x * y).sum();
        for j in 0..attn.ncols() {
            out[[i, j]] = a[j] * (da[j] - dot);
        }
    }
    out
}

/// Sinusoidal embedding of a (possibly fractional) step index. `dim` must be
/// even: first half sines, second half cosines, octave-spaced frequencies.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Array1<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even and >= 2");
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
        let freq = (10_000f64).powf(-(i as f64) / denom);
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

/// Nearest-neighbour 2x upsample.
pub fn upsample2x(x: &FeatMap) -> FeatMap {
    let (h, w, c) = (x.h, x.w, x.channels());
    let mut out = Array2::zeros((4 * h * w, c));
    for y in 0..2 * h {
        for xx in 0..2 * w {
            let src = (y / 2) * w + xx / 2;
            out.row_mut(y * 2 * w + xx).assign(&x.data.row(src));
        }
    }
    FeatMap::new(out, 2 * h, 2 * w)
}

/// Gradient of [`upsample2x`]: each source pixel sums its four copies.
pub fn upsample2x_backward(dy: &FeatMap) -> FeatMap {
    assert!(dy.h % 2 == 0 && dy.w % 2 == 0);
    let (h, w, c) = (dy.h / 2, dy.w / 2, dy.channels());
    let mut out = Array2::zeros((h * w, c));
    for y in 0..dy.h {
        for xx in 0..dy.w {
            let dst = (y / 2) * w + xx / 2;
            let src = dy.data.row(y * dy.w + xx);
            let mut acc = out.row_mut(dst);
            acc += &src;
        }
    }
    FeatMap::new(out, h, w)
}

/// Concatenate two maps along channels (same spatial extent).
pub fn concat_channels(a: &FeatMap, b: &FeatMap) -> FeatMap {
    assert_eq!((a.h, a.w), (b.h, b.w));
    FeatMap::new(
        concatenate(Axis(1), &[a.data.view(), b.data.view()]).unwrap(),
        a.h,
        a.w,
    )
}

/// Split a channel gradient back into the two concatenated parts.
pub fn split_channels(d: &FeatMap, c_first: usize) -> (FeatMap, FeatMap) {
    let a = d.data.slice(ndarray::s![.., ..c_first]).to_owned();
    let b = d.data.slice(ndarray::s![.., c_first..]).to_owned();
    (FeatMap::new(a, d.h, d.w), FeatMap::new(b, d.h, d.w))
}
