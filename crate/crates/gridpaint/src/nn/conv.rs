//! 2-d convolution as im2col + GEMM on tokens-first feature maps.

use super::{FeatMap, Grads, Init, ParamId, ParamStore};
use ndarray::{Array2, Axis};
use rand::Rng;

/// Square-kernel convolution. Weights are stored GEMM-ready as a
/// `(k*k*cin, cout)` matrix whose row index is `(ky*k + kx)*cin + ci`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// What backward needs: the unrolled input patches and the input extent.
pub struct ConvCache {
    cols: Array2<f64>,
    in_h: usize,
    in_w: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = store.add(
            format!("{name}.w"),
            super::init_tensor(rng, &[fan_in, cout], init, fan_in),
        );
        let b = store.add(format!("{name}.b"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[cout])));
        Conv2d { w, b, cin, cout, k, stride, pad }
    }

    /// 3x3, stride 1, padding 1: spatial extent preserved.
    pub fn same(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        init: Init,
    ) -> Self {
        Conv2d::new(store, rng, name, cin, cout, 3, 1, 1, init)
    }

    /// 3x3, stride 2, padding 1: halves each spatial dimension (even sizes).
    pub fn down(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Conv2d::new(store, rng, name, cin, cout, 3, 2, 1, Init::Lecun)
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &FeatMap, store: &ParamStore) -> (FeatMap, ConvCache) {
        debug_assert_eq!(x.channels(), self.cin);
        let (oh, ow) = self.out_size(x.h, x.w);
        let cols = im2col(x, self.k, self.stride, self.pad, oh, ow);
        let mut y = cols.dot(&store.p2(self.w));
        y += &store.p1(self.b);
        (FeatMap::new(y, oh, ow), ConvCache { cols, in_h: x.h, in_w: x.w })
    }

    pub fn backward(
        &self,
        dy: &FeatMap,
        cache: &ConvCache,
        store: &ParamStore,
        grads: &mut Grads,
    ) -> FeatMap {
        grads.add2(self.w, &cache.cols.t().dot(&dy.data));
        grads.add1(self.b, &dy.data.sum_axis(Axis(0)));
        let dcols = dy.data.dot(&store.p2(self.w).t());
        col2im(
            &dcols,
            self.cin,
            self.k,
            self.stride,
            self.pad,
            cache.in_h,
            cache.in_w,
            dy.h,
            dy.w,
        )
    }
}

fn im2col(x: &FeatMap, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Array2<f64> {
    let cin = x.channels();
    let mut cols = Array2::zeros((oh * ow, k * k * cin));
    for oy in 0..oh {
        for ox in 0..ow {
            let out_row = oy * ow + ox;
            let mut dst = cols.row_mut(out_row);
            let dst = dst.as_slice_mut().unwrap();
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= x.h as isize {
                    continue; // zero padding already in place
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= x.w as isize {
                        continue;
                    }
                    let src_row = x.data.row(iy as usize * x.w + ix as usize);
                    let src = src_row.as_slice().unwrap();
                    let base = (ky * k + kx) * cin;
                    dst[base..base + cin].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
    oh: usize,
    ow: usize,
) -> FeatMap {
    let mut dx = Array2::zeros((in_h * in_w, cin));
    for oy in 0..oh {
        for ox in 0..ow {
            let src_row = dcols.row(oy * ow + ox);
            let src = src_row.as_slice().unwrap();
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= in_h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= in_w as isize {
                        continue;
                    }
                    let base = (ky * k + kx) * cin;
                    let mut dst = dx.row_mut(iy as usize * in_w + ix as usize);
                    let dst = dst.as_slice_mut().unwrap();
                    for ci in 0..cin {
                        dst[ci] += src[base + ci];
                    }
                }
            }
        }
    }
    FeatMap::new(dx, in_h, in_w)
}
