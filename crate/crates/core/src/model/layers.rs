//! Dense and convolutional layers with explicit backward passes.
//!
//! Matrices are row-per-sample: a `Linear` maps `(rows, in)` to `(rows, out)`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Gaussian weights with the given std-dev, zero bias.
    pub fn normal(inputs: usize, outputs: usize, std: f64, rng: &mut Rng) -> Self {
        let n = Normal::new(0.0, std).expect("valid std");
        Self {
            weight: Array2::from_shape_simple_fn((outputs, inputs), || n.sample(rng)),
            bias: Array1::zeros(outputs),
        }
    }

    /// He initialisation for a layer followed by a rectifier.
    pub fn he(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        Self::normal(inputs, outputs, (2.0 / inputs as f64).sqrt(), rng)
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grad: &mut Linear,
        need_dx: bool,
    ) -> Option<Array2<f64>> {
        general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        need_dx.then(|| dy.dot(&self.weight))
    }
}

pub fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` where the rectifier output was not positive.
pub fn relu_backward_inplace(grad: &mut Array2<f64>, output: &Array2<f64>) {
    ndarray::Zip::from(grad).and(output).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Softmax along each row.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Softmax along each column.
pub fn softmax_cols(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut col in out.columns_mut() {
        let mx = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        col.mapv_inplace(|v| (v - mx).exp());
        let s = col.sum();
        col /= s;
    }
    out
}

/// Backward of a row softmax: `dz = s * (ds - <ds, s>)` per row.
pub fn softmax_rows_backward(s: &Array2<f64>, ds: &Array2<f64>) -> Array2<f64> {
    let mut dz = Array2::zeros(s.raw_dim());
    for ((srow, dsrow), mut dzrow) in s.rows().into_iter().zip(ds.rows()).zip(dz.rows_mut()) {
        let dot = srow.dot(&dsrow);
        ndarray::Zip::from(&mut dzrow)
            .and(&srow)
            .and(&dsrow)
            .for_each(|z, &sv, &dv| *z = sv * (dv - dot));
    }
    dz
}

pub fn softmax_cols_backward(s: &Array2<f64>, ds: &Array2<f64>) -> Array2<f64> {
    softmax_rows_backward(&s.t().to_owned(), &ds.t().to_owned())
        .t()
        .to_owned()
}

/// 2-D convolution with square kernels and zero padding, lowered to a GEMM.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out_channels, in_channels * kernel * kernel)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// What the backward pass of one convolution needs.
#[derive(Debug, Clone)]
pub struct ConvCache {
    pub cols: Array2<f64>,
    pub in_shape: (usize, usize, usize),
    pub out_hw: (usize, usize),
}

impl Conv2d {
    pub fn he(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let lin = Linear::he(fan_in, out_channels, rng);
        Self {
            weight: lin.weight,
            bias: lin.bias,
            in_channels,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            ..self.clone()
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<f64>) -> (Array2<f64>, (usize, usize)) {
        let (c, h, w) = x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let mut cols = Array2::zeros((c * k * k, ho * wo));
        let xs = x.as_slice().expect("standard layout");
        {
            let out = cols.as_slice_mut().expect("standard layout");
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let dst = &mut out[row * ho * wo..(row + 1) * ho * wo];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src =
                                &xs[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                            for ox in 0..wo {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[oy * wo + ox] = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        (cols, (ho, wo))
    }

    fn col2im(
        &self,
        dcols: &Array2<f64>,
        in_shape: (usize, usize, usize),
        out_hw: (usize, usize),
    ) -> Array3<f64> {
        let (c, h, w) = in_shape;
        let (ho, wo) = out_hw;
        let k = self.kernel;
        let mut dx = Array3::zeros((c, h, w));
        let src = dcols.as_slice().expect("standard layout");
        let dst = dx.as_slice_mut().expect("standard layout");
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let s = &src[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ix as usize] += s[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the pre-activation output `(out_channels, ho * wo)` and the cache.
    pub fn forward(&self, x: &Array3<f64>) -> (Array2<f64>, ConvCache) {
        let (cols, out_hw) = self.im2col(x);
        let mut y = self.weight.dot(&cols);
        for (mut row, &b) in y.rows_mut().into_iter().zip(self.bias.iter()) {
            row += b;
        }
        (
            y,
            ConvCache {
                cols,
                in_shape: x.dim(),
                out_hw,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &Array2<f64>,
        grad: &mut Conv2d,
        need_dx: bool,
    ) -> Option<Array3<f64>> {
        general_mat_mul(1.0, dy, &cache.cols.t(), 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(1));
        need_dx.then(|| {
            let dcols = self.weight.t().dot(dy);
            self.col2im(&dcols, cache.in_shape, cache.out_hw)
        })
    }
}
