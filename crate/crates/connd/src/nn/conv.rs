//! 2-D convolution with zero padding, implemented as im2col + GEMM, plus the
//! matching backward pass.

use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::Rng;

use super::init::{kaiming_uniform, zero_bias};
use super::FlatParams;

/// Convolution layer. Weights are stored flattened as
/// `[out_ch, in_ch * kernel * kernel]` so forward and backward are plain
/// matrix products against the im2col buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Gradient buffer matching one [`Conv2d`].
#[derive(Debug, Clone)]
pub struct Conv2dGrad {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: kaiming_uniform(out_ch, fan_in, fan_in, rng),
            bias: zero_bias(out_ch),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Forward pass for one image `(in_ch, h, w)`.
    pub fn forward(&self, x: &ArrayView3<f32>) -> Array3<f32> {
        self.forward_cached(x).0
    }

    /// Forward pass that also returns the im2col buffer for backprop.
    pub fn forward_cached(&self, x: &ArrayView3<f32>) -> (Array3<f32>, Array2<f32>) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_ch);
        let (oh, ow) = self.out_hw(h, w);
        let cols = im2col(x, self.kernel, self.stride, self.pad, oh, ow);
        let mut y = self.weight.dot(&cols); // [out_ch, oh*ow]
        for (mut row, &b) in y.rows_mut().into_iter().zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let y3 = y
            .into_shape_with_order((self.out_ch, oh, ow))
            .expect("row-major reshape");
        (y3, cols)
    }

    /// Backward pass for one image. Accumulates parameter gradients into
    /// `grad` and returns the gradient with respect to the input.
    pub fn backward(
        &self,
        cols: &Array2<f32>,
        dy: &ArrayView3<f32>,
        in_hw: (usize, usize),
        grad: &mut Conv2dGrad,
    ) -> Array3<f32> {
        let (oc, oh, ow) = dy.dim();
        debug_assert_eq!(oc, self.out_ch);
        let dy_mat = dy
            .to_shape((oc, oh * ow))
            .expect("row-major reshape")
            .to_owned();
        grad.weight = &grad.weight + &dy_mat.dot(&cols.t());
        grad.bias = &grad.bias + &dy_mat.sum_axis(ndarray::Axis(1));
        let dcols = self.weight.t().dot(&dy_mat); // [in_ch*k*k, oh*ow]
        col2im(
            &dcols,
            self.in_ch,
            in_hw.0,
            in_hw.1,
            self.kernel,
            self.stride,
            self.pad,
            oh,
            ow,
        )
    }
}

impl Conv2dGrad {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        Self {
            weight: Array2::zeros(conv.weight.raw_dim()),
            bias: Array1::zeros(conv.bias.raw_dim()),
        }
    }
}

impl FlatParams for Conv2d {
    fn flat(&self) -> Vec<&[f32]> {
        vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn flat_mut(&mut self) -> Vec<&mut [f32]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

impl FlatParams for Conv2dGrad {
    fn flat(&self) -> Vec<&[f32]> {
        vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn flat_mut(&mut self) -> Vec<&mut [f32]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Unfold an image into a `[in_ch*k*k, oh*ow]` matrix with zero padding.
fn im2col(
    x: &ArrayView3<f32>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f32>::zeros((c * k * k, oh * ow));
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let mut out_row = cols.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[oy * ow + ox] = x[[ch, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Fold a column-gradient matrix back into an image gradient, reversing
/// [`im2col`] (overlapping windows accumulate).
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f32>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f32> {
    let mut dx = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let col_row = dcols.row(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[ch, iy as usize, ix as usize]] += col_row[oy * ow + ox];
                    }
                }
            }
        }
    }
    dx
}
