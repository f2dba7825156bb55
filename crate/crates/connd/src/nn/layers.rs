//! Parameter-free layers and the linear head.

use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::Rng;

use super::init::{kaiming_uniform, zero_bias};
use super::FlatParams;

pub fn relu(x: &ArrayView3<f32>) -> Array3<f32> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of relu given the forward *input*.
pub fn relu_backward(x: &ArrayView3<f32>, dy: &ArrayView3<f32>) -> Array3<f32> {
    let mut dx = dy.to_owned();
    dx.zip_mut_with(x, |d, &xv| {
        if xv <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2x(x: &ArrayView3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let mut y = Array3::<f32>::zeros((c, 2 * h, 2 * w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x[[ch, i, j]];
                y[[ch, 2 * i, 2 * j]] = v;
                y[[ch, 2 * i + 1, 2 * j]] = v;
                y[[ch, 2 * i, 2 * j + 1]] = v;
                y[[ch, 2 * i + 1, 2 * j + 1]] = v;
            }
        }
    }
    y
}

/// Backward of nearest-neighbor 2x upsampling: sum each 2x2 block.
pub fn upsample2x_backward(dy: &ArrayView3<f32>) -> Array3<f32> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                dx[[ch, i, j]] = dy[[ch, 2 * i, 2 * j]]
                    + dy[[ch, 2 * i + 1, 2 * j]]
                    + dy[[ch, 2 * i, 2 * j + 1]]
                    + dy[[ch, 2 * i + 1, 2 * j + 1]];
            }
        }
    }
    dx
}

/// Mean over the spatial dimensions: `(c, h, w) -> (c,)`.
pub fn global_avg_pool(x: &ArrayView3<f32>) -> Array1<f32> {
    let (c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f32;
    let mut y = Array1::<f32>::zeros(c);
    for ch in 0..c {
        y[ch] = x.index_axis(ndarray::Axis(0), ch).sum() * scale;
    }
    y
}

pub fn global_avg_pool_backward(dy: &Array1<f32>, h: usize, w: usize) -> Array3<f32> {
    let c = dy.len();
    let scale = 1.0 / (h * w) as f32;
    let mut dx = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        dx.index_axis_mut(ndarray::Axis(0), ch).fill(dy[ch] * scale);
    }
    dx
}

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f32>, // [out, in]
    pub bias: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct LinearGrad {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Linear {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            weight: kaiming_uniform(out_dim, in_dim, in_dim, rng),
            bias: zero_bias(out_dim),
        }
    }

    pub fn forward(&self, x: &Array1<f32>) -> Array1<f32> {
        self.weight.dot(x) + &self.bias
    }

    /// Accumulate parameter gradients and return dx.
    pub fn backward(&self, x: &Array1<f32>, dy: &Array1<f32>, grad: &mut LinearGrad) -> Array1<f32> {
        for (o, &d) in dy.iter().enumerate() {
            grad.bias[o] += d;
            let mut row = grad.weight.row_mut(o);
            row.zip_mut_with(x, |g, &xv| *g += d * xv);
        }
        self.weight.t().dot(dy)
    }
}

impl LinearGrad {
    pub fn zeros_like(l: &Linear) -> Self {
        Self {
            weight: Array2::zeros(l.weight.raw_dim()),
            bias: Array1::zeros(l.bias.raw_dim()),
        }
    }
}

impl FlatParams for Linear {
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

impl FlatParams for LinearGrad {
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
