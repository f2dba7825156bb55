//! Seeded image corruption operators.
//!
//! These feed two places: additive Gaussian noise followed by coarse dropout
//! corrupts the reconstructor's training input, and motion blur or Gaussian
//! noise distorts images when synthesizing hard negatives. Every operator is
//! pure: the same input, config, and random stream produce bit-identical
//! output. Random draws are consumed in a fixed order (per image, row-major
//! over channel, row, column) so runs can be replayed from the seed alone.

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::error::{Error, Result};

/// Hyperparameters for all corruption operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionConfig {
    /// Standard deviation of the additive Gaussian noise, in [0,1] pixel units.
    pub noise_sigma: f32,
    /// Probability-like rate governing how many grid cells coarse dropout removes.
    pub dropout_prob: f32,
    /// Side length in pixels of each dropped rectangle.
    pub dropout_unit: usize,
    /// Length of the motion-blur line kernel; odd, >= 3.
    pub blur_kernel_len: usize,
    /// Fixed blur angle in degrees, used when `blur_angle_random` is false.
    pub blur_angle_deg: f32,
    /// Draw the blur angle uniformly from [0, 180) per image.
    pub blur_angle_random: bool,
    /// Gaussian sigma used by the negative distortion's noise branch.
    pub negative_sigma: f32,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            dropout_prob: 0.2,
            dropout_unit: 4,
            blur_kernel_len: 7,
            blur_angle_deg: 0.0,
            blur_angle_random: true,
            negative_sigma: 0.1,
        }
    }
}

impl CorruptionConfig {
    /// Check the config invariants against a target image size.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::parameter("noise_sigma", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::parameter("dropout_prob", "must be in [0, 1]"));
        }
        if self.dropout_unit == 0 {
            return Err(Error::parameter("dropout_unit", "must be >= 1"));
        }
        if self.dropout_unit > height.min(width) {
            return Err(Error::parameter(
                "dropout_unit",
                format!(
                    "{} exceeds min(height, width) = {}",
                    self.dropout_unit,
                    height.min(width)
                ),
            ));
        }
        if self.blur_kernel_len < 3 || self.blur_kernel_len % 2 == 0 {
            return Err(Error::parameter("blur_kernel_len", "must be odd and >= 3"));
        }
        if !(0.0..180.0).contains(&self.blur_angle_deg) {
            return Err(Error::parameter("blur_angle_deg", "must be in [0, 180)"));
        }
        if !self.negative_sigma.is_finite() || self.negative_sigma < 0.0 {
            return Err(Error::parameter("negative_sigma", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Binary mask marking the rectangles removed by coarse dropout. One inside
/// dropped rectangles, zero elsewhere; same shape as the batch it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    mask: Array4<f32>,
}

impl DropoutMask {
    pub fn array(&self) -> &Array4<f32> {
        &self.mask
    }

    /// Fraction of masked pixels, averaged over the whole batch.
    pub fn dropped_fraction(&self) -> f64 {
        let total = self.mask.len() as f64;
        let ones: f64 = self.mask.iter().map(|&v| v as f64).sum();
        ones / total
    }
}

/// Add i.i.d. Gaussian noise `N(0, sigma)` to every element, then clamp to [0, 1].
///
/// Draws one normal sample per element in row-major order over the whole batch.
pub fn add_gaussian_noise<R: Rng>(batch: &ImageBatch, sigma: f32, rng: &mut R) -> Result<ImageBatch> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::parameter("sigma", "must be finite and >= 0"));
    }
    if sigma == 0.0 {
        return Ok(batch.clone());
    }
    let normal = Normal::new(0.0f32, sigma).expect("sigma checked above");
    let mut out = batch.data().clone();
    for v in out.iter_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
    Ok(ImageBatch::new(out).expect("clamped values are in range"))
}

/// Zero out randomly placed unit-aligned rectangles of pixels, identically
/// across channels. Returns the corrupted batch and the mask that was applied,
/// so the output equals `input * (1 - mask)` elementwise.
///
/// Placement rule: the image is covered by a grid of `dropout_unit`-sized
/// cells; `round(dropout_prob * cells)` distinct cells are chosen uniformly
/// without replacement per image.
pub fn coarse_dropout<R: Rng>(
    batch: &ImageBatch,
    cfg: &CorruptionConfig,
    rng: &mut R,
) -> Result<(ImageBatch, DropoutMask)> {
    let (c, h, w) = batch.image_shape();
    cfg.validate(h, w)?;

    let grid_h = h / cfg.dropout_unit;
    let grid_w = w / cfg.dropout_unit;
    let cells = grid_h * grid_w;
    let n_rects = ((cfg.dropout_prob as f64) * cells as f64).round() as usize;

    let mut mask = Array4::<f32>::zeros(batch.data().raw_dim());
    if n_rects > 0 {
        for i in 0..batch.len() {
            let chosen = rand::seq::index::sample(rng, cells, n_rects);
            let mut img_mask = mask.index_axis_mut(Axis(0), i);
            for cell in chosen.iter() {
                let gy = cell / grid_w;
                let gx = cell % grid_w;
                let y0 = gy * cfg.dropout_unit;
                let x0 = gx * cfg.dropout_unit;
                for ch in 0..c {
                    for y in y0..y0 + cfg.dropout_unit {
                        for x in x0..x0 + cfg.dropout_unit {
                            img_mask[[ch, y, x]] = 1.0;
                        }
                    }
                }
            }
        }
    }

    let dropped = batch.data() * &(1.0 - &mask);
    Ok((
        ImageBatch::new(dropped).expect("product of in-range values stays in range"),
        DropoutMask { mask },
    ))
}

/// Normalized line kernel of the given length and angle (degrees, 0 = horizontal).
fn line_kernel(len: usize, angle_deg: f32) -> Array2<f32> {
    let mut kernel = Array2::<f32>::zeros((len, len));
    let center = (len as isize - 1) / 2;
    let theta = (angle_deg as f64).to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    for i in 0..len {
        let t = i as f64 - center as f64;
        let x = (center as f64 + t * cos_t).round() as isize;
        let y = (center as f64 - t * sin_t).round() as isize;
        if x >= 0 && y >= 0 && (x as usize) < len && (y as usize) < len {
            kernel[[y as usize, x as usize]] = 1.0;
        }
    }
    let sum: f32 = kernel.sum();
    kernel.mapv_inplace(|v| v / sum);
    kernel
}

/// Mirror an out-of-range index back into [0, n) without repeating the edge
/// sample (reflect-101 style: ..., 2, 1, 0, 1, 2, ...).
fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

fn convolve_channel(channel: &ndarray::ArrayView2<f32>, kernel: &Array2<f32>) -> Array2<f32> {
    let (h, w) = channel.dim();
    let k = kernel.dim().0;
    let half = (k / 2) as isize;
    // Line kernels are sparse: precompute the nonzero taps.
    let taps: Vec<(isize, isize, f32)> = kernel
        .indexed_iter()
        .filter(|(_, &v)| v != 0.0)
        .map(|((ky, kx), &v)| (ky as isize - half, kx as isize - half, v))
        .collect();
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for &(dy, dx, wgt) in &taps {
                let sy = reflect_index(y as isize + dy, h);
                let sx = reflect_index(x as isize + dx, w);
                acc += wgt * channel[[sy, sx]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn blur_image(image: &ArrayView3<f32>, kernel: &Array2<f32>) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        let blurred = convolve_channel(&image.index_axis(Axis(0), ch), kernel);
        out.index_axis_mut(Axis(0), ch).assign(&blurred);
    }
    // The kernel is a convex combination, so values only leave [0,1] by
    // rounding error.
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Convolve each channel with a normalized line kernel (reflect padding).
/// Output shape equals input shape; constant images are preserved exactly up
/// to floating-point rounding.
pub fn motion_blur(batch: &ImageBatch, kernel_len: usize, angle_deg: f32) -> Result<ImageBatch> {
    if kernel_len < 3 || kernel_len % 2 == 0 {
        return Err(Error::parameter("kernel_len", "must be odd and >= 3"));
    }
    let kernel = line_kernel(kernel_len, angle_deg);
    let (_, _, h, w) = batch.data().dim();
    if h == 0 || w == 0 {
        return Ok(batch.clone());
    }
    let mut out = Array4::<f32>::zeros(batch.data().raw_dim());
    for i in 0..batch.len() {
        out.index_axis_mut(Axis(0), i)
            .assign(&blur_image(&batch.image(i), &kernel));
    }
    Ok(ImageBatch::new(out).expect("blur output clamped to range"))
}

/// Which distortion a negative sample went through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeBranch {
    Blur,
    Noise,
}

/// Apply one negative-distortion branch to a single image.
///
/// Blur draws its angle from `rng` when `cfg.blur_angle_random` is set; noise
/// draws per-element samples in row-major order with `cfg.negative_sigma`.
pub fn distort_negative_image<R: Rng>(
    image: &ArrayView3<f32>,
    branch: NegativeBranch,
    cfg: &CorruptionConfig,
    rng: &mut R,
) -> Result<Array3<f32>> {
    match branch {
        NegativeBranch::Blur => {
            let angle = if cfg.blur_angle_random {
                rng.random_range(0.0..180.0)
            } else {
                cfg.blur_angle_deg
            };
            if cfg.blur_kernel_len < 3 || cfg.blur_kernel_len % 2 == 0 {
                return Err(Error::parameter("blur_kernel_len", "must be odd and >= 3"));
            }
            let kernel = line_kernel(cfg.blur_kernel_len, angle);
            Ok(blur_image(image, &kernel))
        }
        NegativeBranch::Noise => {
            if !cfg.negative_sigma.is_finite() || cfg.negative_sigma < 0.0 {
                return Err(Error::parameter("negative_sigma", "must be finite and >= 0"));
            }
            let mut out = image.to_owned();
            if cfg.negative_sigma > 0.0 {
                let normal = Normal::new(0.0f32, cfg.negative_sigma).expect("sigma checked");
                for v in out.iter_mut() {
                    *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
                }
            }
            Ok(out)
        }
    }
}

/// For each image independently, apply exactly one of motion blur or Gaussian
/// noise, chosen uniformly. Returns the distorted batch and which branch each
/// image took.
pub fn negative_distortion_with_branches<R: Rng>(
    batch: &ImageBatch,
    cfg: &CorruptionConfig,
    rng: &mut R,
) -> Result<(ImageBatch, Vec<NegativeBranch>)> {
    let (_, h, w) = batch.image_shape();
    if batch.len() > 0 {
        cfg.validate(h, w)?;
    }
    let mut out = Array4::<f32>::zeros(batch.data().raw_dim());
    let mut branches = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let branch = if rng.random_bool(0.5) {
            NegativeBranch::Blur
        } else {
            NegativeBranch::Noise
        };
        let distorted = distort_negative_image(&batch.image(i), branch, cfg, rng)?;
        out.index_axis_mut(Axis(0), i).assign(&distorted);
        branches.push(branch);
    }
    Ok((
        ImageBatch::new(out).expect("branch outputs stay in range"),
        branches,
    ))
}

/// [`negative_distortion_with_branches`] without the per-image branch record.
pub fn make_negative_distortion<R: Rng>(
    batch: &ImageBatch,
    cfg: &CorruptionConfig,
    rng: &mut R,
) -> Result<ImageBatch> {
    negative_distortion_with_branches(batch, cfg, rng).map(|(b, _)| b)
}
