//! Image batches: rank-4 arrays of f32 in NCHW layout with values in [0, 1].

use ndarray::{Array3, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};

/// A batch of images, shape `(count, channels, height, width)`, every value
/// in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    data: Array4<f32>,
}

impl ImageBatch {
    /// Wrap an array after checking that all values are finite and in [0, 1].
    pub fn new(data: Array4<f32>) -> Result<Self> {
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::parameter(
                    "batch",
                    format!("image values must be finite and in [0, 1], found {v}"),
                ));
            }
        }
        Ok(Self { data })
    }

    /// Wrap an array, clamping each value into [0, 1]. NaN becomes 0.
    pub fn from_clamped(mut data: Array4<f32>) -> Self {
        data.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self { data }
    }

    pub fn zeros(count: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array4::zeros((count, channels, height, width)),
        }
    }

    pub fn filled(count: usize, channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(Array4::from_elem((count, channels, height, width), value))
    }

    /// Stack per-image arrays (all `(channels, height, width)`) into a batch.
    pub fn from_images(images: Vec<Array3<f32>>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("cannot build a batch from zero images".into()));
        }
        let shape = images[0].dim();
        let (c, h, w) = shape;
        let mut data = Array4::zeros((images.len(), c, h, w));
        for (i, img) in images.iter().enumerate() {
            if img.dim() != shape {
                return Err(Error::shape(format!("{shape:?}"), format!("{:?}", img.dim())));
            }
            data.index_axis_mut(Axis(0), i).assign(img);
        }
        Self::new(data)
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_inner(self) -> Array4<f32> {
        self.data
    }

    /// Number of images in the batch.
    pub fn len(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.len_of(Axis(1))
    }

    pub fn height(&self) -> usize {
        self.data.len_of(Axis(2))
    }

    pub fn width(&self) -> usize {
        self.data.len_of(Axis(3))
    }

    /// `(channels, height, width)` of a single image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }

    pub fn image(&self, index: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), index)
    }

    /// New batch holding the images at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(0), indices),
        }
    }

    /// Concatenate two batches of identical image shape.
    pub fn concat(&self, other: &ImageBatch) -> Result<Self> {
        if self.image_shape() != other.image_shape() {
            return Err(Error::shape(
                format!("{:?}", self.image_shape()),
                format!("{:?}", other.image_shape()),
            ));
        }
        let data = ndarray::concatenate(Axis(0), &[self.data.view(), other.data.view()])
            .map_err(|e| Error::Config(format!("concat failed: {e}")))?;
        Ok(Self { data })
    }
}
