//! RGB images in the continuous `[0, 255]` pixel domain, stored HWC.

use crate::tensor::{Result, Tensor, TensorError};

pub const CHANNELS: usize = 3;
pub const PIXEL_MAX: f32 = 255.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// An image with its identity label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let expected = height * width * CHANNELS;
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape: vec![height, width, CHANNELS],
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| f32::from(b)).collect())
    }

    /// Rounds half away from zero and clamps to `[0, 255]`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_value(v) as u8).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Side length of a square image.
    pub fn side(&self) -> Option<usize> {
        (self.height == self.width).then_some(self.height)
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, CHANNELS]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn check_same_shape(&self, other: &Image, op: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            })
        }
    }

    /// L-infinity distance. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        assert!(self.same_shape(other), "max_abs_diff on differently shaped images");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other), "mean_abs_diff on differently shaped images");
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f64::from((a - b).abs()))
            .sum();
        total / self.data.len() as f64
    }

    pub fn in_pixel_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=PIXEL_MAX).contains(v))
    }

    /// `[3, H, W]` tensor scaled to `[0, 1]`; the model-facing layout.
    pub fn to_model_input(&self) -> Tensor {
        let plane = self.height * self.width;
        let mut out = vec![0.0f32; plane * CHANNELS];
        for (i, px) in self.data.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                out[c * plane + i] = px[c] / PIXEL_MAX;
            }
        }
        Tensor::new(vec![CHANNELS, self.height, self.width], out).expect("layout preserves length")
    }

    /// Maps a gradient w.r.t. [`Image::to_model_input`] back to pixel units.
    pub fn from_model_gradient(grad: &Tensor, height: usize, width: usize) -> Result<Self> {
        if grad.shape() != [CHANNELS, height, width] {
            return Err(TensorError::ShapeMismatch {
                op: "from_model_gradient",
                left: grad.shape().to_vec(),
                right: vec![CHANNELS, height, width],
            });
        }
        let plane = height * width;
        let src = grad.data();
        let mut data = vec![0.0f32; plane * CHANNELS];
        for i in 0..plane {
            for c in 0..CHANNELS {
                data[i * CHANNELS + c] = src[c * plane + i] / PIXEL_MAX;
            }
        }
        Self::new(height, width, data)
    }
}

/// Round half away from zero, then clamp to the 8-bit range.
pub fn quantize_value(v: f32) -> f32 {
    v.round().clamp(0.0, PIXEL_MAX)
}
