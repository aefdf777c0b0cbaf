use crate::error::{Error, Result};

/// Pixel tensor stored row-major with channels fastest: index
/// `(y * width + x) * channels + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch {
                op: "image",
                left: (height * width, channels),
                right: (data.len(), 1),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Centers the image inside a zero canvas of `size x size`.
    pub fn pad_to(&self, size: usize) -> Result<Image> {
        if size < self.height || size < self.width {
            return Err(Error::InvalidConfig(format!(
                "cannot pad {}x{} image to {size}",
                self.height, self.width
            )));
        }
        let top = (size - self.height) / 2;
        let left = (size - self.width) / 2;
        let mut out = Image::zeros(size, size, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y + top, x + left, c, self.get(y, x, c));
                }
            }
        }
        Ok(out)
    }

    /// Channel mean, row-major, for grayscale dumps.
    pub fn luminance(&self) -> Vec<f32> {
        self.data
            .chunks(self.channels)
            .map(|px| px.iter().sum::<f32>() / self.channels as f32)
            .collect()
    }
}
