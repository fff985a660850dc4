//! 8-bit RGB raster type shared by the whole pipeline.

use crate::error::StainError;

/// A 3-channel 8-bit image stored row-major as interleaved `r, g, b` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    /// Build an image from interleaved RGB bytes; `data.len()` must be
    /// `width * height * 3`.
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, StainError> {
        let expected = width * height * 3;
        if data.len() != expected {
            return Err(StainError::DimensionMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// A `width` x `height` image with every pixel set to `rgb`.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Interleaved RGB bytes, row-major.
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// The `i`-th pixel in row-major order.
    pub fn pixel(&self, i: usize) -> [u8; 3] {
        let o = i * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Iterate over pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Mirror the image left-to-right. The estimator is geometry-free, so
    /// this is mainly useful for pixel-permutation tests.
    pub fn flipped_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let o = (y * self.width + x) * 3;
                data.extend_from_slice(&self.data[o..o + 3]);
            }
        }
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }
}
