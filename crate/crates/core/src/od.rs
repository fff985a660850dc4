//! Optical-density conversions.
//!
//! Transmitted intensity relates to stain concentration exponentially;
//! taking the negative base-10 log of `I / I0` yields optical density,
//! which is linear in concentration and is the domain every estimation
//! step works in.

use crate::error::StainError;
use crate::image::RgbImage;

/// Per-pixel optical-density triples. Order matches the source pixel
/// order, but no spatial layout is retained.
#[derive(Debug, Clone, PartialEq)]
pub struct OdPixels {
    values: Vec<[f64; 3]>,
}

impl OdPixels {
    pub fn from_values(values: Vec<[f64; 3]>) -> Self {
        Self { values }
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[[f64; 3]] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64; 3]> {
        self.values.iter()
    }
}

/// Convert 8-bit intensities to optical density: `od = -log10(max(I, 1) / i0)`.
///
/// Zero intensities are clamped to 1 before the log so the OD stays
/// finite; with the default `i0 = 255` this caps the OD near 2.41.
///
/// # Panics
/// Panics if `i0 <= 0`.
pub fn rgb_to_od(image: &RgbImage, i0: f64) -> Result<OdPixels, StainError> {
    assert!(i0 > 0.0, "i0 must be positive");
    if image.pixel_count() == 0 {
        return Err(StainError::EmptyImage);
    }
    let values = image
        .pixels()
        .map(|p| {
            let od = |c: u8| -> f64 { -(f64::from(c).max(1.0) / i0).log10() };
            [od(p[0]), od(p[1]), od(p[2])]
        })
        .collect();
    Ok(OdPixels { values })
}

/// Convert optical density back to 8-bit intensities:
/// `I = round(i0 * 10^(-od))`, clamped to `[0, 255]`.
///
/// Total for any finite or non-finite input; non-finite values saturate.
///
/// # Panics
/// Panics if `i0 <= 0` or if `od.count() != width * height`.
pub fn od_to_rgb(od: &OdPixels, i0: f64, width: usize, height: usize) -> Result<RgbImage, StainError> {
    assert!(i0 > 0.0, "i0 must be positive");
    let expected = width * height;
    if od.count() != expected {
        return Err(StainError::DimensionMismatch {
            expected,
            actual: od.count(),
        });
    }
    let mut data = Vec::with_capacity(expected * 3);
    for v in od.iter() {
        for &c in v {
            data.push((i0 * 10f64.powf(-c)).round().clamp(0.0, 255.0) as u8);
        }
    }
    RgbImage::new(width, height, data)
}
