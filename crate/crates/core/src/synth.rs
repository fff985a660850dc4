//! Forward Lambert-Beer image synthesis with known ground truth.
//!
//! Inverts the measurement model: given a stain matrix and per-pixel
//! concentrations, produce the quantized 8-bit image a camera would see.
//! Because the exact concentrations are returned alongside the image,
//! synthesized images serve as an independent oracle for the estimator
//! and the multi-reference strategies.

use nalgebra::{Rotation3, Unit, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::StainError;
use crate::image::RgbImage;
use crate::stain::{ConcentrationMatrix, StainMatrix};

/// How per-pixel concentrations are produced.
#[derive(Debug, Clone)]
pub enum ConcentrationLaw {
    /// Both stain concentrations drawn independently and uniformly from
    /// `[lo, hi)`.
    Uniform { lo: f64, hi: f64 },
    /// Explicit per-pixel grid; must hold exactly `width * height`
    /// entries.
    Explicit(ConcentrationMatrix),
}

/// Specification of one synthetic image.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub v_true: StainMatrix,
    pub law: ConcentrationLaw,
    pub width: usize,
    pub height: usize,
    pub rng_seed: u64,
    /// Fraction of pixels set to pure white (zero concentrations).
    pub background_fraction: f64,
}

impl SynthSpec {
    /// A ready-to-use 128x128 spec: seeded fixture staining, uniform
    /// concentrations in [0.2, 1.5), no background.
    pub fn fixture(seed: u64) -> Self {
        Self {
            v_true: fixture_stain_matrix(seed),
            law: ConcentrationLaw::Uniform { lo: 0.2, hi: 1.5 },
            width: 128,
            height: 128,
            rng_seed: seed,
            background_fraction: 0.0,
        }
    }

    pub fn synthesize(&self) -> Result<(RgbImage, ConcentrationMatrix), StainError> {
        synthesize(self)
    }

    fn validate(&self) -> Result<(), StainError> {
        if self.width * self.height == 0 {
            return Err(StainError::InvalidSpec("image must have pixels".into()));
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return Err(StainError::InvalidSpec(format!(
                "background_fraction must be in [0, 1), got {}",
                self.background_fraction
            )));
        }
        match &self.law {
            ConcentrationLaw::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && *lo >= 0.0 && hi > lo) {
                    return Err(StainError::InvalidSpec(format!(
                        "uniform law requires 0 <= lo < hi, got [{lo}, {hi})"
                    )));
                }
            }
            ConcentrationLaw::Explicit(grid) => {
                if grid.pixel_count() != self.width * self.height {
                    return Err(StainError::InvalidSpec(format!(
                        "explicit grid has {} entries for {} pixels",
                        grid.pixel_count(),
                        self.width * self.height
                    )));
                }
                if self.background_fraction != 0.0 {
                    return Err(StainError::InvalidSpec(
                        "explicit grids already define every pixel; background_fraction must be 0"
                            .into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Render the spec to a quantized 8-bit image and return the exact
/// concentrations used. Quantization (round to integer RGB) is applied
/// deliberately so oracle tolerances reflect the real pipeline.
pub fn synthesize(spec: &SynthSpec) -> Result<(RgbImage, ConcentrationMatrix), StainError> {
    spec.validate()?;
    let n = spec.width * spec.height;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let m = spec.v_true.matrix();
    let mut truth = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3);
    for i in 0..n {
        let c = match &spec.law {
            ConcentrationLaw::Uniform { lo, hi } => {
                if rng.random::<f64>() < spec.background_fraction {
                    [0.0, 0.0]
                } else {
                    [rng.random_range(*lo..*hi), rng.random_range(*lo..*hi)]
                }
            }
            ConcentrationLaw::Explicit(grid) => grid.get(i),
        };
        let od = m * Vector2::new(c[0], c[1]);
        for ch in 0..3 {
            data.push((255.0 * 10f64.powf(-od[ch])).round().clamp(0.0, 255.0) as u8);
        }
        truth.push(c);
    }
    Ok((
        RgbImage::new(spec.width, spec.height, data)?,
        ConcentrationMatrix::from_values(truth),
    ))
}

/// Rotate both stain vectors about `axis` by `theta` radians. Norms are
/// preserved and the hematoxylin/eosin ordering is reapplied.
///
/// # Panics
/// Panics if `axis` is (numerically) zero.
pub fn rotate_stain_basis(v: &StainMatrix, axis: [f64; 3], theta: f64) -> StainMatrix {
    let axis = Vector3::from(axis);
    assert!(axis.norm() > 1e-12, "rotation axis must be non-zero");
    let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), theta);
    let h = rot * Vector3::from(v.hematoxylin());
    let e = rot * Vector3::from(v.eosin());
    StainMatrix::new(h.into(), e.into()).expect("rotation preserves unit norms")
}

/// Seeded random stain matrix for test fixtures: unit columns in the
/// positive orthant with an inter-column angle between 15 and 25
/// degrees. No published H&E constants are baked in.
pub fn fixture_stain_matrix(seed: u64) -> StainMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let min_angle = 15f64.to_radians();
    let max_angle = 25f64.to_radians();
    loop {
        let mut col = || -> Vector3<f64> {
            Vector3::new(
                rng.random_range(0.25..1.0),
                rng.random_range(0.25..1.0),
                rng.random_range(0.25..1.0),
            )
            .normalize()
        };
        let a = col();
        let b = col();
        let angle = a.dot(&b).clamp(-1.0, 1.0).acos();
        if (min_angle..=max_angle).contains(&angle) {
            return StainMatrix::new(a.into(), b.into()).expect("columns are unit length");
        }
    }
}
