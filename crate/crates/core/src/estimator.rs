//! Stain-matrix estimation from a single image.
//!
//! Tissue pixels are selected by an OD threshold, the dominant plane of
//! their OD scatter is found by eigen-decomposition, every pixel is
//! reduced to an angle in that plane, and robust percentile extremes of
//! the angle distribution become the two stain directions.

use nalgebra::{Matrix3, Vector3};

use crate::error::StainError;
use crate::image::RgbImage;
use crate::od::{rgb_to_od, OdPixels};
use crate::stain::{deconvolve, StainMatrix};

/// Angle extremes closer than this (radians) cannot define two stains.
const MIN_ANGLE_SPREAD: f64 = 1e-3;

/// Percentile used for the robust per-stain maximum concentration.
const MAX_C_PERCENTILE: f64 = 99.0;

/// Parameters of the estimation procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorParams {
    /// OD threshold below which a pixel counts as background.
    pub beta: f64,
    /// Robust percentile (in percent) for the angle extremes.
    pub alpha: f64,
    /// Incident light intensity used for OD conversion.
    pub i0: f64,
    /// Minimum number of tissue pixels required for estimation.
    pub min_tissue_pixels: usize,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        Self {
            beta: 0.15,
            alpha: 1.0,
            i0: 255.0,
            min_tissue_pixels: 100,
        }
    }
}

impl EstimatorParams {
    pub fn validate(&self) -> Result<(), StainError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(StainError::InvalidParams(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 50.0) {
            return Err(StainError::InvalidParams(format!(
                "alpha must be in (0, 50), got {}",
                self.alpha
            )));
        }
        if !(self.i0 > 0.0 && self.i0.is_finite()) {
            return Err(StainError::InvalidParams(format!(
                "i0 must be positive, got {}",
                self.i0
            )));
        }
        if self.min_tissue_pixels < 3 {
            return Err(StainError::InvalidParams(format!(
                "min_tissue_pixels must be at least 3, got {}",
                self.min_tissue_pixels
            )));
        }
        Ok(())
    }
}

/// Orthonormal basis of the dominant OD plane.
///
/// Each basis vector is sign-fixed so that the sum of its components is
/// non-negative, which makes the basis deterministic and makes averaging
/// bases across images well-posed.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneBasis {
    e1: Vector3<f64>,
    e2: Vector3<f64>,
}

impl PlaneBasis {
    /// Build from two vectors that must already be orthonormal within
    /// 1e-9. The sign convention is applied automatically.
    pub fn new(e1: [f64; 3], e2: [f64; 3]) -> Result<Self, StainError> {
        let e1 = Vector3::from(e1);
        let e2 = Vector3::from(e2);
        if (e1.norm() - 1.0).abs() > 1e-9 || (e2.norm() - 1.0).abs() > 1e-9 {
            return Err(StainError::DegenerateBasis);
        }
        if e1.dot(&e2).abs() > 1e-9 {
            return Err(StainError::DegenerateBasis);
        }
        Ok(Self {
            e1: sign_fix(e1),
            e2: sign_fix(e2),
        })
    }

    pub fn e1(&self) -> [f64; 3] {
        self.e1.into()
    }

    pub fn e2(&self) -> [f64; 3] {
        self.e2.into()
    }

    pub(crate) fn e1_vec(&self) -> Vector3<f64> {
        self.e1
    }

    pub(crate) fn e2_vec(&self) -> Vector3<f64> {
        self.e2
    }
}

fn sign_fix(v: Vector3<f64>) -> Vector3<f64> {
    if v.sum() < 0.0 {
        -v
    } else {
        v
    }
}

/// Keep only pixels whose every OD component exceeds `beta`; input order
/// is preserved. May return an empty set.
pub fn filter_od(od: &OdPixels, beta: f64) -> OdPixels {
    OdPixels::from_values(
        od.iter()
            .filter(|p| p.iter().all(|&c| c > beta))
            .copied()
            .collect(),
    )
}

/// The two dominant directions of the OD scatter `Σ od odᵀ`, i.e. the
/// top-2 right-singular directions of the pixel x 3 OD matrix.
pub fn plane_basis(od: &OdPixels) -> Result<PlaneBasis, StainError> {
    if od.count() < 3 {
        return Err(StainError::DegenerateCloud);
    }
    let mut scatter = Matrix3::zeros();
    for p in od.iter() {
        let v = Vector3::from(*p);
        scatter += v * v.transpose();
    }
    let eig = nalgebra::linalg::SymmetricEigen::new(scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let l1 = eig.eigenvalues[order[0]];
    let l2 = eig.eigenvalues[order[1]];
    if l1 <= 0.0 || l2 < 1e-12 * l1 {
        return Err(StainError::DegenerateCloud);
    }
    Ok(PlaneBasis {
        e1: sign_fix(eig.eigenvectors.column(order[0]).into_owned()),
        e2: sign_fix(eig.eigenvectors.column(order[1]).into_owned()),
    })
}

/// Angle of each pixel's in-plane projection with respect to `e1`.
/// Pixels whose projection is numerically zero are skipped.
pub fn project_angles(od: &OdPixels, basis: &PlaneBasis) -> Vec<f64> {
    od.iter()
        .filter_map(|p| {
            let v = Vector3::from(*p);
            let t1 = v.dot(&basis.e1);
            let t2 = v.dot(&basis.e2);
            if t1.hypot(t2) < 1e-12 {
                None
            } else {
                Some(t2.atan2(t1))
            }
        })
        .collect()
}

/// The `alpha`-th and `(100 - alpha)`-th percentiles of the angle list,
/// with linear interpolation between closest order statistics.
pub fn robust_extremes(angles: &[f64], alpha: f64) -> Result<(f64, f64), StainError> {
    if angles.is_empty() {
        return Err(StainError::EmptyAngles);
    }
    let mut sorted = angles.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((
        percentile_sorted(&sorted, alpha),
        percentile_sorted(&sorted, 100.0 - alpha),
    ))
}

/// Percentile by linear interpolation between closest order statistics;
/// `sorted` must be ascending and non-empty, `p` in [0, 100].
pub(crate) fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = (p / 100.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Map two extreme plane angles back to OD-space stain vectors and
/// assemble the stain matrix. Components that dip below zero from noise
/// are clamped into the non-negative orthant.
pub(crate) fn stain_matrix_from_extremes(
    basis: &PlaneBasis,
    phi_min: f64,
    phi_max: f64,
) -> Result<StainMatrix, StainError> {
    let direction = |phi: f64| -> Result<[f64; 3], StainError> {
        let v = basis.e1 * phi.cos() + basis.e2 * phi.sin();
        let clamped = v.map(|c| c.max(0.0));
        if clamped.norm() < 1e-6 {
            return Err(StainError::DegenerateStains);
        }
        Ok(clamped.into())
    };
    let sm = StainMatrix::new(direction(phi_min)?, direction(phi_max)?)?;
    if sm.column_separation_sin() < 1e-6 {
        return Err(StainError::DegenerateStains);
    }
    Ok(sm)
}

/// Single-image fit: stain matrix plus robust max concentrations.
pub(crate) struct SingleFit {
    pub(crate) stain_matrix: StainMatrix,
    pub(crate) max_c: [f64; 2],
}

/// Run the estimation chain on pixels that have already been
/// beta-filtered.
pub(crate) fn fit_filtered(
    filtered: &OdPixels,
    params: &EstimatorParams,
) -> Result<SingleFit, StainError> {
    if filtered.count() < params.min_tissue_pixels {
        return Err(StainError::InsufficientTissue {
            found: filtered.count(),
            required: params.min_tissue_pixels,
        });
    }
    let basis = plane_basis(filtered)?;
    let angles = project_angles(filtered, &basis);
    let (phi_min, phi_max) = robust_extremes(&angles, params.alpha)?;
    if (phi_max - phi_min).abs() < MIN_ANGLE_SPREAD {
        return Err(StainError::DegenerateStains);
    }
    let stain_matrix = stain_matrix_from_extremes(&basis, phi_min, phi_max)?;
    let max_c = max_concentrations_od(filtered, &stain_matrix)?;
    Ok(SingleFit {
        stain_matrix,
        max_c,
    })
}

/// Full estimation pipeline for one image: OD conversion, tissue filter,
/// dominant plane, angle extremes, stain matrix.
pub fn estimate_stain_matrix(
    image: &RgbImage,
    params: &EstimatorParams,
) -> Result<StainMatrix, StainError> {
    params.validate()?;
    let od = rgb_to_od(image, params.i0)?;
    let filtered = filter_od(&od, params.beta);
    fit_filtered(&filtered, params).map(|fit| fit.stain_matrix)
}

/// Robust per-stain maximum concentration of an image: the 99th
/// percentile of each concentration row over the beta-filtered pixels.
pub fn max_concentrations(
    image: &RgbImage,
    v: &StainMatrix,
    params: &EstimatorParams,
) -> Result<[f64; 2], StainError> {
    params.validate()?;
    let od = rgb_to_od(image, params.i0)?;
    let filtered = filter_od(&od, params.beta);
    if filtered.count() < params.min_tissue_pixels {
        return Err(StainError::InsufficientTissue {
            found: filtered.count(),
            required: params.min_tissue_pixels,
        });
    }
    max_concentrations_od(&filtered, v)
}

/// As [`max_concentrations`], operating directly on pixels the caller
/// has already filtered.
pub fn max_concentrations_od(od: &OdPixels, v: &StainMatrix) -> Result<[f64; 2], StainError> {
    if od.is_empty() {
        return Err(StainError::InsufficientTissue {
            found: 0,
            required: 1,
        });
    }
    let s = deconvolve(od, v)?;
    let mut out = [0.0; 2];
    for (stain, slot) in out.iter_mut().enumerate() {
        let mut row: Vec<f64> = s.stain_row(stain).collect();
        row.sort_by(f64::total_cmp);
        *slot = percentile_sorted(&row, MAX_C_PERCENTILE);
    }
    Ok(out)
}
