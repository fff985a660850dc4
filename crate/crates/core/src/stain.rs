//! Stain matrices, least-squares color deconvolution, and image
//! reconstruction.

use nalgebra::{Matrix2, Matrix3x2, Vector2, Vector3};

use crate::error::StainError;
use crate::image::RgbImage;
use crate::od::{od_to_rgb, OdPixels};

/// Columns closer than this (in sine of the inter-column angle) are
/// treated as collinear.
const COLLINEARITY_TOL: f64 = 1e-6;

/// A 3x2 matrix of unit-norm stain vectors in OD space.
///
/// Column 0 is hematoxylin, column 1 is eosin. Hematoxylin absorbs red
/// light more strongly, so the column with the larger red OD component
/// is assigned to slot 0 (ties broken by the green component);
/// constructors apply this ordering automatically.
#[derive(Debug, Clone, PartialEq)]
pub struct StainMatrix {
    hematoxylin: Vector3<f64>,
    eosin: Vector3<f64>,
}

impl StainMatrix {
    /// Build from two stain direction vectors. Each is normalized to unit
    /// length and the pair is ordered by the hematoxylin/eosin rule.
    pub fn new(a: [f64; 3], b: [f64; 3]) -> Result<Self, StainError> {
        let a = normalize_column(a)?;
        let b = normalize_column(b)?;
        let (h, e) = order_h_e(a, b);
        Ok(Self {
            hematoxylin: h,
            eosin: e,
        })
    }

    /// Rebuild from six column-major numbers (hematoxylin column first)
    /// that already satisfy the type's invariants. Values are validated
    /// but not modified, so persisted matrices round-trip bit-exactly.
    pub fn from_column_major(values: [f64; 6]) -> Result<Self, StainError> {
        let h = Vector3::new(values[0], values[1], values[2]);
        let e = Vector3::new(values[3], values[4], values[5]);
        for v in [&h, &e] {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(StainError::InvalidParams(
                    "stain vector has non-finite components".into(),
                ));
            }
            if (v.norm() - 1.0).abs() > 1e-9 {
                return Err(StainError::InvalidParams(
                    "stain vector is not unit length".into(),
                ));
            }
        }
        let (h_ord, e_ord) = order_h_e(h, e);
        if h_ord != h {
            return Err(StainError::InvalidParams(
                "stain columns are not in hematoxylin/eosin order".into(),
            ));
        }
        Ok(Self {
            hematoxylin: h_ord,
            eosin: e_ord,
        })
    }

    pub fn hematoxylin(&self) -> [f64; 3] {
        self.hematoxylin.into()
    }

    pub fn eosin(&self) -> [f64; 3] {
        self.eosin.into()
    }

    /// Columns as arrays, hematoxylin first.
    pub fn columns(&self) -> [[f64; 3]; 2] {
        [self.hematoxylin(), self.eosin()]
    }

    /// Six column-major numbers, hematoxylin column first.
    pub fn to_column_major(&self) -> [f64; 6] {
        let h = self.hematoxylin;
        let e = self.eosin;
        [h[0], h[1], h[2], e[0], e[1], e[2]]
    }

    pub(crate) fn matrix(&self) -> Matrix3x2<f64> {
        Matrix3x2::from_columns(&[self.hematoxylin, self.eosin])
    }

    /// Sine of the angle between the two columns; near zero means the
    /// matrix cannot separate two stains.
    pub fn column_separation_sin(&self) -> f64 {
        self.hematoxylin.cross(&self.eosin).norm()
    }

    /// Unit normal of the plane spanned by the two columns.
    ///
    /// # Panics
    /// Panics if the columns are collinear.
    pub fn plane_normal(&self) -> [f64; 3] {
        let n = self.hematoxylin.cross(&self.eosin);
        assert!(n.norm() > 1e-12, "collinear stain columns have no plane");
        n.normalize().into()
    }
}

fn normalize_column(v: [f64; 3]) -> Result<Vector3<f64>, StainError> {
    let v = Vector3::from(v);
    if !v.iter().all(|c| c.is_finite()) {
        return Err(StainError::InvalidParams(
            "stain vector has non-finite components".into(),
        ));
    }
    let norm = v.norm();
    if norm < 1e-12 {
        return Err(StainError::SingularStainMatrix);
    }
    Ok(v / norm)
}

fn order_h_e(a: Vector3<f64>, b: Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a_first = match a[0].partial_cmp(&b[0]) {
        Some(std::cmp::Ordering::Greater) => true,
        Some(std::cmp::Ordering::Less) => false,
        _ => a[1] >= b[1],
    };
    if a_first {
        (a, b)
    } else {
        (b, a)
    }
}

/// Per-pixel stain concentrations, two stains per pixel in the same
/// order as the stain matrix columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationMatrix {
    values: Vec<[f64; 2]>,
}

impl ConcentrationMatrix {
    pub fn from_values(values: Vec<[f64; 2]>) -> Self {
        Self { values }
    }

    pub fn stain_count(&self) -> usize {
        2
    }

    pub fn pixel_count(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[[f64; 2]] {
        &self.values
    }

    pub fn get(&self, pixel: usize) -> [f64; 2] {
        self.values[pixel]
    }

    /// All concentrations of one stain across pixels.
    pub fn stain_row(&self, stain: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().map(move |v| v[stain])
    }

    /// Scale each stain row by its own factor.
    pub fn scale_rows(&mut self, factors: [f64; 2]) {
        for v in &mut self.values {
            v[0] *= factors[0];
            v[1] *= factors[1];
        }
    }
}

/// Recover stain concentrations from OD pixels by the least-squares
/// solve `S = (VᵀV)⁻¹ Vᵀ od`.
///
/// The stain matrix is 3x2, so the inverse in `S = V⁻¹ I_OD` is realized
/// as the Moore-Penrose pseudo-inverse via closed-form 2x2 normal
/// equations. Concentrations may come out slightly negative; they are
/// preserved here and clamped only at reconstruction.
pub fn deconvolve(od: &OdPixels, v: &StainMatrix) -> Result<ConcentrationMatrix, StainError> {
    let pinv = pseudo_inverse(v)?;
    let values = od
        .iter()
        .map(|p| {
            let s: Vector2<f64> = pinv * Vector3::from(*p);
            [s[0], s[1]]
        })
        .collect();
    Ok(ConcentrationMatrix { values })
}

pub(crate) fn pseudo_inverse(v: &StainMatrix) -> Result<nalgebra::Matrix2x3<f64>, StainError> {
    if v.column_separation_sin() < COLLINEARITY_TOL {
        return Err(StainError::SingularStainMatrix);
    }
    let m = v.matrix();
    let gram: Matrix2<f64> = m.transpose() * m;
    let gram_inv = gram.try_inverse().ok_or(StainError::SingularStainMatrix)?;
    Ok(gram_inv * m.transpose())
}

/// Re-render concentrations under a reference stain matrix:
/// `od = V_ref * max(S, 0)`, then back to 8-bit RGB.
pub fn reconstruct(
    s: &ConcentrationMatrix,
    v_ref: &StainMatrix,
    i0: f64,
    width: usize,
    height: usize,
) -> Result<RgbImage, StainError> {
    let od = reconstruct_od(s, v_ref, width, height)?;
    od_to_rgb(&od, i0, width, height)
}

/// The OD-domain half of [`reconstruct`], before quantization.
pub fn reconstruct_od(
    s: &ConcentrationMatrix,
    v_ref: &StainMatrix,
    width: usize,
    height: usize,
) -> Result<OdPixels, StainError> {
    let expected = width * height;
    if s.pixel_count() != expected {
        return Err(StainError::DimensionMismatch {
            expected,
            actual: s.pixel_count(),
        });
    }
    let m = v_ref.matrix();
    let values = s
        .values()
        .iter()
        .map(|c| {
            let clamped = Vector2::new(c[0].max(0.0), c[1].max(0.0));
            let od: Vector3<f64> = m * clamped;
            [od[0], od[1], od[2]]
        })
        .collect();
    Ok(OdPixels::from_values(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Test-side oracle: solve the 2x2 normal equations with plain scalar
    // arithmetic (Cramer's rule), independent of the nalgebra path.
    fn normal_equations_scalar(v: &StainMatrix, od: [f64; 3]) -> [f64; 2] {
        let [h, e] = v.columns();
        let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let g00 = dot(h, h);
        let g01 = dot(h, e);
        let g11 = dot(e, e);
        let det = g00 * g11 - g01 * g01;
        let r0 = dot(h, od);
        let r1 = dot(e, od);
        [(g11 * r0 - g01 * r1) / det, (g00 * r1 - g01 * r0) / det]
    }

    fn test_matrix() -> StainMatrix {
        StainMatrix::new([0.65, 0.70, 0.29], [0.07, 0.99, 0.11]).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng) -> StainMatrix {
        loop {
            let col = |rng: &mut ChaCha8Rng| {
                [
                    rng.random_range(0.05..1.0),
                    rng.random_range(0.05..1.0),
                    rng.random_range(0.05..1.0),
                ]
            };
            let m = StainMatrix::new(col(rng), col(rng)).unwrap();
            if m.column_separation_sin() > 0.1 {
                return m;
            }
        }
    }

    #[test]
    fn columns_are_unit_norm_and_ordered() {
        let m = StainMatrix::new([0.0, 2.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
        // The second input has the larger red component, so it becomes
        // hematoxylin.
        assert_eq!(m.hematoxylin(), [1.0, 0.0, 0.0]);
        assert_eq!(m.eosin(), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn ordering_breaks_red_ties_by_green() {
        let m = StainMatrix::new([0.0, 0.0, 1.0], [0.0, 1.0, 0.0]).unwrap();
        assert_eq!(m.hematoxylin(), [0.0, 1.0, 0.0]);
        assert_eq!(m.eosin(), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_column_is_singular() {
        assert!(matches!(
            StainMatrix::new([0.0; 3], [1.0, 0.0, 0.0]),
            Err(StainError::SingularStainMatrix)
        ));
    }

    #[test]
    fn exact_model_pixel_recovers_concentrations() {
        let v = test_matrix();
        let [h, e] = v.columns();
        let od = OdPixels::from_values(vec![[
            h[0] + 2.0 * e[0],
            h[1] + 2.0 * e[1],
            h[2] + 2.0 * e[2],
        ]]);
        let s = deconvolve(&od, &v).unwrap();
        assert!((s.get(0)[0] - 1.0).abs() < 1e-10);
        assert!((s.get(0)[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn zero_od_gives_zero_concentrations() {
        let v = test_matrix();
        let od = OdPixels::from_values(vec![[0.0; 3]]);
        let s = deconvolve(&od, &v).unwrap();
        assert_eq!(s.get(0), [0.0, 0.0]);
    }

    #[test]
    fn deconvolve_matches_scalar_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let v = random_matrix(&mut rng);
            let od = [
                rng.random_range(0.0..3.0),
                rng.random_range(0.0..3.0),
                rng.random_range(0.0..3.0),
            ];
            let s = deconvolve(&OdPixels::from_values(vec![od]), &v).unwrap();
            let expected = normal_equations_scalar(&v, od);
            let scale = (expected[0].powi(2) + expected[1].powi(2)).sqrt().max(1e-12);
            for k in 0..2 {
                assert!(
                    (s.get(0)[k] - expected[k]).abs() / scale < 1e-9,
                    "got {:?}, expected {:?}",
                    s.get(0),
                    expected
                );
            }
        }
    }

    #[test]
    fn collinear_columns_are_rejected() {
        let od = OdPixels::from_values(vec![[0.5; 3]]);
        // Construct two nearly identical directions through the raw
        // constructor path.
        let v = StainMatrix::new([0.6, 0.7, 0.38], [0.6, 0.7, 0.38]).unwrap();
        assert!(matches!(
            deconvolve(&od, &v),
            Err(StainError::SingularStainMatrix)
        ));
    }

    #[test]
    fn zero_concentrations_reconstruct_to_white() {
        let v = test_matrix();
        let s = ConcentrationMatrix::from_values(vec![[0.0, 0.0]; 4]);
        let img = reconstruct(&s, &v, 255.0, 2, 2).unwrap();
        assert!(img.data().iter().all(|&b| b == 255));
    }

    #[test]
    fn negative_concentrations_are_clamped_at_reconstruction() {
        let v = test_matrix();
        let s = ConcentrationMatrix::from_values(vec![[-0.5, -1.0]]);
        let img = reconstruct(&s, &v, 255.0, 1, 1).unwrap();
        assert_eq!(img.pixel(0), [255, 255, 255]);
    }

    #[test]
    fn hand_checked_single_pixel_reconstruction() {
        // s = (1, 0) against a hematoxylin column along (0.7, 0.7, 0.14):
        // od = that column, rgb = round(255 * 10^-od) = (51, 51, 185).
        let v = StainMatrix::new([0.7, 0.7, 0.14], [0.07, 0.99, 0.11]).unwrap();
        let s = ConcentrationMatrix::from_values(vec![[1.0, 0.0]]);
        let img = reconstruct(&s, &v, 255.0, 1, 1).unwrap();
        assert_eq!(img.pixel(0), [51, 51, 185]);
    }

    #[test]
    fn reconstruct_checks_dimensions() {
        let v = test_matrix();
        let s = ConcentrationMatrix::from_values(vec![[1.0, 1.0]; 3]);
        assert!(matches!(
            reconstruct(&s, &v, 255.0, 2, 2),
            Err(StainError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn exact_recovery_of_synthesized_concentrations() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let v = random_matrix(&mut rng);
            let m = v.matrix();
            let truth: Vec<[f64; 2]> = (0..64)
                .map(|_| [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)])
                .collect();
            let od = OdPixels::from_values(
                truth
                    .iter()
                    .map(|c| {
                        let od = m * Vector2::new(c[0], c[1]);
                        [od[0], od[1], od[2]]
                    })
                    .collect(),
            );
            let s = deconvolve(&od, &v).unwrap();
            for (got, want) in s.values().iter().zip(&truth) {
                let scale = (want[0].powi(2) + want[1].powi(2)).sqrt().max(1.0);
                assert!((got[0] - want[0]).abs() / scale < 1e-9);
                assert!((got[1] - want[1]).abs() / scale < 1e-9);
            }
        }
    }

    #[test]
    fn deconvolution_is_least_squares_optimal() {
        // Perturbing the solution in any direction must not decrease the
        // residual norm.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let residual = |v: &StainMatrix, od: [f64; 3], s: [f64; 2]| -> f64 {
            let m = v.matrix();
            let r = Vector3::from(od) - m * Vector2::new(s[0], s[1]);
            r.norm()
        };
        for _ in 0..100 {
            let v = random_matrix(&mut rng);
            let od = [
                rng.random_range(0.0..2.5),
                rng.random_range(0.0..2.5),
                rng.random_range(0.0..2.5),
            ];
            let s = deconvolve(&OdPixels::from_values(vec![od]), &v).unwrap().get(0);
            let base = residual(&v, od, s);
            for delta in [
                [1e-6, 0.0],
                [-1e-6, 0.0],
                [0.0, 1e-6],
                [0.0, -1e-6],
                [1e-6, 1e-6],
                [-1e-6, 1e-6],
            ] {
                let perturbed = residual(&v, od, [s[0] + delta[0], s[1] + delta[1]]);
                assert!(perturbed - base >= -1e-12);
            }
        }
    }

    #[test]
    fn column_major_roundtrip_is_bit_exact() {
        let v = test_matrix();
        let cols = v.to_column_major();
        let back = StainMatrix::from_column_major(cols).unwrap();
        assert_eq!(v.to_column_major(), back.to_column_major());
    }

    #[test]
    fn column_major_rejects_unordered_columns() {
        let v = test_matrix();
        let c = v.to_column_major();
        let swapped = [c[3], c[4], c[5], c[0], c[1], c[2]];
        assert!(StainMatrix::from_column_major(swapped).is_err());
    }
}
