//! Fitting a normalization target from a set of reference images.
//!
//! Four strategies turn a reference set into a usable target:
//!
//! * **Stochastic** — fit every reference individually and pick one at
//!   random for each image to be normalized, from a seeded sequence.
//! * **Concat** — pool the OD pixels of all references into one multiset
//!   and run the single-image estimation on the pool. The estimator is
//!   geometry-free, so pooling is equivalent to stitching the references
//!   into one large image.
//! * **Avg-pre** — average the per-image plane bases, re-orthonormalize,
//!   then compute the angle extremes from the pooled OD pixels projected
//!   in the averaged plane.
//! * **Avg-post** — fit every reference individually and average the
//!   resulting stain matrices element-wise (renormalizing each column),
//!   along with the per-stain max concentrations.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::StainError;
use crate::estimator::{
    filter_od, fit_filtered, max_concentrations_od, plane_basis, project_angles, robust_extremes,
    stain_matrix_from_extremes, EstimatorParams, PlaneBasis, SingleFit,
};
use crate::image::RgbImage;
use crate::od::{rgb_to_od, OdPixels};
use crate::stain::StainMatrix;

/// How a multi-reference target is built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StrategyKind {
    /// Redraw a reference per normalization call from a seeded sequence.
    Stochastic { seed: u64 },
    Concat,
    AvgPre,
    AvgPost,
}

/// String tag identifying how a profile was fitted; `Macenko` is the
/// single-reference baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyTag {
    Macenko,
    Stochastic,
    Concat,
    AvgPre,
    AvgPost,
}

impl StrategyTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyTag::Macenko => "macenko",
            StrategyTag::Stochastic => "stochastic",
            StrategyTag::Concat => "concat",
            StrategyTag::AvgPre => "avg-pre",
            StrategyTag::AvgPost => "avg-post",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "macenko" => Some(StrategyTag::Macenko),
            "stochastic" => Some(StrategyTag::Stochastic),
            "concat" => Some(StrategyTag::Concat),
            "avg-pre" => Some(StrategyTag::AvgPre),
            "avg-post" => Some(StrategyTag::AvgPost),
            _ => None,
        }
    }
}

/// A fitted normalization target: reference stain matrix plus the robust
/// max concentrations used to match dynamic range.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceProfile {
    pub stain_matrix: StainMatrix,
    pub max_c: [f64; 2],
    pub strategy: StrategyTag,
    pub source_count: usize,
}

/// A fitted stochastic target: one profile per reference image plus the
/// seeded draw sequence.
#[derive(Debug)]
pub struct StochasticProfile {
    references: Vec<(StainMatrix, [f64; 2])>,
    seed: u64,
    next_draw: AtomicU64,
}

impl Clone for StochasticProfile {
    fn clone(&self) -> Self {
        Self {
            references: self.references.clone(),
            seed: self.seed,
            next_draw: AtomicU64::new(self.next_draw.load(Ordering::Relaxed)),
        }
    }
}

impl StochasticProfile {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn source_count(&self) -> usize {
        self.references.len()
    }

    pub fn reference(&self, index: usize) -> (&StainMatrix, [f64; 2]) {
        let (m, c) = &self.references[index];
        (m, *c)
    }

    pub(crate) fn from_parts(references: Vec<(StainMatrix, [f64; 2])>, seed: u64) -> Self {
        Self {
            references,
            seed,
            next_draw: AtomicU64::new(0),
        }
    }

    /// All per-reference targets in reference-set order.
    pub fn references(&self) -> &[(StainMatrix, [f64; 2])] {
        &self.references
    }

    /// Reference index drawn at position `draw_index` of the seeded
    /// sequence. Stateless: the same `(seed, draw_index)` always selects
    /// the same reference, regardless of call order or thread count.
    pub fn draw(&self, draw_index: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(draw_index);
        rng.random_range(0..self.references.len())
    }

    /// Position in the draw sequence for the next sequential
    /// normalization call.
    pub(crate) fn next_draw_index(&self) -> u64 {
        self.next_draw.fetch_add(1, Ordering::Relaxed)
    }
}

/// Either a fixed single-matrix target or a stochastic per-call target.
#[derive(Debug, Clone)]
pub enum FittedProfile {
    Fixed(ReferenceProfile),
    Stochastic(StochasticProfile),
}

impl From<ReferenceProfile> for FittedProfile {
    fn from(p: ReferenceProfile) -> Self {
        FittedProfile::Fixed(p)
    }
}

impl FittedProfile {
    pub fn strategy(&self) -> StrategyTag {
        match self {
            FittedProfile::Fixed(p) => p.strategy,
            FittedProfile::Stochastic(_) => StrategyTag::Stochastic,
        }
    }

    pub fn source_count(&self) -> usize {
        match self {
            FittedProfile::Fixed(p) => p.source_count,
            FittedProfile::Stochastic(p) => p.source_count(),
        }
    }
}

/// An ordered, non-empty set of reference images.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    images: Vec<RgbImage>,
}

impl ReferenceSet {
    pub fn new(images: Vec<RgbImage>) -> Result<Self, StainError> {
        if images.is_empty() {
            return Err(StainError::InvalidParams(
                "reference set must contain at least one image".into(),
            ));
        }
        for (i, img) in images.iter().enumerate() {
            if img.pixel_count() == 0 {
                return Err(StainError::EmptyImage.for_reference(i));
            }
        }
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn images(&self) -> &[RgbImage] {
        &self.images
    }
}

/// Fit the single-reference Macenko baseline from one image.
pub fn fit_macenko(
    image: &RgbImage,
    params: &EstimatorParams,
) -> Result<ReferenceProfile, StainError> {
    params.validate()?;
    let od = rgb_to_od(image, params.i0)?;
    let filtered = filter_od(&od, params.beta);
    let fit = fit_filtered(&filtered, params)?;
    Ok(ReferenceProfile {
        stain_matrix: fit.stain_matrix,
        max_c: fit.max_c,
        strategy: StrategyTag::Macenko,
        source_count: 1,
    })
}

/// Dispatch to the strategy-specific fit.
pub fn fit(
    refs: &ReferenceSet,
    strategy: &StrategyKind,
    params: &EstimatorParams,
) -> Result<FittedProfile, StainError> {
    match strategy {
        StrategyKind::Stochastic { seed } => {
            fit_stochastic(refs, params, *seed).map(FittedProfile::Stochastic)
        }
        StrategyKind::Concat => fit_concat(refs, params).map(FittedProfile::Fixed),
        StrategyKind::AvgPre => fit_avg_pre(refs, params).map(FittedProfile::Fixed),
        StrategyKind::AvgPost => fit_avg_post(refs, params).map(FittedProfile::Fixed),
    }
}

/// Beta-filtered OD pixels of every reference, fitted in parallel but
/// reported in index order so error attribution is deterministic.
fn filtered_references(
    refs: &ReferenceSet,
    params: &EstimatorParams,
) -> Result<Vec<OdPixels>, StainError> {
    let results: Vec<Result<OdPixels, StainError>> = refs
        .images()
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let od = rgb_to_od(img, params.i0).map_err(|e| e.for_reference(i))?;
            Ok(filter_od(&od, params.beta))
        })
        .collect();
    results.into_iter().collect()
}

/// Full per-image fits, in parallel, first error by index wins.
fn fit_references(
    refs: &ReferenceSet,
    params: &EstimatorParams,
) -> Result<Vec<SingleFit>, StainError> {
    let results: Vec<Result<SingleFit, StainError>> = refs
        .images()
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let od = rgb_to_od(img, params.i0).map_err(|e| e.for_reference(i))?;
            let filtered = filter_od(&od, params.beta);
            fit_filtered(&filtered, params).map_err(|e| e.for_reference(i))
        })
        .collect();
    results.into_iter().collect()
}

/// Fit every reference individually; normalization calls then draw one
/// of them per image from the sequence seeded by `seed`.
pub fn fit_stochastic(
    refs: &ReferenceSet,
    params: &EstimatorParams,
    seed: u64,
) -> Result<StochasticProfile, StainError> {
    params.validate()?;
    let fits = fit_references(refs, params)?;
    let references = fits
        .into_iter()
        .map(|f| (f.stain_matrix, f.max_c))
        .collect();
    Ok(StochasticProfile::from_parts(references, seed))
}

/// Pool the OD pixels of all references and estimate on the pool.
pub fn fit_concat(
    refs: &ReferenceSet,
    params: &EstimatorParams,
) -> Result<ReferenceProfile, StainError> {
    params.validate()?;
    let filtered = filtered_references(refs, params)?;
    let mut pooled = Vec::new();
    for f in &filtered {
        pooled.extend_from_slice(f.values());
    }
    let fit = fit_filtered(&OdPixels::from_values(pooled), params)?;
    Ok(ReferenceProfile {
        stain_matrix: fit.stain_matrix,
        max_c: fit.max_c,
        strategy: StrategyTag::Concat,
        source_count: refs.len(),
    })
}

/// Average per-image plane bases (sign-fixed e1 and e2 separately),
/// re-orthonormalize by Gram-Schmidt with e1 as the anchor.
pub fn average_plane_bases(bases: &[PlaneBasis]) -> Result<PlaneBasis, StainError> {
    match bases {
        [] => Err(StainError::InvalidParams(
            "no plane bases to average".into(),
        )),
        [single] => Ok(single.clone()),
        _ => {
            let n = bases.len() as f64;
            let mut sum1 = Vector3::zeros();
            let mut sum2 = Vector3::zeros();
            for b in bases {
                sum1 += b.e1_vec();
                sum2 += b.e2_vec();
            }
            let mean1 = sum1 / n;
            let mean2 = sum2 / n;
            if mean1.norm() < 1e-9 {
                return Err(StainError::DegenerateBasis);
            }
            let u1 = mean1.normalize();
            let ortho = mean2 - u1 * mean2.dot(&u1);
            if ortho.norm() < 1e-9 {
                return Err(StainError::DegenerateBasis);
            }
            PlaneBasis::new(u1.into(), ortho.normalize().into())
        }
    }
}

/// Average the main plane directions of each reference, then extract the
/// angle extremes from the pooled OD pixels projected in that plane.
pub fn fit_avg_pre(
    refs: &ReferenceSet,
    params: &EstimatorParams,
) -> Result<ReferenceProfile, StainError> {
    params.validate()?;
    let filtered = filtered_references(refs, params)?;
    let mut bases = Vec::with_capacity(filtered.len());
    for (i, f) in filtered.iter().enumerate() {
        if f.count() < params.min_tissue_pixels {
            return Err(StainError::InsufficientTissue {
                found: f.count(),
                required: params.min_tissue_pixels,
            }
            .for_reference(i));
        }
        bases.push(plane_basis(f).map_err(|e| e.for_reference(i))?);
    }
    let basis = average_plane_bases(&bases)?;

    let mut pooled = Vec::new();
    for f in &filtered {
        pooled.extend_from_slice(f.values());
    }
    let pooled = OdPixels::from_values(pooled);
    let angles = project_angles(&pooled, &basis);
    let (phi_min, phi_max) = robust_extremes(&angles, params.alpha)?;
    if (phi_max - phi_min).abs() < 1e-3 {
        return Err(StainError::DegenerateStains);
    }
    let stain_matrix = stain_matrix_from_extremes(&basis, phi_min, phi_max)?;
    let max_c = max_concentrations_od(&pooled, &stain_matrix)?;
    Ok(ReferenceProfile {
        stain_matrix,
        max_c,
        strategy: StrategyTag::AvgPre,
        source_count: refs.len(),
    })
}

/// Element-wise mean of fitted stain matrices (columns renormalized to
/// unit length) and of the max-concentration pairs.
///
/// Columns are averaged slot-by-slot; every input matrix already has its
/// hematoxylin column first, so slots correspond across inputs and the
/// mean preserves that ordering.
pub fn average_stain_profiles(
    entries: &[(StainMatrix, [f64; 2])],
) -> Result<(StainMatrix, [f64; 2]), StainError> {
    match entries {
        [] => Err(StainError::InvalidParams("no profiles to average".into())),
        [single] => Ok(single.clone()),
        _ => {
            let n = entries.len() as f64;
            let mut sum_h = Vector3::zeros();
            let mut sum_e = Vector3::zeros();
            let mut sum_c = [0.0f64; 2];
            for (m, c) in entries {
                sum_h += Vector3::from(m.hematoxylin());
                sum_e += Vector3::from(m.eosin());
                sum_c[0] += c[0];
                sum_c[1] += c[1];
            }
            let matrix = StainMatrix::new((sum_h / n).into(), (sum_e / n).into())?;
            Ok((matrix, [sum_c[0] / n, sum_c[1] / n]))
        }
    }
}

/// Fit every reference individually and use the averaged stain matrix
/// (and averaged max concentrations) as the target.
pub fn fit_avg_post(
    refs: &ReferenceSet,
    params: &EstimatorParams,
) -> Result<ReferenceProfile, StainError> {
    params.validate()?;
    let fits = fit_references(refs, params)?;
    let entries: Vec<(StainMatrix, [f64; 2])> = fits
        .into_iter()
        .map(|f| (f.stain_matrix, f.max_c))
        .collect();
    let (stain_matrix, max_c) = average_stain_profiles(&entries)?;
    Ok(ReferenceProfile {
        stain_matrix,
        max_c,
        strategy: StrategyTag::AvgPost,
        source_count: refs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_set_rejects_empty_list() {
        assert!(ReferenceSet::new(vec![]).is_err());
    }

    #[test]
    fn reference_set_rejects_empty_image() {
        let empty = RgbImage::new(0, 0, vec![]).unwrap();
        let err = ReferenceSet::new(vec![empty]).unwrap_err();
        assert!(matches!(err, StainError::Reference { index: 0, .. }));
    }

    #[test]
    fn strategy_tags_roundtrip() {
        for tag in [
            StrategyTag::Macenko,
            StrategyTag::Stochastic,
            StrategyTag::Concat,
            StrategyTag::AvgPre,
            StrategyTag::AvgPost,
        ] {
            assert_eq!(StrategyTag::parse(tag.as_str()), Some(tag));
        }
        assert_eq!(StrategyTag::parse("nope"), None);
    }

    #[test]
    fn averaging_hand_built_matrices_matches_scalar_arithmetic() {
        let v1 = StainMatrix::new([0.70, 0.65, 0.30], [0.10, 0.90, 0.42]).unwrap();
        let v2 = StainMatrix::new([0.60, 0.72, 0.34], [0.20, 0.82, 0.50]).unwrap();
        let (avg, max_c) =
            average_stain_profiles(&[(v1.clone(), [1.5, 0.9]), (v2.clone(), [2.1, 1.3])]).unwrap();

        // Independent element-wise computation on the six numbers.
        let expect = |a: [f64; 3], b: [f64; 3]| -> [f64; 3] {
            let m = [
                (a[0] + b[0]) / 2.0,
                (a[1] + b[1]) / 2.0,
                (a[2] + b[2]) / 2.0,
            ];
            let norm = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
            [m[0] / norm, m[1] / norm, m[2] / norm]
        };
        let eh = expect(v1.hematoxylin(), v2.hematoxylin());
        let ee = expect(v1.eosin(), v2.eosin());
        for k in 0..3 {
            assert!((avg.hematoxylin()[k] - eh[k]).abs() < 1e-12);
            assert!((avg.eosin()[k] - ee[k]).abs() < 1e-12);
        }
        assert!((max_c[0] - 1.8).abs() < 1e-12);
        assert!((max_c[1] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn averaging_is_independent_of_input_label_order() {
        // Swapping the constructor arguments of one input must not change
        // the result; the ordering rule normalizes slots per matrix.
        let v1 = StainMatrix::new([0.70, 0.65, 0.30], [0.10, 0.90, 0.42]).unwrap();
        let v1_swapped = StainMatrix::new([0.10, 0.90, 0.42], [0.70, 0.65, 0.30]).unwrap();
        let v2 = StainMatrix::new([0.60, 0.72, 0.34], [0.20, 0.82, 0.50]).unwrap();
        let a = average_stain_profiles(&[(v1, [1.0, 1.0]), (v2.clone(), [1.0, 1.0])]).unwrap();
        let b = average_stain_profiles(&[(v1_swapped, [1.0, 1.0]), (v2, [1.0, 1.0])]).unwrap();
        assert_eq!(a.0.to_column_major(), b.0.to_column_major());
    }

    #[test]
    fn averaged_columns_stay_in_componentwise_hull() {
        let v1 = StainMatrix::new([0.70, 0.65, 0.30], [0.10, 0.90, 0.42]).unwrap();
        let v2 = StainMatrix::new([0.60, 0.72, 0.34], [0.20, 0.82, 0.50]).unwrap();
        let entries = [(v1.clone(), [1.0, 1.0]), (v2.clone(), [1.0, 1.0])];
        let (avg, _) = average_stain_profiles(&entries).unwrap();
        // Before renormalization the mean is inside the hull; after
        // renormalization (scale >= 1) components remain non-negative.
        for col in avg.columns() {
            for c in col {
                assert!(c >= -1e-9);
            }
        }
    }

    #[test]
    fn singleton_average_is_bit_exact() {
        let v = StainMatrix::new([0.70, 0.65, 0.30], [0.10, 0.90, 0.42]).unwrap();
        let (avg, max_c) = average_stain_profiles(&[(v.clone(), [1.5, 0.9])]).unwrap();
        assert_eq!(avg.to_column_major(), v.to_column_major());
        assert_eq!(max_c, [1.5, 0.9]);
    }

    #[test]
    fn averaged_bases_bisect_symmetric_rotations() {
        // Two bases rotated by +/- theta about a shared axis average to
        // the middle plane.
        let e1 = [1.0, 0.0, 0.0];
        let e2 = [0.0, 1.0, 0.0];
        let theta: f64 = 0.3;
        let rotate = |v: [f64; 3], t: f64| -> [f64; 3] {
            // rotation about the y axis
            [
                v[0] * t.cos() + v[2] * t.sin(),
                v[1],
                -v[0] * t.sin() + v[2] * t.cos(),
            ]
        };
        let plus = PlaneBasis::new(rotate(e1, theta), e2).unwrap();
        let minus = PlaneBasis::new(rotate(e1, -theta), e2).unwrap();
        let avg = average_plane_bases(&[plus, minus]).unwrap();
        for k in 0..3 {
            assert!((avg.e1()[k] - e1[k]).abs() < 1e-9, "e1 = {:?}", avg.e1());
            assert!((avg.e2()[k] - e2[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn opposed_bases_cannot_be_averaged() {
        let a = PlaneBasis::new([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]).unwrap();
        let b = PlaneBasis::new([0.0, 1.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
        // Averaged e1 and e2 are both along (1,1,0); Gram-Schmidt
        // collapses.
        assert!(matches!(
            average_plane_bases(&[a, b]),
            Err(StainError::DegenerateBasis)
        ));
    }

    #[test]
    fn stochastic_draws_are_uniform_and_deterministic() {
        let refs: Vec<(StainMatrix, [f64; 2])> = (0..4)
            .map(|k| {
                let shift = k as f64 * 0.02;
                (
                    StainMatrix::new(
                        [0.70 + shift, 0.65, 0.30],
                        [0.10, 0.90 - shift, 0.42],
                    )
                    .unwrap(),
                    [1.0, 1.0],
                )
            })
            .collect();
        let profile = StochasticProfile::from_parts(refs, 99);
        let mut counts = [0usize; 4];
        for k in 0..10_000u64 {
            counts[profile.draw(k)] += 1;
        }
        for c in counts {
            assert!(
                (c as i64 - 2500).unsigned_abs() <= 150,
                "counts = {counts:?}"
            );
        }
        // Same seed, same sequence.
        let again = StochasticProfile::from_parts(profile.references().to_vec(), 99);
        for k in 0..100u64 {
            assert_eq!(profile.draw(k), again.draw(k));
        }
    }
}
