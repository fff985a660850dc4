//! End-to-end normalization of a source image against a fitted profile.

use rayon::prelude::*;

use crate::error::StainError;
use crate::estimator::{filter_od, fit_filtered, EstimatorParams};
use crate::image::RgbImage;
use crate::multi_target::FittedProfile;
use crate::od::{od_to_rgb, rgb_to_od, OdPixels};
use crate::stain::{deconvolve, reconstruct_od, StainMatrix};

/// Output of one normalization: the re-rendered image plus what was
/// estimated from the source along the way.
#[derive(Debug, Clone)]
pub struct NormalizationResult {
    pub image: RgbImage,
    pub source_stain_matrix: StainMatrix,
    pub source_max_c: [f64; 2],
    /// Which reference was drawn; set only for stochastic profiles.
    pub chosen_reference_index: Option<usize>,
}

/// Normalize a source image against an explicit target matrix and max
/// concentrations, returning the OD-domain result before quantization.
///
/// The source stain matrix and max concentrations are estimated from the
/// beta-filtered tissue pixels, but every pixel of the image is
/// deconvolved and re-rendered: background pixels have near-zero
/// concentrations and come back near-white on their own.
pub fn normalize_od(
    source: &RgbImage,
    v_ref: &StainMatrix,
    max_c_ref: [f64; 2],
    params: &EstimatorParams,
) -> Result<(OdPixels, StainMatrix, [f64; 2]), StainError> {
    params.validate()?;
    let od_full = rgb_to_od(source, params.i0)?;
    let filtered = filter_od(&od_full, params.beta);
    let fit = fit_filtered(&filtered, params)?;
    let mut s = deconvolve(&od_full, &fit.stain_matrix)?;
    s.scale_rows([
        max_c_ref[0] / fit.max_c[0],
        max_c_ref[1] / fit.max_c[1],
    ]);
    let od_norm = reconstruct_od(&s, v_ref, source.width(), source.height())?;
    Ok((od_norm, fit.stain_matrix, fit.max_c))
}

fn normalize_with_target(
    source: &RgbImage,
    v_ref: &StainMatrix,
    max_c_ref: [f64; 2],
    params: &EstimatorParams,
    chosen_reference_index: Option<usize>,
) -> Result<NormalizationResult, StainError> {
    let (od_norm, source_stain_matrix, source_max_c) =
        normalize_od(source, v_ref, max_c_ref, params)?;
    let image = od_to_rgb(&od_norm, params.i0, source.width(), source.height())?;
    Ok(NormalizationResult {
        image,
        source_stain_matrix,
        source_max_c,
        chosen_reference_index,
    })
}

fn normalize_at_draw(
    source: &RgbImage,
    profile: &FittedProfile,
    params: &EstimatorParams,
    draw_index: u64,
) -> Result<NormalizationResult, StainError> {
    match profile {
        FittedProfile::Fixed(p) => {
            normalize_with_target(source, &p.stain_matrix, p.max_c, params, None)
        }
        FittedProfile::Stochastic(p) => {
            let idx = p.draw(draw_index);
            let (v, max_c) = p.reference(idx);
            normalize_with_target(source, v, max_c, params, Some(idx))
        }
    }
}

/// Normalize one image. For stochastic profiles each call consumes the
/// next position of the seeded draw sequence.
pub fn normalize(
    source: &RgbImage,
    profile: &FittedProfile,
    params: &EstimatorParams,
) -> Result<NormalizationResult, StainError> {
    let draw_index = match profile {
        FittedProfile::Fixed(_) => 0,
        FittedProfile::Stochastic(p) => p.next_draw_index(),
    };
    normalize_at_draw(source, profile, params, draw_index)
}

/// Normalize a batch. Failures are reported per index without aborting
/// the rest.
///
/// For stochastic profiles, job `k` always uses the `k`-th value of the
/// seeded draw sequence, so results are byte-identical regardless of how
/// many worker threads execute the batch.
pub fn normalize_batch(
    sources: &[RgbImage],
    profile: &FittedProfile,
    params: &EstimatorParams,
) -> Vec<Result<NormalizationResult, StainError>> {
    sources
        .par_iter()
        .enumerate()
        .map(|(k, src)| normalize_at_draw(src, profile, params, k as u64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multi_target::fit_macenko;

    #[test]
    fn all_white_source_has_no_tissue() {
        let tissue = crate::synth::SynthSpec::fixture(404).synthesize().unwrap().0;
        let profile = FittedProfile::Fixed(fit_macenko(&tissue, &EstimatorParams::default()).unwrap());
        let white = RgbImage::filled(64, 64, [255, 255, 255]);
        assert!(matches!(
            normalize(&white, &profile, &EstimatorParams::default()),
            Err(StainError::InsufficientTissue { .. })
        ));
    }

    #[test]
    fn output_dimensions_match_input() {
        let params = EstimatorParams::default();
        let (img, _) = crate::synth::SynthSpec::fixture(405).synthesize().unwrap();
        let profile = FittedProfile::Fixed(fit_macenko(&img, &params).unwrap());
        let result = normalize(&img, &profile, &params).unwrap();
        assert_eq!(result.image.width(), img.width());
        assert_eq!(result.image.height(), img.height());
        assert!(result.chosen_reference_index.is_none());
    }
}
