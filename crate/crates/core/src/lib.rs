//! Stain normalization for H&E histology images.
//!
//! The pipeline follows the classic Macenko recipe: pixel intensities are
//! mapped to optical density, the dominant OD plane is found from the
//! scatter of tissue pixels, robust angle percentiles in that plane give
//! the hematoxylin and eosin stain vectors, and images are re-rendered
//! under a reference stain matrix after least-squares deconvolution.
//!
//! On top of the single-reference baseline, [`multi_target`] fits a
//! normalization target from a *set* of reference images using one of
//! four strategies: per-call random choice, OD pixel pooling, basis
//! averaging before extraction, or stain-matrix averaging after
//! extraction.
//!
//! [`synth`] provides a forward Lambert-Beer image generator with known
//! ground truth, used throughout the test suite as an independent oracle.

pub mod error;
pub mod estimator;
pub mod image;
pub mod io;
pub mod multi_target;
pub mod normalizer;
pub mod od;
pub mod stain;
pub mod synth;

pub use error::{IoError, StainError};
pub use estimator::{
    estimate_stain_matrix, filter_od, max_concentrations, plane_basis, project_angles,
    robust_extremes, EstimatorParams, PlaneBasis,
};
pub use image::RgbImage;
pub use multi_target::{
    fit, fit_avg_post, fit_avg_pre, fit_concat, fit_macenko, fit_stochastic, FittedProfile,
    ReferenceProfile, ReferenceSet, StochasticProfile, StrategyKind, StrategyTag,
};
pub use normalizer::{normalize, normalize_batch, normalize_od, NormalizationResult};
pub use od::{od_to_rgb, rgb_to_od, OdPixels};
pub use stain::{deconvolve, reconstruct, ConcentrationMatrix, StainMatrix};
pub use synth::{synthesize, ConcentrationLaw, SynthSpec};
