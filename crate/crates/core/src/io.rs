//! Image and profile persistence.
//!
//! Images are read from PNG or JPEG (8-bit, 3 or 4 channels) and always
//! written as lossless PNG. Profiles are stored as versioned UTF-8 JSON;
//! floats survive the round trip exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IoError, StainError};
use crate::estimator::EstimatorParams;
use crate::image::RgbImage;
use crate::multi_target::{FittedProfile, ReferenceProfile, StochasticProfile, StrategyTag};
use crate::stain::StainMatrix;

/// Current profile schema version.
pub const PROFILE_FORMAT_VERSION: u32 = 1;

/// Estimation parameters persisted with a profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileParams {
    pub beta: f64,
    pub alpha: f64,
    pub i0: f64,
}

/// One stochastic reference entry: stain matrix (column-major,
/// hematoxylin first) and per-stain max concentrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub stain_matrix: [f64; 6],
    pub max_c: [f64; 2],
}

/// On-disk profile schema.
///
/// Fixed strategies store the aggregate `stain_matrix` / `max_c`;
/// stochastic profiles instead store `seed` plus one entry per
/// reference, because the target is redrawn per normalized image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileDocument {
    pub format_version: u32,
    pub strategy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stain_matrix: Option<[f64; 6]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_c: Option<[f64; 2]>,
    pub params: ProfileParams,
    pub source_count: usize,
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<Vec<ReferenceEntry>>,
}

impl ProfileDocument {
    /// Snapshot a fitted profile; `created_at` is stamped with the
    /// current UTC time.
    pub fn from_profile(profile: &FittedProfile, params: &EstimatorParams) -> Self {
        let base = Self {
            format_version: PROFILE_FORMAT_VERSION,
            strategy: profile.strategy().as_str().to_string(),
            stain_matrix: None,
            max_c: None,
            params: ProfileParams {
                beta: params.beta,
                alpha: params.alpha,
                i0: params.i0,
            },
            source_count: profile.source_count(),
            created_at: chrono::Utc::now().to_rfc3339(),
            seed: None,
            references: None,
        };
        match profile {
            FittedProfile::Fixed(p) => Self {
                stain_matrix: Some(p.stain_matrix.to_column_major()),
                max_c: Some(p.max_c),
                ..base
            },
            FittedProfile::Stochastic(p) => Self {
                seed: Some(p.seed()),
                references: Some(
                    (0..p.source_count())
                        .map(|i| {
                            let (m, c) = p.reference(i);
                            ReferenceEntry {
                                stain_matrix: m.to_column_major(),
                                max_c: c,
                            }
                        })
                        .collect(),
                ),
                ..base
            },
        }
    }

    /// Rebuild the in-memory profile and estimator parameters. The
    /// persisted schema does not carry `min_tissue_pixels`; the default
    /// is used.
    pub fn to_profile(&self) -> Result<(FittedProfile, EstimatorParams), IoError> {
        let params = EstimatorParams {
            beta: self.params.beta,
            alpha: self.params.alpha,
            i0: self.params.i0,
            ..EstimatorParams::default()
        };
        params.validate().map_err(IoError::Stain)?;

        let tag = StrategyTag::parse(&self.strategy).ok_or_else(|| {
            IoError::Stain(StainError::InvalidParams(format!(
                "unknown strategy tag {:?}",
                self.strategy
            )))
        })?;

        let check_max_c = |max_c: [f64; 2]| -> Result<[f64; 2], IoError> {
            if max_c.iter().all(|c| c.is_finite() && *c > 0.0) {
                Ok(max_c)
            } else {
                Err(IoError::Stain(StainError::InvalidParams(format!(
                    "max_c components must be positive, got {max_c:?}"
                ))))
            }
        };

        let profile = match tag {
            StrategyTag::Stochastic => {
                let seed = self.seed.ok_or_else(|| {
                    IoError::Stain(StainError::InvalidParams(
                        "stochastic profile is missing its seed".into(),
                    ))
                })?;
                let entries = self.references.as_ref().ok_or_else(|| {
                    IoError::Stain(StainError::InvalidParams(
                        "stochastic profile is missing its references".into(),
                    ))
                })?;
                if entries.is_empty() {
                    return Err(IoError::Stain(StainError::InvalidParams(
                        "stochastic profile has no references".into(),
                    )));
                }
                let references = entries
                    .iter()
                    .map(|e| {
                        Ok((
                            StainMatrix::from_column_major(e.stain_matrix)
                                .map_err(IoError::Stain)?,
                            check_max_c(e.max_c)?,
                        ))
                    })
                    .collect::<Result<Vec<_>, IoError>>()?;
                FittedProfile::Stochastic(StochasticProfile::from_parts(references, seed))
            }
            _ => {
                let cols = self.stain_matrix.ok_or_else(|| {
                    IoError::Stain(StainError::InvalidParams(
                        "profile is missing its stain matrix".into(),
                    ))
                })?;
                let max_c = self.max_c.ok_or_else(|| {
                    IoError::Stain(StainError::InvalidParams(
                        "profile is missing max_c".into(),
                    ))
                })?;
                FittedProfile::Fixed(ReferenceProfile {
                    stain_matrix: StainMatrix::from_column_major(cols).map_err(IoError::Stain)?,
                    max_c: check_max_c(max_c)?,
                    strategy: tag,
                    source_count: self.source_count,
                })
            }
        };
        Ok((profile, params))
    }
}

/// Load a PNG or JPEG image as 8-bit RGB. Alpha channels are dropped;
/// grayscale and 16-bit inputs are rejected.
pub fn load_image(path: &Path) -> Result<RgbImage, IoError> {
    if !path.is_file() {
        return Err(IoError::FileNotFound(path.to_path_buf()));
    }
    let reader = image::ImageReader::open(path)?.with_guessed_format()?;
    match reader.format() {
        Some(image::ImageFormat::Png) | Some(image::ImageFormat::Jpeg) => {}
        Some(other) => {
            return Err(IoError::UnsupportedFormat(format!(
                "{other:?} (only PNG and JPEG are supported)"
            )))
        }
        None => {
            return Err(IoError::UnsupportedFormat(
                "unrecognized image format".into(),
            ))
        }
    }
    let decoded = reader
        .decode()
        .map_err(|e| IoError::DecodeError(e.to_string()))?;
    let (rgb, width, height) = match decoded {
        image::DynamicImage::ImageRgb8(buf) => {
            let (w, h) = buf.dimensions();
            (buf.into_raw(), w, h)
        }
        image::DynamicImage::ImageRgba8(buf) => {
            let (w, h) = buf.dimensions();
            let mut data = Vec::with_capacity((w * h * 3) as usize);
            for px in buf.pixels() {
                data.extend_from_slice(&px.0[..3]);
            }
            (data, w, h)
        }
        image::DynamicImage::ImageLuma8(_) | image::DynamicImage::ImageLumaA8(_) => {
            return Err(IoError::UnsupportedFormat(
                "grayscale images are not supported (need 3 or 4 channels)".into(),
            ))
        }
        other => {
            return Err(IoError::UnsupportedFormat(format!(
                "unsupported pixel layout {:?} (need 8-bit, 3 or 4 channels)",
                other.color()
            )))
        }
    };
    RgbImage::new(width as usize, height as usize, rgb).map_err(IoError::Stain)
}

/// Write an image as PNG regardless of the path extension.
pub fn save_image(image: &RgbImage, path: &Path) -> Result<(), IoError> {
    let buf = image::RgbImage::from_raw(
        image.width() as u32,
        image.height() as u32,
        image.data().to_vec(),
    )
    .expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => IoError::Io(io),
            other => IoError::Io(std::io::Error::other(other.to_string())),
        })
}

/// Serialize a fitted profile to pretty JSON at `path`.
pub fn save_profile(
    profile: &FittedProfile,
    params: &EstimatorParams,
    path: &Path,
) -> Result<(), IoError> {
    let doc = ProfileDocument::from_profile(profile, params);
    write_profile_document(&doc, path)
}

pub fn write_profile_document(doc: &ProfileDocument, path: &Path) -> Result<(), IoError> {
    let json = serde_json::to_string_pretty(doc)?;
    fs::write(path, json)?;
    Ok(())
}

/// Parse a profile document, checking the schema version before the
/// strict field layout.
pub fn read_profile_document(path: &Path) -> Result<ProfileDocument, IoError> {
    if !path.is_file() {
        return Err(IoError::FileNotFound(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("format_version") {
        None => {
            return Err(IoError::SchemaVersionMismatch(
                "document has no format_version field".into(),
            ))
        }
        Some(v) => {
            if v.as_u64() != Some(u64::from(PROFILE_FORMAT_VERSION)) {
                return Err(IoError::SchemaVersionMismatch(format!(
                    "expected version {PROFILE_FORMAT_VERSION}, found {v}"
                )));
            }
        }
    }
    Ok(serde_json::from_value(value)?)
}

/// Load a fitted profile and the estimator parameters stored with it.
pub fn load_profile(path: &Path) -> Result<(FittedProfile, EstimatorParams), IoError> {
    read_profile_document(path)?.to_profile()
}
